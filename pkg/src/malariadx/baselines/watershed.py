"""Otsu thresholding and marker-seeded watershed, used as a stain-spot classifier."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from ..errors import DegenerateInputError, RejectedInputError
from .features import STAIN_THRESHOLD, stain_score

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def _histogram256(image) -> np.ndarray:
    levels = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.int64)
    return np.bincount(levels.ravel(), minlength=256).astype(np.float64)


def between_class_variance(hist: np.ndarray) -> np.ndarray:
    """Between-class variance for every split ``{<= t} | {> t}``, t = 0..254.

    Splits leaving one class empty get ``-inf``.
    """
    levels = np.arange(256, dtype=np.float64)
    total = hist.sum()
    w0 = np.cumsum(hist)[:-1]
    w1 = total - w0
    s0 = np.cumsum(hist * levels)[:-1]
    s1 = (hist * levels).sum() - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0, mu1 = s0 / w0, s1 / w1
        var = w0 * w1 * (mu0 - mu1) ** 2 / total ** 2
    return np.where((w0 > 0) & (w1 > 0), var, -np.inf)


def pick_threshold(scores: np.ndarray) -> float:
    """Centre of the set of maximizing split levels, as a bin edge (``t + 0.5``)."""
    best = scores.max()
    ties = np.nonzero(scores >= best - 1e-12 * abs(best))[0]
    return 0.5 * (ties[0] + ties[-1]) + 0.5


def otsu_threshold(image) -> float:
    """Otsu threshold of a grey image with values on the 0..255 scale.

    Values are rounded into 256 integer bins.  The result is a bin edge:
    pixels ``> threshold`` form the bright class.  When several split
    levels tie for the maximum the centre of the tied range is returned.
    """
    hist = _histogram256(image)
    if np.count_nonzero(hist) < 2:
        raise DegenerateInputError("Otsu threshold is undefined for a constant image")
    return pick_threshold(between_class_variance(hist))


def gradient_magnitude(image: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(np.asarray(image, dtype=np.float64))
    return np.hypot(gy, gx)


@dataclass
class SegmentationResult:
    labels: np.ndarray  # region id per pixel, 0..K-1
    areas: np.ndarray
    mean_intensity: np.ndarray
    predicted_class: Optional[int] = None

    @property
    def n_regions(self) -> int:
        return len(self.areas)


def watershed_segment(image: np.ndarray, markers: np.ndarray,
                      surface: Optional[np.ndarray] = None) -> SegmentationResult:
    """Priority-flood watershed from seed markers over the gradient magnitude.

    ``markers`` holds positive integers for seed pixels and 0 elsewhere.  The
    k-th smallest marker id becomes region ``k - 1`` (so the lowest id is
    region 0, conventionally the background).  Pixels are claimed in order
    of (flood level, region id, insertion order) with 4-connectivity; every
    pixel ends up in exactly one region.
    """
    image = np.asarray(image, dtype=np.float64)
    markers = np.asarray(markers)
    if image.ndim != 2 or markers.shape != image.shape:
        raise RejectedInputError("image and markers must be 2-D arrays of the same shape")
    ids = np.unique(markers[markers > 0])
    if len(ids) == 0:
        raise RejectedInputError("watershed needs at least one marker")
    if surface is None:
        surface = gradient_magnitude(image)

    h, w = image.shape
    labels = np.full((h, w), -1, dtype=np.int64)
    heap = []
    counter = 0
    for region, mid in enumerate(ids):
        for y, x in zip(*np.nonzero(markers == mid)):
            labels[y, x] = region
            heap.append((surface[y, x], region, counter, y, x))
            counter += 1
    heapq.heapify(heap)
    while heap:
        level, region, _, y, x = heapq.heappop(heap)
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and labels[ny, nx] < 0:
                labels[ny, nx] = region
                heapq.heappush(heap, (max(level, surface[ny, nx]), region, counter, ny, nx))
                counter += 1

    k = len(ids)
    areas = np.bincount(labels.ravel(), minlength=k)
    sums = np.bincount(labels.ravel(), weights=image.ravel(), minlength=k)
    return SegmentationResult(labels, areas, sums / np.maximum(areas, 1))


@dataclass(frozen=True)
class StainConfig:
    """Decision floors for calling a segmented region a parasite."""

    min_area: int = 4
    min_stain: float = STAIN_THRESHOLD
    background_margin: int = 2


def to_grey255(score: np.ndarray) -> np.ndarray:
    # stain score lives in [-1, 1]
    return (np.clip(score, -1.0, 1.0) + 1.0) * 127.5


def watershed_classify(image: np.ndarray, config: StainConfig = StainConfig()) -> float:
    """1.0 if a stained interior region passes the area and stain floors, else 0.0."""
    return float(segment_stain(image, config).predicted_class)


def segment_stain(image: np.ndarray, config: StainConfig = StainConfig()) -> SegmentationResult:
    """Otsu on the stain channel, seed markers from stained components, then watershed."""
    score = stain_score(np.asarray(image, dtype=np.float64))
    grey = to_grey255(score)
    try:
        t = otsu_threshold(grey)
    except DegenerateInputError:
        labels = np.zeros(score.shape, dtype=np.int64)
        return SegmentationResult(labels, np.array([score.size]), np.array([score.mean()]), 0)
    fg = grey > t
    components, n = ndimage.label(fg, structure=FOUR_CONNECTED)
    markers = np.where(components > 0, components + 1, 0)
    near = ndimage.binary_dilation(fg, FOUR_CONNECTED, iterations=config.background_margin)
    markers[~near] = 1
    result = watershed_segment(score, markers)

    border = np.zeros(score.shape, dtype=bool)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    touching = set(np.unique(result.labels[border]))
    first = 1 if np.any(markers == 1) else 0  # region 0 is the background seed when present
    positive = any(
        r not in touching and result.areas[r] >= config.min_area
        and result.mean_intensity[r] >= config.min_stain
        for r in range(first, result.n_regions)
    )
    result.predicted_class = int(positive)
    return result
