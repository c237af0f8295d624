"""Dataset ingestion, stratified splitting and the synthetic cell generator.

The on-disk layout is the one used by the public thin-smear corpus::

    root/Parasitized/*.png
    root/Uninfected/*.png

Images are held as float arrays of shape (C, H, W) with values in [0, 1].
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import LayoutError, RejectedInputError

logger = logging.getLogger(__name__)

CLASS_DIRS = ("Parasitized", "Uninfected")
CLASS_LABELS = {"Parasitized": 1, "Uninfected": 0}
LABEL_NAMES = {1: "Parasitized", 0: "Uninfected"}
SPLIT_ORDER = ("train", "test", "validation")
DEFAULT_RATIOS = (7, 2, 1)
DEFAULT_SIZE = (64, 64)


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray  # C, H, W in [0, 1]
    label: int  # 1 parasitized, 0 uninfected
    source_id: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise RejectedInputError(f"label must be 0 or 1, got {self.label}")
        if self.image.ndim != 3:
            raise RejectedInputError(f"image must be (C, H, W), got {self.image.shape}")


# ---------------------------------------------------------------------------
# resampling


def _axis_weights(n_in: int, n_out: int):
    # half-pixel-centre bilinear sampling positions along one axis
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resize_bilinear(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Resize a (C, H, W) image with half-pixel-aligned bilinear interpolation."""
    c, h, w = image.shape
    oh, ow = size
    if (h, w) == (oh, ow):
        return image.copy()
    y0, y1, fy = _axis_weights(h, oh)
    x0, x1, fx = _axis_weights(w, ow)
    rows = image[:, y0, :] * (1 - fy)[None, :, None] + image[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def preprocess(sample: LabeledSample, size: Tuple[int, int] = DEFAULT_SIZE) -> LabeledSample:
    image = np.clip(resize_bilinear(np.asarray(sample.image, dtype=np.float64), size), 0.0, 1.0)
    return LabeledSample(image, sample.label, sample.source_id)


# ---------------------------------------------------------------------------
# folder ingestion


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def load_image_folder(root, size: Tuple[int, int] = DEFAULT_SIZE
                      ) -> Tuple[List[LabeledSample], List[Tuple[str, str]]]:
    """Read every PNG under ``root/Parasitized`` and ``root/Uninfected``.

    Returns ``(samples, errors)``; unreadable files are reported in
    ``errors`` as ``(relative_path, message)`` and skipped.  Samples are
    ordered by relative path.
    """
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"dataset root {root} is not a directory")
    files = []
    for cls in CLASS_DIRS:
        folder = root / cls
        pngs = sorted(p for p in folder.glob("*") if p.suffix.lower() == ".png") if folder.is_dir() else []
        if not pngs:
            raise LayoutError(f"class folder {folder} is missing or has no PNG images")
        files.extend((p, CLASS_LABELS[cls]) for p in pngs)
    files.sort(key=lambda item: item[0].relative_to(root).as_posix())

    samples, errors = [], []
    for path, label in files:
        rel = path.relative_to(root).as_posix()
        try:
            image = read_png(path)
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", rel, exc)
            errors.append((rel, str(exc)))
            continue
        samples.append(preprocess(LabeledSample(image, label, rel), size))
    return samples, errors


def write_png(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def write_image_folder(samples: Sequence[LabeledSample], root) -> None:
    """Write samples as PNGs in the class-folder layout, named by ``source_id``."""
    root = Path(root)
    for s in samples:
        write_png(s.image, root / s.source_id)


# ---------------------------------------------------------------------------
# splitting


def allocate(n: int, ratios: Sequence[int] = DEFAULT_RATIOS) -> List[int]:
    """Split ``n`` items by ``ratios`` with the largest-remainder rule.

    Every part gets the floor of its exact quota; leftover items go to the
    parts with the largest fractional remainders, earlier parts first on ties.
    """
    total = sum(ratios)
    quotas = [n * r / total for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    leftover = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    class_name: str
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    records: Tuple[ManifestRecord, ...]
    ratios: Tuple[int, ...] = DEFAULT_RATIOS
    seed: int = 0

    def counts(self) -> Dict[str, Dict[str, int]]:
        out: Dict[str, Dict[str, int]] = {}
        for r in self.records:
            out.setdefault(r.class_name, {s: 0 for s in SPLIT_ORDER})[r.split] += 1
        return out

    def split_of(self) -> Dict[str, str]:
        return {r.path: r.split for r in self.records}

    def to_tsv(self) -> str:
        return "".join(f"{r.path}\t{r.class_name}\t{r.split}\n" for r in self.records)

    @classmethod
    def from_tsv(cls, text: str, ratios=DEFAULT_RATIOS, seed: int = 0) -> "DatasetManifest":
        records = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[1] not in CLASS_LABELS or parts[2] not in SPLIT_ORDER:
                raise RejectedInputError(f"manifest line {lineno} is malformed: {line!r}")
            records.append(ManifestRecord(*parts))
        return cls(tuple(records), tuple(ratios), seed)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()


def split_dataset(samples: Sequence[LabeledSample], ratios: Sequence[int] = DEFAULT_RATIOS,
                  seed: int = 0) -> DatasetManifest:
    """Stratified split into train/test/validation (in that order of ``ratios``).

    Each class is sorted by source id, shuffled with a generator keyed on
    ``(seed, label)`` and cut into contiguous runs.
    """
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise RejectedInputError(f"ratios must be three non-negative parts, got {ratios}")
    assignment: Dict[str, str] = {}
    for label in (1, 0):
        ids = sorted(s.source_id for s in samples if s.label == label)
        if not ids:
            raise RejectedInputError(f"class {LABEL_NAMES[label]} has no samples")
        order = np.random.default_rng([seed, label]).permutation(len(ids))
        start = 0
        for split, count in zip(SPLIT_ORDER, allocate(len(ids), ratios)):
            for k in order[start:start + count]:
                assignment[ids[k]] = split
            start += count
    if len(assignment) != len(samples):
        raise RejectedInputError("duplicate source ids in samples")
    label_of = {s.source_id: s.label for s in samples}
    records = tuple(
        ManifestRecord(sid, LABEL_NAMES[label_of[sid]], assignment[sid]) for sid in sorted(assignment)
    )
    return DatasetManifest(records, tuple(ratios), seed)


class DatasetSplit:
    """Images and labels of one split.  Counts every read of its contents."""

    def __init__(self, name: str, images: np.ndarray, labels: np.ndarray, ids: Sequence[str]):
        self.name = name
        self._images = np.asarray(images)
        self._labels = np.asarray(labels, dtype=np.float64)
        self.ids = list(ids)
        self.reads = 0

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def images(self) -> np.ndarray:
        self.reads += 1
        return self._images

    @property
    def labels(self) -> np.ndarray:
        self.reads += 1
        return self._labels

    @classmethod
    def from_samples(cls, name: str, samples: Sequence[LabeledSample]) -> "DatasetSplit":
        if not samples:
            return cls(name, np.zeros((0, 3, 1, 1)), np.zeros(0), [])
        return cls(name, np.stack([s.image for s in samples]),
                   np.array([s.label for s in samples], dtype=np.float64),
                   [s.source_id for s in samples])


def build_splits(samples: Sequence[LabeledSample], manifest: DatasetManifest) -> Dict[str, DatasetSplit]:
    where = manifest.split_of()
    grouped: Dict[str, List[LabeledSample]] = {s: [] for s in SPLIT_ORDER}
    for s in samples:
        if s.source_id in where:
            grouped[where[s.source_id]].append(s)
    return {name: DatasetSplit.from_samples(name, group) for name, group in grouped.items()}


# ---------------------------------------------------------------------------
# synthetic cells

BACKGROUND = np.array([0.02, 0.02, 0.02])
CELL = np.array([0.85, 0.62, 0.72])
STAIN = np.array([0.30, 0.10, 0.55])
PRECIPITATE = np.array([0.12, 0.10, 0.34])  # blue-black, stains like a parasite under blue-minus-red


@dataclass(frozen=True)
class SynthConfig:
    per_class: int = 400
    image_size: int = 64
    cell_radius: Tuple[float, float] = (18.0, 26.0)
    dot_radius: Tuple[float, float] = (2.0, 4.0)
    max_dots: int = 2
    noise: float = 0.02
    debris_probability: float = 0.1
    precipitate_probability: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.per_class < 1:
            raise RejectedInputError("per_class must be at least 1")
        if not 0 < self.dot_radius[0] <= self.dot_radius[1] < self.cell_radius[0] <= self.cell_radius[1]:
            raise RejectedInputError("need 0 < dot radius range < cell radius range")
        if 2 * self.cell_radius[1] >= self.image_size:
            raise RejectedInputError("cell does not fit in the image")


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _render(config: SynthConfig, index: int, parasitized: bool) -> Tuple[np.ndarray, np.ndarray]:
    n = config.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    base = np.random.default_rng([config.seed, index, 0])

    ry, rx = base.uniform(*config.cell_radius, size=2)
    theta = base.uniform(0, np.pi)
    margin = max(ry, rx) + 1
    cy, cx = base.uniform(margin, n - margin, size=2)
    dy, dx = yy - cy, xx - cx
    u = (dy * np.cos(theta) + dx * np.sin(theta)) / ry
    v = (-dy * np.sin(theta) + dx * np.cos(theta)) / rx
    cell = u * u + v * v <= 1.0

    image = np.empty((3, n, n))
    image[:] = BACKGROUND[:, None, None]
    image[:, cell] = CELL[:, None]

    if base.random() < config.debris_probability:
        # precipitate debris lying on the background, outside the cell
        for _ in range(50):
            r = base.uniform(*config.dot_radius)
            ay, ax = base.uniform(r, n - r, size=2)
            blob = _disk(yy, xx, ay, ax, r)
            if not np.any(blob & _disk(yy, xx, cy, cx, max(ry, rx) + 2)):
                image[:, blob] = PRECIPITATE[:, None]
                break
    if base.random() < config.precipitate_probability:
        r = base.uniform(*config.dot_radius)
        rho = base.uniform(0, max(min(ry, rx) - r - 2.0, 0.0))
        phi = base.uniform(0, 2 * np.pi)
        image[:, _disk(yy, xx, cy + rho * np.sin(phi), cx + rho * np.cos(phi), r)] = PRECIPITATE[:, None]
    noise = base.normal(0.0, config.noise, size=image.shape) if config.noise > 0 else 0.0

    mask = np.zeros((n, n), dtype=bool)
    if parasitized:
        dots = np.random.default_rng([config.seed, index, 1])
        inner = min(ry, rx)
        for _ in range(int(dots.integers(1, config.max_dots + 1))):
            r = dots.uniform(*config.dot_radius)
            rho = dots.uniform(0, max(inner - r - 2.0, 0.0))
            phi = dots.uniform(0, 2 * np.pi)
            mask |= _disk(yy, xx, cy + rho * np.sin(phi), cx + rho * np.cos(phi), r)
        image[:, mask] = STAIN[:, None]
    return np.clip(image + noise, 0.0, 1.0), mask


def synth_generate(config: SynthConfig) -> Tuple[List[LabeledSample], List[np.ndarray]]:
    """Generate ``per_class`` cells of each class and their parasite masks.

    Sample ``i`` of both classes shares its cell geometry, debris,
    precipitate and noise; the parasitized copy adds one or more stain dots
    inside the cell.  Precipitate blobs, off the cell (debris) or on it,
    are distractors present in both classes.  They share the parasite's
    blue-over-red signature but not its hue.
    """
    samples, masks = [], []
    for i in range(config.per_class):
        for label in (1, 0):
            image, mask = _render(config, i, parasitized=bool(label))
            sid = f"{LABEL_NAMES[label]}/synth_{i:05d}.png"
            samples.append(LabeledSample(image, label, sid))
            masks.append(mask)
    return samples, masks


def iter_batches(n: int, batch_size: int, order: Optional[np.ndarray] = None) -> Iterator[np.ndarray]:
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]
