"""MixUp and CutMix batch augmentation with exact soft-label bookkeeping.

Every augmented sample carries a provenance trail (one :class:`MixRecord`
per applied step) that is enough to recompute its label from the source
labels; see :func:`replay_labels`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import RejectedInputError

Box = Tuple[int, int, int, int]  # y0, y1, x0, x1 (half-open)


@dataclass(frozen=True)
class AugmentConfig:
    mixup_alpha: float = 0.2
    cutmix_alpha: float = 0.2
    apply_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (self.mixup_alpha > 0 and self.cutmix_alpha > 0):
            raise RejectedInputError("Beta alphas must be positive")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise RejectedInputError("apply_probability must lie in [0, 1]")


@dataclass(frozen=True)
class MixRecord:
    kind: str  # "mixup" or "cutmix"
    partner: int
    lam: float  # weight kept by the sample itself (lambda_eff for cutmix)
    box: Optional[Box] = None


@dataclass
class AugmentedBatch:
    images: np.ndarray  # N, C, H, W
    labels: np.ndarray  # N, soft labels in [0, 1]
    provenance: Tuple[Tuple[MixRecord, ...], ...] = ()

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise RejectedInputError(
                f"images {self.images.shape} and labels {self.labels.shape} do not form a batch")
        if not self.provenance:
            self.provenance = tuple(() for _ in range(len(self.labels)))

    def __len__(self) -> int:
        return len(self.labels)


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Draw a mixing weight from Beta(alpha, alpha)."""
    if not alpha > 0:
        raise RejectedInputError(f"alpha must be positive, got {alpha}")
    return float(rng.beta(alpha, alpha))


def random_pairing(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random permutation with no fixed points (identity when n == 1)."""
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def _check_pairing(pairing, n: int) -> np.ndarray:
    pairing = np.asarray(pairing, dtype=np.int64)
    if pairing.shape != (n,) or not np.array_equal(np.sort(pairing), np.arange(n)):
        raise RejectedInputError(f"pairing is not a permutation of {n} samples")
    return pairing


def _append(batch: AugmentedBatch, records: Sequence[MixRecord]):
    return tuple(p + (r,) for p, r in zip(batch.provenance, records))


def mixup(batch: AugmentedBatch, lam: float, pairing) -> AugmentedBatch:
    """Convex combination of every sample with its partner, images and labels alike."""
    if not 0.0 <= lam <= 1.0:
        raise RejectedInputError(f"lambda must lie in [0, 1], got {lam}")
    pairing = _check_pairing(pairing, len(batch))
    images = lam * batch.images + (1.0 - lam) * batch.images[pairing]
    labels = lam * batch.labels + (1.0 - lam) * batch.labels[pairing]
    records = [MixRecord("mixup", int(j), float(lam)) for j in pairing]
    return AugmentedBatch(images.astype(batch.images.dtype, copy=False), labels,
                          _append(batch, records))


def cutmix_box(height: int, width: int, lam: float, rng: np.random.Generator) -> Box:
    """Rectangle with side fractions sqrt(1 - lam) around a uniform random center, clipped."""
    frac = np.sqrt(1.0 - lam)
    ch, cw = int(height * frac), int(width * frac)
    cy, cx = int(rng.integers(height)), int(rng.integers(width))
    y0, x0 = cy - ch // 2, cx - cw // 2
    return (max(y0, 0), min(y0 + ch, height), max(x0, 0), min(x0 + cw, width))


def cutmix(batch: AugmentedBatch, lam: float, pairing, rng: Optional[np.random.Generator] = None,
           boxes: Optional[Sequence[Box]] = None) -> AugmentedBatch:
    """Paste a partner patch into every image; labels weighted by surviving area.

    Each sample gets its own box (drawn from ``rng`` unless ``boxes`` is
    given).  The recorded ``lam`` is ``1 - box_area / (H * W)`` after
    clipping, so label arithmetic matches the pixels exactly.
    """
    if not 0.0 <= lam <= 1.0:
        raise RejectedInputError(f"lambda must lie in [0, 1], got {lam}")
    n, _, h, w = batch.images.shape
    pairing = _check_pairing(pairing, n)
    if boxes is None:
        if rng is None:
            raise RejectedInputError("cutmix needs an rng or explicit boxes")
        boxes = [cutmix_box(h, w, lam, rng) for _ in range(n)]
    if len(boxes) != n:
        raise RejectedInputError(f"expected {n} boxes, got {len(boxes)}")

    images = batch.images.copy()
    labels = np.empty(n)
    records = []
    for i, (j, box) in enumerate(zip(pairing, boxes)):
        y0, y1, x0, x1 = (int(v) for v in box)
        if not (0 <= y0 <= y1 <= h and 0 <= x0 <= x1 <= w):
            raise RejectedInputError(f"box {box} outside a {h}x{w} image")
        images[i, :, y0:y1, x0:x1] = batch.images[j, :, y0:y1, x0:x1]
        lam_eff = 1.0 - (y1 - y0) * (x1 - x0) / (h * w)
        labels[i] = lam_eff * batch.labels[i] + (1.0 - lam_eff) * batch.labels[j]
        records.append(MixRecord("cutmix", int(j), lam_eff, (y0, y1, x0, x1)))
    return AugmentedBatch(images, labels, _append(batch, records))


def augment_pipeline(batch: AugmentedBatch, config: AugmentConfig,
                     rng: np.random.Generator) -> AugmentedBatch:
    """MixUp, then CutMix, each applied independently with ``apply_probability``."""
    n, _, h, w = batch.images.shape
    if rng.random() < config.apply_probability:
        lam = sample_lambda(config.mixup_alpha, rng)
        batch = mixup(batch, lam, random_pairing(n, rng))
    if rng.random() < config.apply_probability:
        lam = sample_lambda(config.cutmix_alpha, rng)
        pairing = random_pairing(n, rng)
        batch = cutmix(batch, lam, pairing, rng)
    return batch


def replay_labels(source_labels, provenance: Sequence[Sequence[MixRecord]]) -> np.ndarray:
    """Recompute augmented labels from the original labels and provenance trails."""
    labels = np.asarray(source_labels, dtype=np.float64).copy()
    steps = {len(p) for p in provenance}
    if len(steps) > 1:
        raise RejectedInputError("provenance trails have different lengths")
    for k in range(steps.pop() if steps else 0):
        labels = np.array([
            p[k].lam * labels[i] + (1.0 - p[k].lam) * labels[p[k].partner]
            for i, p in enumerate(provenance)
        ])
    return labels


def batch_rng(seed: int, *counters: int) -> np.random.Generator:
    """Counter-based generator keyed on ``(seed, *counters)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *counters])))
