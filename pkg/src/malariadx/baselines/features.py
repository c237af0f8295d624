"""Hand-crafted colour features for the tree-based baseline."""

from __future__ import annotations

import numpy as np

HIST_BINS = 16
STAIN_THRESHOLD = 0.15


def stain_score(image: np.ndarray) -> np.ndarray:
    """Blue minus red, per pixel.  Purple stain scores high, pink cytoplasm low."""
    if image.shape[0] < 3:
        return np.zeros(image.shape[1:])
    return image[2] - image[0]


def stain_mask(image: np.ndarray, threshold: float = STAIN_THRESHOLD) -> np.ndarray:
    return stain_score(image) > threshold


def feature_length(channels: int = 3) -> int:
    return channels * (HIST_BINS + 2) + 1


def extract_features(image: np.ndarray, stain_threshold: float = STAIN_THRESHOLD) -> np.ndarray:
    """Fixed-length vector for a (C, H, W) image in [0, 1].

    Layout: C normalized 16-bin histograms, then C channel means, then C
    channel variances, then the stained-pixel fraction.
    """
    image = np.asarray(image, dtype=np.float64)
    c = image.shape[0]
    hists = []
    for ch in image:
        counts, _ = np.histogram(ch, bins=HIST_BINS, range=(0.0, 1.0))
        hists.append(counts / ch.size)
    # sorted pixels make the sums independent of pixel order (flips, rotations)
    flat = np.sort(image.reshape(c, -1), axis=1)
    means = flat.mean(axis=1)
    variances = flat.var(axis=1)
    stained = stain_mask(image, stain_threshold).mean()
    return np.concatenate([np.concatenate(hists), means, variances, [stained]])


def feature_matrix(images: np.ndarray, stain_threshold: float = STAIN_THRESHOLD) -> np.ndarray:
    return np.stack([extract_features(im, stain_threshold) for im in images])
