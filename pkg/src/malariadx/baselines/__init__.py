"""Non-neural comparison classifiers: a random forest and a watershed stain detector."""

from .features import extract_features, feature_matrix, stain_mask, stain_score
from .forest import (
    DecisionTree,
    ForestConfig,
    RandomForest,
    load_forest,
    rf_predict,
    save_forest,
    train_random_forest,
)
from .watershed import (
    SegmentationResult,
    StainConfig,
    otsu_threshold,
    segment_stain,
    watershed_classify,
    watershed_segment,
)

__all__ = [
    "DecisionTree", "ForestConfig", "RandomForest", "SegmentationResult", "StainConfig",
    "extract_features", "feature_matrix", "load_forest", "otsu_threshold", "rf_predict",
    "save_forest", "segment_stain", "stain_mask", "stain_score", "train_random_forest",
    "watershed_classify", "watershed_segment",
]
