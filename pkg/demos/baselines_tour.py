# %% [markdown]
# # Classical baselines
#
# Two non-neural references: a watershed segmentation that looks for dark
# stain inside the cell, and a random forest over colour histograms.

# %%
import numpy as np

from malariadx.baselines import (ForestConfig, feature_matrix, otsu_threshold, segment_stain,
                                 train_random_forest, watershed_classify)
from malariadx.data import SynthConfig, build_splits, split_dataset, synth_generate

samples, masks = synth_generate(SynthConfig(per_class=60, seed=5))
splits = build_splits(samples, split_dataset(samples, seed=0))
train, test = splits["train"], splits["test"]

# %%
img = samples[0].image
gray = 255 * img.mean(axis=0)
print("otsu threshold", otsu_threshold(gray))
seg = segment_stain(img)
print("predicted", seg.predicted_class, "truth", samples[0].label)

# %%
preds = np.array([watershed_classify(x) for x in test.images])
print("watershed accuracy", np.mean(preds == test.labels))

# %%
forest = train_random_forest(feature_matrix(train.images), train.labels,
                             ForestConfig(n_trees=25, max_depth=8, seed=0))
votes = forest.predict_vote(feature_matrix(test.images))
print("forest accuracy", np.mean(votes == test.labels))
