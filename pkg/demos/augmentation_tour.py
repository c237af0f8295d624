# %% [markdown]
# # MixUp and CutMix with provenance
#
# Each augmented sample remembers who it was mixed with and how much of
# itself it kept, so the soft labels can be rebuilt from the originals.

# %%
import numpy as np

from malariadx.augment import (AugmentConfig, AugmentedBatch, augment_pipeline, batch_rng,
                               cutmix, mixup, random_pairing, replay_labels, sample_lambda)

n = 6
images = np.stack([np.full((3, 16, 16), float(i)) for i in range(n)])
labels = np.array([1, 0, 1, 0, 1, 0], dtype=float)
batch = AugmentedBatch(images, labels)

rng = batch_rng(7, 0, 0)
pairing = random_pairing(n, rng)
print("pairing", pairing)  # nobody is paired with itself

# %%
mixed = mixup(batch, 0.7, pairing)
print("mixup labels", mixed.labels)

cut = cutmix(batch, 0.7, pairing, rng)
for rec in cut.provenance[:3]:
    print(rec[0].kind, rec[0].partner, round(rec[0].lam, 4), rec[0].box)

# %% [markdown]
# The pipeline draws lambda from a Beta distribution and applies each
# augmentation with its own probability. Replaying the provenance against the
# original labels reproduces the soft labels.

# %%
cfg = AugmentConfig(mixup_alpha=0.4, cutmix_alpha=1.0, apply_probability=1.0, seed=3)
out = augment_pipeline(batch, cfg, batch_rng(cfg.seed, 0, 0))
print([r.kind for r in out.provenance[0]])
print(np.array_equal(replay_labels(labels, out.provenance), out.labels))
print("beta draws", [round(sample_lambda(1.0, rng), 3) for _ in range(5)])
