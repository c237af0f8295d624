# %% [markdown]
# # Folder ingestion and stratified splits
#
# Images live under one folder per class. The split is stratified per class
# with largest-remainder rounding, and the resulting manifest hashes the same
# no matter what order files were listed in.

# %%
import tempfile
from pathlib import Path

from malariadx.data import (allocate, build_splits, load_image_folder, split_dataset,
                            synth_generate, write_image_folder, SynthConfig)

print(allocate(13_779))
print(allocate(23))

# %%
samples, _ = synth_generate(SynthConfig(per_class=15, seed=2))
root = Path(tempfile.mkdtemp())
write_image_folder(samples, root)
loaded, errors = load_image_folder(root, size=(64, 64))
print(len(loaded), "images,", len(errors), "errors")

# %%
manifest = split_dataset(loaded, seed=0)
print(manifest.counts())
print(manifest.sha256()[:16])
print(manifest.to_tsv().splitlines()[:3])

splits = build_splits(loaded, manifest)
print({k: v.labels.mean() for k, v in splits.items()})
