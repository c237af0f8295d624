# %% [markdown]
# # Residual model configs
#
# Architectures are plain dataclasses. Counting layers and parameters needs no
# weights at all, so the large presets are cheap to inspect.

# %%
import numpy as np

from malariadx.model import (build_model, feature_map_sizes, forward, layer_counts, param_count,
                             preset, resnet_mini)
from malariadx.tensor import Tensor

for name in ("resnet-mini", "resnet50", "vgg16"):
    cfg = preset(name)
    print(f"{name:12s} params={param_count(cfg):>11,d} layers={layer_counts(cfg)}")

# %%
cfg = resnet_mini((3, 32, 32))
print("feature maps", feature_map_sizes(cfg))
params = build_model(cfg, init_seed=0)
x = Tensor(np.random.default_rng(1).random((4, 3, 32, 32)))
print("probabilities", forward(params, cfg, x).data.ravel())

# %% [markdown]
# Dropping the skip connections keeps every conv layer and only removes the
# additions, which is what the plain baseline is built from.

# %%
plain = resnet_mini((3, 32, 32), skip_connections=False)
print(layer_counts(cfg))
print(layer_counts(plain))
print(cfg.canonical_text())
