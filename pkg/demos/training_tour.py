# %% [markdown]
# # Training a small residual net on synthetic cells
#
# The synthetic generator draws round cells; the parasitized ones carry a dark
# stained dot. A few epochs on a tiny net are enough to see the loss fall.

# %%
from malariadx.augment import AugmentConfig
from malariadx.data import SynthConfig, build_splits, split_dataset, synth_generate
from malariadx.model import ModelConfig, StageSpec, StemSpec
from malariadx.training import Model, TrainConfig, evaluate, fit

samples, _ = synth_generate(SynthConfig(per_class=40, image_size=24, cell_radius=(7.0, 10.0),
                                        dot_radius=(1.5, 2.5), seed=3))
splits = build_splits(samples, split_dataset(samples, seed=1))
print({k: len(v) for k, v in splits.items()})

net = ModelConfig(stem=StemSpec(8, kernel=3), stages=(StageSpec(1, 8, 1), StageSpec(1, 16, 2)),
                  input_size=(3, 24, 24))
model = Model.create(net, init_seed=0)

# %%
result = fit(model, splits, AugmentConfig(seed=2), TrainConfig(epochs=15, batch_size=16, seed=0))
for stats in result.history:
    print(stats.log_line())
print("best epoch", result.best_epoch, "val acc", result.best_val_acc)

# %% [markdown]
# `fit` keeps the parameters from the epoch with the best validation accuracy.
# Only now is the test split touched.

# %%
model.params = result.best_params
loss, acc, _ = evaluate(model, splits["test"])
print(f"test loss {loss:.4f} acc {acc:.3f}")
