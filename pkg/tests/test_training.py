import numpy as np
import pytest

from malariadx.augment import AugmentConfig
from malariadx.checkpoint import load_checkpoint
from malariadx.data import DatasetSplit, SynthConfig, build_splits, split_dataset, synth_generate
from malariadx.errors import RejectedInputError
from malariadx.model import ModelConfig, ModelParams, StageSpec, StemSpec, preset
from malariadx.tensor import Tensor
from malariadx.training import (AdamState, EpochStats, Model, TrainConfig, adam_step,
                                conv_gradient_norms, evaluate, fit, is_frozen, train_epoch)

SMALL = SynthConfig(per_class=20, image_size=24, cell_radius=(7.0, 10.0), dot_radius=(1.5, 2.5), seed=3)
NET = ModelConfig(stem=StemSpec(4, kernel=3), stages=(StageSpec(1, 4, 1), StageSpec(1, 8, 2)),
                  input_size=(3, 24, 24))


@pytest.fixture(scope="module")
def splits():
    samples, _ = synth_generate(SMALL)
    return build_splits(samples, split_dataset(samples, seed=1))


def fresh_splits():
    samples, _ = synth_generate(SMALL)
    return build_splits(samples, split_dataset(samples, seed=1))


def scalar_params(value=0.5):
    return ModelParams({"a.w": Tensor([value]), "b.w": Tensor([[1.0, -2.0]])}, {})


# ---------------------------------------------------------------------------
# config


@pytest.mark.parametrize("bad", [dict(epochs=-1), dict(batch_size=0), dict(learning_rate=-1e-3),
                                 dict(beta1=1.0), dict(beta2=1.0), dict(eps=0.0)])
def test_invalid_train_config(bad):
    with pytest.raises(RejectedInputError):
        TrainConfig(**bad)


def test_is_frozen_respects_dotted_boundary():
    assert is_frozen("stage0.block0.conv0.weight", ["stage0"])
    assert is_frozen("stage0.block0.conv0.weight", ["stage0."])
    assert not is_frozen("stage01.block0.conv0.weight", ["stage0"])
    assert not is_frozen("stem.conv0.weight", [""])


# ---------------------------------------------------------------------------
# adam


def test_adam_first_step_hand_oracle():
    lr, eps = 1e-3, 1e-8
    # t=1: m = 0.1 g, v = 0.001 g^2; bias correction restores g and g^2 exactly
    expected_delta = -lr * 1.0 / (1.0 + eps)
    params = ModelParams({"w": Tensor([0.0])}, {})
    new, state = adam_step(params, {"w": Tensor([1.0])}, AdamState(), TrainConfig(learning_rate=lr, eps=eps))
    assert new["w"].data[0] == pytest.approx(expected_delta, rel=1e-12)
    # the quoted figure carries six significant digits
    assert abs(new["w"].data[0] + 9.99999e-4) < 1e-9
    assert state.t == 1
    assert state.m["w"][0] == pytest.approx(0.1) and state.v["w"][0] == pytest.approx(0.001)


def test_adam_second_step_hand_oracle():
    cfg = TrainConfig(learning_rate=0.01)
    params = ModelParams({"w": Tensor([1.0])}, {})
    p1, s1 = adam_step(params, {"w": Tensor([2.0])}, AdamState(), cfg)
    p2, s2 = adam_step(p1, {"w": Tensor([-1.0])}, s1, cfg)
    m = 0.9 * 0.2 + 0.1 * -1.0
    v = 0.999 * 0.004 + 0.001 * 1.0
    mhat, vhat = m / (1 - 0.81), v / (1 - 0.999 ** 2)
    assert p2["w"].data[0] == pytest.approx(p1["w"].data[0] - 0.01 * mhat / (np.sqrt(vhat) + 1e-8), rel=1e-12)
    assert s2.t == 2 and np.all(s2.v["w"] >= 0)


def test_adam_zero_gradient_leaves_params():
    params = scalar_params()
    grads = {n: Tensor(np.zeros(t.shape)) for n, t in params.tensors.items()}
    new, _ = adam_step(params, grads, AdamState(), TrainConfig())
    for n in params.tensors:
        assert np.array_equal(new[n].data, params[n].data)


def test_adam_freeze_ten_steps(rng):
    cfg = TrainConfig(freeze_prefixes=("b",))
    params, state = scalar_params(), AdamState()
    before = params["b.w"].data.copy()
    for _ in range(10):
        params, state = adam_step(params, {"a.w": Tensor(rng.normal(size=1))}, state, cfg)
    assert params["b.w"].data.tobytes() == before.tobytes()
    assert params["a.w"].data[0] != 0.5 and state.t == 10


def test_adam_gradient_names_must_match():
    params = scalar_params()
    with pytest.raises(RejectedInputError):
        adam_step(params, {"a.w": Tensor([1.0])}, AdamState(), TrainConfig())
    with pytest.raises(RejectedInputError):
        adam_step(params, {"a.w": Tensor([1.0, 2.0]), "b.w": Tensor([[0.0, 0.0]])},
                  AdamState(), TrainConfig())


# ---------------------------------------------------------------------------
# epochs


def test_zero_learning_rate_is_noop(splits):
    model = Model.create(NET, 0, dtype=np.float64)
    before = {n: t.data.tobytes() for n, t in model.params.tensors.items()}
    cfg = TrainConfig(learning_rate=0.0, batch_size=len(splits["train"]))
    losses = [train_epoch(model, splits["train"], None, cfg, e).loss for e in range(3)]
    assert {n: t.data.tobytes() for n, t in model.params.tensors.items()} == before
    # one full batch per epoch: only the summation order changes
    assert max(losses) - min(losses) < 1e-12


def test_epoch_is_deterministic(splits):
    cfg = TrainConfig(batch_size=8, seed=4)
    aug = AugmentConfig(apply_probability=1.0, seed=4)
    runs = []
    for _ in range(2):
        model = Model.create(NET, 1)
        stats = train_epoch(model, splits["train"], aug, cfg, 0, splits["validation"])
        runs.append((stats.loss, stats.train_acc, stats.val_loss, stats.val_acc,
                     model.params["stem.conv0.weight"].data.tobytes()))
    assert runs[0] == runs[1]


def test_epoch_stats_ranges(splits):
    stats = train_epoch(Model.create(NET, 0), splits["train"], AugmentConfig(seed=1),
                        TrainConfig(batch_size=8), 0, splits["validation"])
    assert stats.loss >= 0 and stats.val_loss >= 0
    assert 0 <= stats.train_acc <= 1 and 0 <= stats.val_acc <= 1


def test_log_line_format():
    line = EpochStats(3, 0.25, 0.5, None, 0.75, 1.5).log_line()
    assert line.split("\t") == ["3", "0.25000000", "0.50000000", "nan", "0.75000000", "1.500"]


def test_empty_train_split_rejected(splits):
    with pytest.raises(RejectedInputError):
        train_epoch(Model.create(NET, 0), DatasetSplit.from_samples("train", []), None, TrainConfig())


# ---------------------------------------------------------------------------
# fit


def test_fit_zero_epochs_returns_initial(splits):
    model = Model.create(NET, 0)
    initial = model.params
    result = fit(model, splits, None, TrainConfig(epochs=0))
    assert result.params is initial and result.history == [] and result.best_epoch is None


def test_fit_requires_train_and_validation(splits):
    with pytest.raises(RejectedInputError):
        fit(Model.create(NET, 0), {"train": splits["train"]}, None, TrainConfig(epochs=1))


def test_fit_never_reads_test_and_reloads_best(tmp_path):
    splits = fresh_splits()
    model = Model.create(NET, 2)
    cfg = TrainConfig(epochs=4, batch_size=8, seed=2, freeze_prefixes=("stem",))
    frozen = {n: t.data.tobytes() for n, t in {**model.params.tensors, **model.params.buffers}.items()
              if n.startswith("stem.")}
    ckpt, log = tmp_path / "best.plsm", tmp_path / "epochs.tsv"
    result = fit(model, splits, AugmentConfig(seed=2), cfg, ckpt, log)

    assert splits["test"].reads == 0
    assert len(result.history) == 4
    assert len(log.read_text().splitlines()) == 4
    for n, raw in frozen.items():
        src = model.params.tensors[n] if n in model.params.tensors else model.params.buffers[n]
        assert src.data.tobytes() == raw

    params, config = load_checkpoint(ckpt)
    reloaded = Model(config, params)
    _, acc, _ = evaluate(reloaded, splits["validation"])
    assert acc == result.best_val_acc
    best = max(result.history, key=lambda s: (s.val_acc, -s.val_loss))
    assert best.epoch == result.best_epoch


def test_gradient_norm_ratio_with_skips():
    samples, _ = synth_generate(SynthConfig(per_class=16, seed=5))
    images = np.stack([s.image for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.float64)
    model = Model.create(preset("resnet-mini"), 0)
    norms = conv_gradient_norms(model, images, labels)
    first = [v for n, v in norms.items() if n.startswith("stage0.")]
    last = [v for n, v in norms.items() if n.startswith("stage1.")]
    ratio = np.mean(first) / np.mean(last)
    assert 1e-3 < ratio < 1e3
