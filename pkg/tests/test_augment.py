import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from malariadx.augment import (AugmentConfig, AugmentedBatch, MixRecord, augment_pipeline, batch_rng,
                               cutmix, cutmix_box, mixup, random_pairing, replay_labels, sample_lambda)
from malariadx.errors import RejectedInputError


def ks_uniform(draws):
    x = np.sort(draws)
    n = len(x)
    i = np.arange(1, n + 1)
    return max(np.max(i / n - x), np.max(x - (i - 1) / n))


def distinct_batch(n, h=8, w=8, seed=0):
    """Every image constant at a value no other image uses, labels random soft values."""
    rng = np.random.default_rng(seed)
    images = np.repeat(np.arange(1.0, n + 1)[:, None, None, None], 3, axis=1)
    images = np.broadcast_to(images, (n, 3, h, w)).copy()
    return AugmentedBatch(images, rng.random(n))


# ---------------------------------------------------------------------------
# lambda sampling


def test_alpha_one_is_uniform():
    rng = batch_rng(3)
    draws = np.array([sample_lambda(1.0, rng) for _ in range(100_000)])
    assert ks_uniform(draws) < 0.01


@pytest.mark.parametrize("alpha", [0.05, 0.2, 1.0, 5.0])
def test_draws_in_unit_interval(alpha):
    rng = batch_rng(1)
    draws = [sample_lambda(alpha, rng) for _ in range(2000)]
    assert min(draws) >= 0.0 and max(draws) <= 1.0


def test_draws_are_seeded():
    a = [sample_lambda(0.2, batch_rng(5, 2)) for _ in range(3)]
    b = [sample_lambda(0.2, batch_rng(5, 2)) for _ in range(3)]
    assert a == b


@pytest.mark.parametrize("alpha", [0.0, -1.0])
def test_bad_alpha(alpha):
    with pytest.raises(RejectedInputError):
        sample_lambda(alpha, batch_rng(0))
    with pytest.raises(RejectedInputError):
        AugmentConfig(mixup_alpha=alpha)


def test_bad_probability():
    with pytest.raises(RejectedInputError):
        AugmentConfig(apply_probability=1.5)


# ---------------------------------------------------------------------------
# pairing


@pytest.mark.parametrize("n", [2, 3, 7, 32])
def test_pairing_is_derangement(n):
    rng = batch_rng(0)
    for _ in range(50):
        p = random_pairing(n, rng)
        assert sorted(p) == list(range(n)) and not np.any(p == np.arange(n))


def test_single_sample_pairs_with_itself():
    assert list(random_pairing(1, batch_rng(0))) == [0]


def test_pairing_must_be_permutation():
    batch = distinct_batch(3)
    with pytest.raises(RejectedInputError):
        mixup(batch, 0.5, [0, 0, 1])
    with pytest.raises(RejectedInputError):
        cutmix(batch, 0.5, [0, 1], boxes=[(0, 1, 0, 1)] * 3)


# ---------------------------------------------------------------------------
# mixup


def test_mixup_identity():
    batch = distinct_batch(4)
    out = mixup(batch, 1.0, [1, 2, 3, 0])
    assert np.array_equal(out.images, batch.images) and np.array_equal(out.labels, batch.labels)


def test_mixup_label_example():
    batch = AugmentedBatch(np.zeros((2, 3, 4, 4)), [1.0, 0.0])
    assert mixup(batch, 0.3, [1, 0]).labels[0] == pytest.approx(0.3, abs=1e-15)


def test_mixup_pixel_example():
    images = np.stack([np.zeros((3, 4, 4)), np.ones((3, 4, 4))])
    out = mixup(AugmentedBatch(images, [0.0, 1.0]), 0.5, [1, 0])
    assert np.all(out.images == 0.5)


@given(st.floats(0, 1), st.integers(2, 9), st.integers(0, 2**31))
def test_mixup_conserves_label_mean(lam, n, seed):
    batch = distinct_batch(n, seed=seed)
    out = mixup(batch, lam, random_pairing(n, batch_rng(seed)))
    assert abs(out.labels.mean() - batch.labels.mean()) < 1e-12


# ---------------------------------------------------------------------------
# cutmix


def test_cutmix_identity_at_lambda_one():
    batch = distinct_batch(4)
    out = cutmix(batch, 1.0, [1, 2, 3, 0], batch_rng(0))
    assert np.array_equal(out.images, batch.images) and np.array_equal(out.labels, batch.labels)
    assert all(p[0].lam == 1.0 for p in out.provenance)


def test_cutmix_forced_box_area():
    images = np.stack([np.zeros((3, 64, 64)), np.ones((3, 64, 64))])
    batch = AugmentedBatch(images, [1.0, 0.0])
    out = cutmix(batch, 0.9375, [1, 0], boxes=[(10, 26, 20, 36), (0, 16, 0, 16)])
    assert out.labels[0] == 0.9375
    assert out.provenance[0][0].lam == 1 - 256 / 4096
    assert out.images[0].sum() == 3 * 256


def test_cutmix_box_side_fraction():
    box = cutmix_box(64, 64, 0.9375, batch_rng(0))
    y0, y1, x0, x1 = box
    assert y1 - y0 <= 16 and x1 - x0 <= 16


def test_cutmix_rejects_box_outside():
    with pytest.raises(RejectedInputError):
        cutmix(distinct_batch(2), 0.5, [1, 0], boxes=[(0, 9, 0, 1), (0, 1, 0, 1)])


@pytest.mark.parametrize("seed", range(25))
def test_pixel_count_oracle(seed):
    rng = batch_rng(seed)
    n = 6
    batch = distinct_batch(n, h=13, w=17, seed=seed)
    lam = float(rng.random())
    out = cutmix(batch, lam, random_pairing(n, rng), rng)
    for i in range(n):
        changed = np.any(out.images[i] != batch.images[i], axis=0).sum()
        lam_eff = out.provenance[i][0].lam
        assert lam_eff == 1.0 - changed / (13 * 17)
        assert 0.0 <= lam_eff <= 1.0


# ---------------------------------------------------------------------------
# pipeline


def test_probability_zero_is_identity():
    batch = distinct_batch(5)
    out = augment_pipeline(batch, AugmentConfig(apply_probability=0.0), batch_rng(0))
    assert np.array_equal(out.images, batch.images) and np.array_equal(out.labels, batch.labels)
    assert all(p == () for p in out.provenance)


def test_probability_one_is_deterministic():
    batch = distinct_batch(8)
    cfg = AugmentConfig(apply_probability=1.0)
    a = augment_pipeline(batch, cfg, batch_rng(4, 1))
    b = augment_pipeline(batch, cfg, batch_rng(4, 1))
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert [r.kind for r in a.provenance[0]] == ["mixup", "cutmix"]


@pytest.mark.parametrize("seed", range(20))
def test_provenance_replay(seed):
    batch = distinct_batch(7, seed=seed)
    out = augment_pipeline(batch, AugmentConfig(1.0, 1.0, 1.0), batch_rng(seed))
    assert np.max(np.abs(replay_labels(batch.labels, out.provenance) - out.labels)) <= 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_convexity(seed):
    rng = np.random.default_rng(seed)
    images = rng.random((6, 3, 9, 9))
    batch = AugmentedBatch(images, rng.random(6))
    for step in ("mixup", "cutmix"):
        lam = float(rng.random())
        pairing = random_pairing(6, rng)
        out = mixup(batch, lam, pairing) if step == "mixup" else cutmix(batch, lam, pairing, rng)
        lo_i = np.minimum(images, images[pairing])
        hi_i = np.maximum(images, images[pairing])
        assert np.all(out.images >= lo_i - 1e-15) and np.all(out.images <= hi_i + 1e-15)
        lo_l = np.minimum(batch.labels, batch.labels[pairing])
        hi_l = np.maximum(batch.labels, batch.labels[pairing])
        assert np.all(out.labels >= lo_l - 1e-15) and np.all(out.labels <= hi_l + 1e-15)


def test_replay_rejects_ragged():
    with pytest.raises(RejectedInputError):
        replay_labels([0.0, 1.0], [(MixRecord("mixup", 1, 0.5),), ()])


def test_batch_rng_streams_differ():
    assert batch_rng(0, 1).random() != batch_rng(0, 2).random()
    assert batch_rng(0, 1).random() == batch_rng(0, 1).random()
