"""Per-modality expert tests: features, intra-modality averaging, training."""

import numpy as np
import pytest

from modalcompose import experts as xp
from modalcompose import numcore as nc
from modalcompose.compose import single_expert_policy
from modalcompose.diffusion import make_schedule
from modalcompose.errors import ConfigError, ContractError, ShapeError
from modalcompose.runconfig import RunConfig
from tests.conftest import constant_action_dataset


def small_cfg(steps=0, n_sub=2, band=False):
    cfg = RunConfig()
    cfg = cfg.with_section("expert", enc_hidden=(16,), enc_out=8,
                           sub_hidden=(32,), n_sub=n_sub, noise_band_split=band)
    return cfg.with_section("train", steps=steps, batch=16, lr=1e-3)


# ---------------------------------------------------------------------------
# timestep features


def test_timestep_features_shape_and_range():
    f = xp.timestep_features(7, 50)
    assert f.shape == (16,)
    assert np.all(np.abs(f) <= 1.0)
    fb = xp.timestep_features(np.array([1, 2, 3]), 50)
    assert fb.shape == (3, 16)
    assert np.array_equal(fb[1], xp.timestep_features(2, 50))


def test_timestep_features_distinct_for_every_step():
    rows = xp.timestep_features(np.arange(1, 51), 50)
    assert len({r.tobytes() for r in rows}) == 50
    # the base-frequency cosine decreases strictly in k
    base_cos = rows[:, 1]
    assert np.all(np.diff(base_cos) < 0)


def test_timestep_features_manual_formula():
    k, K = 13, 50
    t = k / K
    freqs = 50.0 ** (np.arange(8) / 7)
    f = xp.timestep_features(k, K)
    assert np.allclose(f[0::2], np.sin(t * freqs), atol=1e-15)
    assert np.allclose(f[1::2], np.cos(t * freqs), atol=1e-15)


# ---------------------------------------------------------------------------
# wiring, encode, intra composition


def make_expert(rng, n_sub=2, band=False):
    cfg = small_cfg(n_sub=n_sub, band=band)
    return xp.init_expert("vis", 5, 2, 2, cfg, rng)


def test_encode_shape_and_validation(rng):
    ex = make_expert(rng)
    e = xp.encode(ex, rng.normal(size=5), rng.normal(size=2))
    assert e.shape == (8 + 2,)
    assert np.array_equal(e[-2:], e[-2:])  # robot state present at the tail
    with pytest.raises(ShapeError):
        xp.encode(ex, rng.normal(size=4), rng.normal(size=2))
    with pytest.raises(ShapeError):
        xp.encode(ex, rng.normal(size=5), rng.normal(size=3))


def test_encode_appends_robot_state_verbatim(rng):
    ex = make_expert(rng)
    rs = np.array([0.25, -0.75])
    e = xp.encode(ex, rng.normal(size=5), rs)
    assert np.array_equal(e[-2:], rs)


def test_intra_compose_is_mean_of_subpolicies(rng):
    ex = make_expert(rng, n_sub=3)
    e = xp.encode(ex, rng.normal(size=5), rng.normal(size=2))
    a_k = rng.normal(size=2)
    per_sub = [xp.subpolicy_eps(sp, a_k, e, 20) for sp in ex.subs]
    assert np.allclose(xp.intra_compose(ex, a_k, e, 20),
                       np.mean(per_sub, axis=0), atol=1e-15)


def test_subpolicy_eps_validates_k_and_dims(rng):
    ex = make_expert(rng)
    e = xp.encode(ex, rng.normal(size=5), rng.normal(size=2))
    with pytest.raises(ContractError):
        xp.subpolicy_eps(ex.subs[0], np.zeros(2), e, 0)
    with pytest.raises(ContractError):
        xp.subpolicy_eps(ex.subs[0], np.zeros(2), e, 51)
    with pytest.raises(ShapeError):
        xp.subpolicy_eps(ex.subs[0], np.zeros(3), e, 1)


def test_band_split_routes_by_denoising_half(rng):
    ex = make_expert(rng, band=True)
    e = xp.encode(ex, rng.normal(size=5), rng.normal(size=2))
    a_k = rng.normal(size=2)
    # sub 0 owns the coarse half (k > 25), sub 1 the fine half (k <= 25)
    for k, owner in ((50, 0), (26, 0), (25, 1), (1, 1)):
        got = xp.intra_compose(ex, a_k, e, k)
        want = xp.subpolicy_eps(ex.subs[owner], a_k, e, k)
        assert np.array_equal(got, want), f"k={k}"


def test_score_rows_matches_single_calls(rng):
    ex = make_expert(rng)
    m = rng.normal(size=(4, 5))
    rs = rng.normal(size=(4, 2))
    a = rng.normal(size=(4, 2))
    ks = np.array([1, 10, 30, 50])
    emb = ex.encode_rows(m, rs)
    batched = ex.score_rows(a, emb, ks)
    for r in range(4):
        single = xp.intra_compose(ex, a[r], xp.encode(ex, m[r], rs[r]), int(ks[r]))
        assert np.allclose(batched[r], single, atol=1e-12)


def test_expert_param_count(rng):
    ex = make_expert(rng)
    # encoder 5->16->8 plus two sub nets (2+10+16)->32->2
    enc = 5 * 16 + 16 + 16 * 8 + 8
    sub = 28 * 32 + 32 + 32 * 2 + 2
    assert ex.n_params() == enc + 2 * sub
    assert ex.emb_dim == 10


def test_init_expert_deterministic():
    a = make_expert(np.random.default_rng(21))
    b = make_expert(np.random.default_rng(21))
    assert a.checksum() == b.checksum()
    c = make_expert(np.random.default_rng(22))
    assert c.checksum() != a.checksum()


# ---------------------------------------------------------------------------
# training


def test_train_expert_unknown_modality(const_dataset):
    with pytest.raises(ConfigError):
        xp.train_expert(const_dataset, "audio", small_cfg(), np.random.default_rng(0))


def test_train_expert_zero_steps_keeps_init(const_dataset):
    trained = xp.train_expert(const_dataset, "vis", small_cfg(steps=0),
                              np.random.default_rng(5))
    fresh = xp.init_expert("vis", 5, 2, 2, small_cfg(), np.random.default_rng(5))
    assert trained.loss_history == []
    assert trained.checksum() == fresh.checksum()


def test_train_expert_reproducible(const_dataset):
    one = xp.train_expert(const_dataset, "vis", small_cfg(steps=40),
                          np.random.default_rng(9))
    two = xp.train_expert(const_dataset, "vis", small_cfg(steps=40),
                          np.random.default_rng(9))
    assert one.checksum() == two.checksum()
    assert one.loss_history == two.loss_history


def test_train_expert_recovers_constant_action():
    """Sampled actions should center on the dataset's constant action."""
    ds = constant_action_dataset(np.array([0.3, -0.4]))
    cfg = small_cfg(steps=1500).with_section("train", steps=1500, batch=32, lr=2e-3)
    ex = xp.train_expert(ds, "vis", cfg, np.random.default_rng(2))
    assert len(ex.loss_history) == 1500
    assert np.mean(ex.loss_history[-50:]) < np.mean(ex.loss_history[:50])
    policy = single_expert_policy(ex, make_schedule(), ds.stats())
    rng = np.random.default_rng(77)
    obs_rng = np.random.default_rng(3)
    from modalcompose.envs import Observation
    for _ in range(3):
        obs = Observation(modalities={"vis": obs_rng.normal(size=5),
                                      "tac": obs_rng.normal(size=3)},
                          robot_state=obs_rng.normal(size=2))
        mean = np.mean([policy.act(obs, rng) for _ in range(8)], axis=0)
        assert np.allclose(mean, [0.3, -0.4], atol=0.1), mean
