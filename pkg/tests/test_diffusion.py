"""Schedule, forward-noising, sampler, and loss tests."""

import numpy as np
import pytest

from modalcompose import diffusion as df
from modalcompose import numcore as nc
from modalcompose.errors import ConfigError, ContractError, NumericError

# Frozen from an exact-fraction product over the default linear schedule
# (computed independently of numpy's cumprod).
AB_25 = 0.8827129294402375
AB_50 = 0.6029515973297149
BETA_25 = 0.009846938775510204


def test_default_schedule_values():
    s = df.make_schedule()
    assert s.K == 50
    assert s.betas.shape == (50,)
    assert s.betas[0] == 1e-4
    assert s.betas[-1] == 0.02
    steps = np.diff(s.betas)
    assert np.allclose(steps, steps[0])
    assert np.allclose(s.alphas, 1.0 - s.betas)
    assert abs(s.betas[24] - BETA_25) < 1e-15


def test_alpha_bar_matches_exact_fraction_oracle():
    s = df.make_schedule()
    assert abs(s.alpha_bars[24] - AB_25) < 1e-13
    assert abs(s.alpha_bars[-1] - AB_50) < 1e-13
    # spot-check the helper accessors at k=25 (array index 24)
    assert abs(s.sqrt_ab(25) - np.sqrt(AB_25)) < 1e-13
    assert abs(s.sqrt_one_minus_ab(25) - np.sqrt(1.0 - AB_25)) < 1e-13


def test_schedule_validation():
    with pytest.raises(ConfigError):
        df.make_schedule(K=0)
    with pytest.raises(ConfigError):
        df.make_schedule(beta_start=0.0)
    with pytest.raises(ConfigError):
        df.make_schedule(beta_start=0.03, beta_end=0.02)
    with pytest.raises(ConfigError):
        df.make_schedule(beta_end=1.0)


def test_forward_noise_closed_form(rng):
    s = df.make_schedule()
    a0 = rng.normal(size=(4,))
    probe = np.random.default_rng(7)
    a_k, eps = df.forward_noise(a0, 30, s, probe)
    replay = np.random.default_rng(7).standard_normal(4)
    assert np.array_equal(eps, replay)
    expect = np.sqrt(s.alpha_bars[29]) * a0 + np.sqrt(1 - s.alpha_bars[29]) * eps
    assert np.allclose(a_k, expect, atol=1e-15)


def test_forward_noise_batched_per_row_k(rng):
    s = df.make_schedule()
    a0 = rng.normal(size=(3, 2))
    ks = np.array([1, 25, 50])
    a_k, eps = df.forward_noise(a0, ks, s, np.random.default_rng(0))
    for r in range(3):
        i = ks[r] - 1
        expect = np.sqrt(s.alpha_bars[i]) * a0[r] + np.sqrt(1 - s.alpha_bars[i]) * eps[r]
        assert np.allclose(a_k[r], expect, atol=1e-15)


def test_forward_noise_rejects_bad_k(rng):
    s = df.make_schedule()
    a0 = rng.normal(size=(2,))
    for bad in (0, 51, np.array([1, 0])):
        with pytest.raises(ContractError):
            df.forward_noise(a0, bad, s, rng)


def test_effective_eps_inverts_forward(rng):
    s = df.make_schedule()
    a0 = rng.normal(size=(5,))
    a_k, eps = df.forward_noise(a0, 17, s, np.random.default_rng(3))
    back = df.effective_eps(a_k, a0, 17, s)
    assert np.allclose(back, eps, atol=1e-12)


def test_perfect_denoiser_reconstructs_exactly(rng):
    """With the oracle score and no injected noise the sampler lands on a0.

    This holds for any start point, so run it from several random inits.
    """
    s = df.make_schedule()
    a0 = np.array([0.31, -0.62, 0.05])

    def oracle(a, cond, k):
        return df.effective_eps(a, a0, k, s)

    for trial in range(3):
        init = rng.normal(size=3) * (trial + 1)
        out = df.ddpm_sample(oracle, None, s, None, 3, init=init)
        assert np.allclose(out, a0, atol=1e-10)


def test_sampler_clamps_to_unit_box():
    s = df.make_schedule()
    a0 = np.array([1.7, -2.0])

    def oracle(a, cond, k):
        return df.effective_eps(a, a0, k, s)

    out = df.ddpm_sample(oracle, None, s, None, 2, init=np.zeros(2))
    assert np.allclose(out, [1.0, -1.0], atol=1e-10)


def test_sampler_deterministic_given_seed():
    s = df.make_schedule()

    def score(a, cond, k):
        return 0.1 * a

    one = df.ddpm_sample(score, None, s, np.random.default_rng(9), 4)
    two = df.ddpm_sample(score, None, s, np.random.default_rng(9), 4)
    assert np.array_equal(one, two)


def test_sampler_requires_rng_or_init():
    s = df.make_schedule()
    with pytest.raises(ContractError):
        df.ddpm_sample(lambda a, c, k: a, None, s, None, 2)


def test_sampler_flags_nonfinite_scores():
    s = df.make_schedule()

    def bad(a, cond, k):
        return np.full_like(a, np.inf)

    with pytest.raises(NumericError):
        df.ddpm_sample(bad, None, s, None, 2, init=np.zeros(2))


def test_posterior_sigma_modes():
    s = df.make_schedule()
    assert np.array_equal(df.posterior_sigma(s, "beta"), np.sqrt(s.betas))
    tilde = df.posterior_sigma(s, "beta_tilde")
    assert tilde[0] == 0.0
    # independent elementwise recomputation
    for k in range(2, s.K + 1):
        i = k - 1
        expect = np.sqrt((1 - s.alpha_bars[i - 1]) / (1 - s.alpha_bars[i]) * s.betas[i])
        assert abs(tilde[i] - expect) < 1e-15
    assert np.all(tilde <= np.sqrt(s.betas) + 1e-15)
    with pytest.raises(ConfigError):
        df.posterior_sigma(s, "ddim")


def test_denoise_loss_perfect_score_is_zero(rng):
    s = df.make_schedule()
    batch = [(rng.normal(size=2), rng.normal(size=3)) for _ in range(6)]
    a0 = np.stack([a for a, _ in batch])

    def oracle(a_k, cond, ks):
        sab = np.sqrt(s.alpha_bars[ks - 1])[:, None]
        somab = np.sqrt(1 - s.alpha_bars[ks - 1])[:, None]
        return (a_k - sab * a0) / somab

    loss = df.denoise_loss(oracle, batch, s, np.random.default_rng(4))
    assert float(loss.data) < 1e-20


def test_denoise_loss_empty_batch_rejected(rng):
    s = df.make_schedule()
    with pytest.raises(ContractError):
        df.denoise_loss(lambda a, c, k: a, [], s, rng)


def test_fit_denoiser_reduces_loss(rng):
    """A one-matrix linear denoiser trained on a constant dataset improves."""
    s = df.make_schedule()
    ps = nc.ParamSet()
    ps.add("W", np.zeros((2, 2)))

    def score(a_k, cond, ks):
        return nc.matmul(nc.const(a_k), ps["W"])

    a_rows = np.tile([0.5, -0.5], (32, 1))
    cond_rows = np.zeros((32, 1))
    hist = df.fit_denoiser(score, [("lin", ps)], a_rows, cond_rows, s,
                           steps=200, batch=8, lr=1e-2,
                           rng=np.random.default_rng(11))
    assert len(hist) == 200
    assert np.all(np.isfinite(hist))
    assert np.mean(hist[-20:]) < np.mean(hist[:20])


def test_fit_denoiser_rejects_misaligned_rows(rng):
    s = df.make_schedule()
    ps = nc.ParamSet()
    ps.add("W", np.zeros((2, 2)))
    with pytest.raises(ContractError):
        df.fit_denoiser(lambda a, c, k: nc.const(a), [("lin", ps)],
                        np.zeros((3, 2)), np.zeros((2, 1)), s,
                        steps=1, batch=1, lr=1e-3, rng=rng)
