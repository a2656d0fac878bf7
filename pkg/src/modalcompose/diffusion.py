"""DDPM machinery: schedules, forward noising, the eps-MSE loss, sampling.

A score provider is any callable ``(a_k, cond, k) -> eps_hat``. During
training it is called batched (2-D arrays, int array k) and must return a
graph ``Tensor``; at sampling time it is called with single vectors and an
int k and must return a plain ndarray. Denoising step indices k run 1..K;
array index k-1 holds the step-k coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, NumericError


@dataclass(frozen=True)
class NoiseSchedule:
    K: int
    betas: np.ndarray        # (K,) beta_k at index k-1
    alphas: np.ndarray       # 1 - beta
    alpha_bars: np.ndarray   # cumprod of alphas

    def sqrt_ab(self, k) -> np.ndarray | float:
        return np.sqrt(self.alpha_bars[np.asarray(k) - 1])

    def sqrt_one_minus_ab(self, k) -> np.ndarray | float:
        return np.sqrt(1.0 - self.alpha_bars[np.asarray(k) - 1])


def make_schedule(K: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over k = 1..K with exact cumulative products."""
    if K < 1:
        raise ConfigError(f"schedule needs K >= 1, got {K}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, K)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(K=K, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _check_k(k, K: int) -> None:
    karr = np.asarray(k)
    if karr.size == 0 or np.any(karr < 1) or np.any(karr > K):
        raise ContractError(f"denoising index k={k} outside 1..{K}")


def forward_noise(a0: np.ndarray, k, sched: NoiseSchedule, rng: np.random.Generator):
    """Noise clean actions to step k: a^k = sqrt(ab_k) a0 + sqrt(1-ab_k) eps.

    Works on a single vector with int k or a batch (rows) with an int array k.
    Returns (a_k, eps) with eps drawn from rng.
    """
    a0 = np.asarray(a0, dtype=np.float64)
    _check_k(k, sched.K)
    eps = rng.standard_normal(a0.shape)
    if a0.ndim == 2:
        sab = sched.sqrt_ab(k)[:, None]
        somab = sched.sqrt_one_minus_ab(k)[:, None]
    else:
        sab = sched.sqrt_ab(k)
        somab = sched.sqrt_one_minus_ab(k)
    return sab * a0 + somab * eps, eps


def denoise_loss(score, batch, sched: NoiseSchedule, rng: np.random.Generator) -> nc.Tensor:
    """Mean over the batch of ||eps - eps_hat||^2 with k uniform in 1..K.

    ``batch`` is a list of (a0, cond) vector pairs; the provider is called
    once on the stacked arrays and may return a Tensor (training) or ndarray.
    """
    if len(batch) == 0:
        raise ContractError("denoise_loss needs a nonempty batch")
    a0 = np.stack([np.asarray(a, dtype=np.float64) for a, _ in batch])
    cond = np.stack([np.asarray(c, dtype=np.float64) for _, c in batch])
    ks = rng.integers(1, sched.K + 1, size=len(batch))
    a_k, eps = forward_noise(a0, ks, sched, rng)
    eps_hat = score(a_k, cond, ks)
    if not isinstance(eps_hat, nc.Tensor):
        eps_hat = nc.const(eps_hat)
    d = nc.sub(eps_hat, nc.const(eps))
    return nc.scale(nc.sumall(nc.mul(d, d)), 1.0 / len(batch))


def fit_denoiser(score, groups, a_rows: np.ndarray, cond_rows: np.ndarray,
                 sched: NoiseSchedule, *, steps: int, batch: int, lr: float,
                 rng: np.random.Generator) -> list[float]:
    """Minibatch Adam on denoise_loss; returns the per-step loss history.

    ``score`` must record a graph through every ParamSet in ``groups``;
    anything else it touches stays frozen.
    """
    if a_rows.shape[0] != cond_rows.shape[0] or a_rows.shape[0] == 0:
        raise ContractError("training rows empty or misaligned")
    opt = nc.adam_init(groups, lr=lr)
    history = []
    n = a_rows.shape[0]
    for _ in range(steps):
        idx = rng.integers(0, n, size=batch)
        pairs = [(a_rows[i], cond_rows[i]) for i in idx]
        loss = denoise_loss(score, pairs, sched, rng)
        nc.backward(loss, groups)
        nc.adam_step(groups, opt)
        history.append(float(loss.data))
    return history


def posterior_sigma(sched: NoiseSchedule, sigma_mode: str = "beta") -> np.ndarray:
    """Reverse-step noise scale sigma_k at index k-1."""
    if sigma_mode == "beta":
        return np.sqrt(sched.betas)
    if sigma_mode == "beta_tilde":
        # beta~_k = (1 - ab_{k-1}) / (1 - ab_k) * beta_k, with ab_0 = 1
        ab_prev = np.concatenate([[1.0], sched.alpha_bars[:-1]])
        return np.sqrt((1.0 - ab_prev) / (1.0 - sched.alpha_bars) * sched.betas)
    raise ConfigError(f"unknown sigma_mode '{sigma_mode}'")


def ddpm_sample(
    score,
    cond,
    sched: NoiseSchedule,
    rng: np.random.Generator | None,
    dim: int,
    *,
    init: np.ndarray | None = None,
    sigma_mode: str = "beta",
) -> np.ndarray:
    """Ancestral sampling from a^K down to a^0, clamped to [-1, 1].

    rng=None disables both the initial draw (init must then be given) and the
    per-step noise injection z, making the trajectory deterministic.
    """
    sigmas = posterior_sigma(sched, sigma_mode)
    if init is not None:
        a = np.array(init, dtype=np.float64)
    elif rng is not None:
        a = rng.standard_normal(dim)
    else:
        raise ContractError("ddpm_sample needs rng or an explicit init")
    for k in range(sched.K, 0, -1):
        eps_hat = np.asarray(score(a, cond, k), dtype=np.float64)
        i = k - 1
        a = (a - sched.betas[i] / np.sqrt(1.0 - sched.alpha_bars[i]) * eps_hat) \
            / np.sqrt(sched.alphas[i])
        if k > 1 and rng is not None:
            a = a + sigmas[i] * rng.standard_normal(dim)
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite sample state at step k={k}")
    return np.clip(a, -1.0, 1.0)


def effective_eps(a_k: np.ndarray, a0: np.ndarray, k: int, sched: NoiseSchedule) -> np.ndarray:
    """The noise that forward_noise would have to have drawn to map a0 to a_k.

    Feeding this back into the sampler with injection disabled reproduces a0
    exactly; used by tests as a perfect-denoiser oracle.
    """
    i = np.asarray(k) - 1
    return (a_k - np.sqrt(sched.alpha_bars[i]) * a0) / np.sqrt(1.0 - sched.alpha_bars[i])
