"""Modality-importance probing, sensor corruption, and robustness scenarios.

Importance of a modality at a step is the normalized L2 distance between the
action the policy would have taken with that modality perturbed and the action
it actually took, with the same sampling randomness for both. Probing never
drives the environment with a perturbed action.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .envs import (EnvSpec, Observation, env_reset, env_step, observe,
                   teleport_target, _in_box)
from .errors import ConfigError, ContractError
from .rngstream import TAG_ACT, TAG_EVAL, TAG_PROBE, TAG_SCENARIO, stream
from .runconfig import ProbeConfig

CORRUPTION_KINDS = ("zero", "freeze", "gaussian")
SCENARIO_KINDS = ("runtime_perturbation", "repositioning", "corruption")
ONSETS = ("start", "occlusion_entry")


class CorruptionMode:
    """One corruption applied to a named modality.

    kind: zero | freeze | gaussian. Freeze holds the modality at its value
    from the first corrupted step, so the mode carries per-episode state;
    call begin_episode() before reuse.
    """

    def __init__(self, kind: str, modality: str, sigma_c: float = 0.0):
        if kind not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption kind {kind!r}")
        if kind == "gaussian" and sigma_c < 0:
            raise ConfigError("gaussian corruption needs sigma_c >= 0")
        self.kind = kind
        self.modality = modality
        self.sigma_c = float(sigma_c)
        self._held = None

    def begin_episode(self) -> None:
        self._held = None

    def __repr__(self):
        extra = f", sigma_c={self.sigma_c}" if self.kind == "gaussian" else ""
        return f"CorruptionMode({self.kind!r}, {self.modality!r}{extra})"


def corrupt_modality(obs: Observation, mode: CorruptionMode, rng=None) -> Observation:
    """Return a copy of obs with one modality corrupted.

    Gaussian corruption draws from rng; zero and freeze ignore it. Zero is
    idempotent. Freeze returns the vector captured on the mode's first call
    since begin_episode().
    """
    if mode.modality not in obs.modalities:
        raise ContractError(f"modality {mode.modality!r} not in observation")
    out = obs.copy()
    vec = out.modalities[mode.modality]
    if mode.kind == "zero":
        out.modalities[mode.modality] = np.zeros_like(vec)
    elif mode.kind == "freeze":
        if mode._held is None:
            mode._held = vec.copy()
        out.modalities[mode.modality] = mode._held.copy()
    else:
        if mode.sigma_c > 0.0:
            if rng is None:
                raise ContractError("gaussian corruption requires an rng")
            out.modalities[mode.modality] = vec + rng.normal(0.0, mode.sigma_c, size=vec.shape)
    return out


@dataclass(frozen=True)
class ScenarioSpec:
    """A robustness scenario.

    runtime_perturbation: at step step_star the target teleports to a fresh
    draw from the reset distribution. repositioning: the target alone is
    re-drawn at reset, so eval placements differ from the seeded baseline.
    corruption: the given CorruptionMode is applied to every observation the
    policy sees, starting immediately or at first occlusion-region entry.
    """

    kind: str
    step_star: int = 0
    corruption: CorruptionMode | None = None
    onset: str = "start"

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.onset not in ONSETS:
            raise ConfigError(f"unknown corruption onset {self.onset!r}")
        if self.kind == "corruption" and self.corruption is None:
            raise ConfigError("corruption scenario needs a CorruptionMode")
        if self.kind == "runtime_perturbation" and self.step_star < 0:
            raise ConfigError("step_star must be >= 0")


def _scenario_episode(policy, spec: EnvSpec, scenario: ScenarioSpec | None,
                      eval_seed: int, ep: int) -> tuple[bool, int]:
    state, obs = env_reset(spec, stream(eval_seed, TAG_EVAL, ep))
    if scenario is not None and scenario.kind == "repositioning":
        state = teleport_target(state, stream(eval_seed, TAG_SCENARIO, ep))
        obs = None
    if scenario is not None and scenario.kind == "corruption":
        scenario.corruption.begin_episode()
    entered = False
    perturbed = False
    while not state.done:
        if obs is None:
            obs = observe(state)
        entered = entered or _in_box(spec, state.p)
        if scenario is not None:
            if (scenario.kind == "runtime_perturbation" and not perturbed
                    and state.t >= scenario.step_star):
                state = teleport_target(state, stream(eval_seed, TAG_SCENARIO, ep))
                perturbed = True
                obs = None
                continue
            if scenario.kind == "corruption" and (scenario.onset == "start" or entered):
                seen = corrupt_modality(obs, scenario.corruption,
                                        stream(eval_seed, TAG_SCENARIO, ep, state.t))
            else:
                seen = obs
        else:
            seen = obs
        action = policy.act(seen, stream(eval_seed, TAG_ACT, ep, state.t))
        state, obs, _, _ = env_step(state, action[: spec.action_dim])
    return bool(state.success), state.t


def robustness_eval(policy, spec: EnvSpec, scenario: ScenarioSpec | None,
                    n_episodes: int, seed: int) -> tuple[float, float]:
    """Success rate and mean completion steps under a scenario.

    Failed episodes contribute T_max steps to the mean (timeout convention).
    scenario=None gives the uncorrupted paired baseline.
    """
    if n_episodes <= 0:
        raise ContractError("n_episodes must be positive")
    wins = 0
    steps = []
    for ep in range(n_episodes):
        success, t = _scenario_episode(policy, spec, scenario, seed, ep)
        wins += success
        steps.append(t if success else spec.t_max)
    return wins / n_episodes, float(np.mean(steps))


@dataclass
class ImportanceTrace:
    """Per-modality importance series over one driven episode."""

    modalities: tuple[str, ...]
    sigmas: dict[str, np.ndarray]
    raw: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    success: bool
    steps: int
    in_box: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    in_contact: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def rows(self):
        for t in range(self.steps):
            for m in self.modalities:
                yield t, m, float(self.raw[m][t]), float(self.ema[m][t])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "modality", "raw_importance", "ema_importance"])
            for row in self.rows():
                w.writerow([row[0], row[1], f"{row[2]:.10g}", f"{row[3]:.10g}"])


def _ema(raw: np.ndarray, alpha: float) -> np.ndarray:
    out = np.empty_like(raw)
    if raw.size == 0:
        return out
    out[0] = raw[0]
    for t in range(1, raw.size):
        out[t] = alpha * raw[t] + (1.0 - alpha) * out[t - 1]
    return out


def perturb_importance(policy, spec: EnvSpec, episode_seed: int,
                       cfg: ProbeConfig, sigmas: dict[str, np.ndarray],
                       episode: int = 0) -> ImportanceTrace:
    """Roll one unperturbed episode, probing modality importance at each step.

    At step t and modality i, the action is recomputed with m_i + delta,
    delta ~ N(0, sigma_i^2), under the same sampling stream the driving action
    used; importance is ||a_pert - a_orig|| / (||a_orig|| + 1e-8), averaged
    over cfg.draws, then EMA-smoothed with cfg.ema_alpha. sigmas are
    per-coordinate scales, conventionally cfg.sigma_scale x training std.
    """
    dims = spec.modality_dims()
    probed = cfg.modalities if cfg.modalities else tuple(dims)
    for m in probed:
        if m not in dims:
            raise ConfigError(f"unknown modality {m!r} in probe config")
        if m not in sigmas:
            raise ContractError(f"no sigma provided for modality {m!r}")
    state, obs = env_reset(spec, stream(episode_seed, TAG_EVAL, episode))
    raw = {m: [] for m in probed}
    in_box, in_contact, positions = [], [], []
    contact_mod = "tac" if "tac" in dims else None
    while not state.done:
        t = state.t
        in_box.append(_in_box(spec, state.p))
        in_contact.append(bool(contact_mod and obs.modalities[contact_mod][0] == 1.0))
        positions.append(state.p.copy())
        a_orig = policy.act(obs, stream(episode_seed, TAG_ACT, episode, t))
        denom = float(np.linalg.norm(a_orig)) + 1e-8
        for idx, m in enumerate(probed):
            vals = []
            for d in range(cfg.draws):
                delta = stream(episode_seed, TAG_PROBE, episode, t, idx, d).normal(
                    0.0, 1.0, size=dims[m]) * np.asarray(sigmas[m], dtype=np.float64)
                pert = obs.copy()
                pert.modalities[m] = pert.modalities[m] + delta
                a_pert = policy.act(pert, stream(episode_seed, TAG_ACT, episode, t))
                vals.append(float(np.linalg.norm(a_pert - a_orig)) / denom)
            raw[m].append(float(np.mean(vals)))
        state, obs, _, _ = env_step(state, a_orig[: spec.action_dim])
    raw_arr = {m: np.asarray(v) for m, v in raw.items()}
    return ImportanceTrace(
        modalities=tuple(probed),
        sigmas={m: np.asarray(sigmas[m], dtype=np.float64) for m in probed},
        raw=raw_arr,
        ema={m: _ema(v, cfg.ema_alpha) for m, v in raw_arr.items()},
        success=bool(state.success),
        steps=state.t,
        in_box=np.asarray(in_box, dtype=bool),
        in_contact=np.asarray(in_contact, dtype=bool),
        positions=np.asarray(positions),
    )


def probe_sigmas(dataset, scale: float) -> dict[str, np.ndarray]:
    """Per-modality probe scales: scale x per-coordinate training std."""
    return {m: scale * s for m, s in dataset.modality_stds().items()}
