"""Episode drivers shared by evaluation, robustness scenarios, and probes.

Seeding convention: within one evaluation run identified by `eval_seed`,
episode `ep` resets from stream(eval_seed, TAG_EVAL, ep) and the action at
step t draws from stream(eval_seed, TAG_ACT, ep, t).  Any code that recreates
these streams replays the exact same episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import EnvSpec, EnvState, Observation, env_reset, env_step, _in_box
from .errors import ContractError
from .rngstream import TAG_ACT, TAG_EVAL, stream


@dataclass
class RolloutRecord:
    """Full trace of one driven episode."""

    success: bool
    steps: int
    observations: list[Observation] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    positions: list[np.ndarray] = field(default_factory=list)
    in_box: list[bool] = field(default_factory=list)
    in_contact: list[bool] = field(default_factory=list)


def run_policy_episode(policy, spec: EnvSpec, eval_seed: int, ep: int,
                       obs_filter=None) -> RolloutRecord:
    """Roll one episode; obs_filter may rewrite the observation the policy sees.

    obs_filter(obs, state, t) -> Observation. The unfiltered observation is
    what the environment produced; only the policy's view is altered.
    """
    state, obs = env_reset(spec, stream(eval_seed, TAG_EVAL, ep))
    rec = RolloutRecord(success=False, steps=0)
    while not state.done:
        seen = obs if obs_filter is None else obs_filter(obs, state, state.t)
        rec.observations.append(seen)
        rec.positions.append(state.p.copy())
        rec.in_box.append(_in_box(spec, state.p))
        rec.in_contact.append(bool(obs.modalities[_contact_modality(spec)][0] == 1.0))
        action = policy.act(seen, stream(eval_seed, TAG_ACT, ep, state.t))
        rec.actions.append(action)
        state, obs, _, _ = env_step(state, action[: spec.action_dim])
    rec.success = bool(state.success)
    rec.steps = state.t
    return rec


def _contact_modality(spec: EnvSpec) -> str:
    return "tac" if "tac" in spec.modality_dims() else next(iter(spec.modality_dims()))


def evaluate_policy(policy, spec: EnvSpec, eval_seed: int, n_episodes: int,
                    obs_filter=None) -> tuple[float, float]:
    """Success rate and mean steps over n episodes (failures count t at done)."""
    if n_episodes <= 0:
        raise ContractError("n_episodes must be positive")
    wins = 0
    steps = []
    for ep in range(n_episodes):
        rec = run_policy_episode(policy, spec, eval_seed, ep, obs_filter=obs_filter)
        wins += rec.success
        steps.append(rec.steps)
    return wins / n_episodes, float(np.mean(steps))
