"""Shared test setup: single-threaded BLAS before numpy loads, tiny-dataset
builders, and timing helpers."""

import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

from modalcompose.envs import ActionStats, Dataset, Episode

# verdict lines recorded by the acceptance gate; printed as a terminal
# summary section so they survive output capture
GATE_LINES = []


def record_gate(line: str) -> None:
    GATE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance gate")
        for line in GATE_LINES:
            terminalreporter.line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def constant_action_dataset(action, n_rows=96, modality_dims=None, robot_dim=2,
                            seed=7):
    """Dataset whose every row has the same action; observations vary."""
    action = np.asarray(action, dtype=np.float64)
    modality_dims = modality_dims or {"vis": 5, "tac": 3}
    g = np.random.default_rng(seed)
    per_ep = 8
    episodes = []
    for _ in range(n_rows // per_ep):
        mods = {m: g.normal(0.0, 0.5, size=(per_ep, d))
                for m, d in modality_dims.items()}
        robot = g.normal(0.0, 0.5, size=(per_ep, robot_dim))
        actions = np.tile(action, (per_ep, 1))
        episodes.append(Episode(mods, robot, actions))
    return Dataset(env_name="synthetic", modality_dims=dict(modality_dims),
                   robot_dim=robot_dim, action_dim=action.size, horizon=1,
                   episodes=episodes, act_min=action.copy(), act_max=action.copy())


@pytest.fixture
def const_dataset():
    return constant_action_dataset([0.3, -0.4])
