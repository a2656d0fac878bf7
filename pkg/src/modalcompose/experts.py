"""Per-modality experts: encoder, noise-prediction sub-policies, and their
within-modality score averaging.

Each expert owns one encoder MLP and ``n_sub`` sub-policy MLPs. A sub-policy
maps [noised_action, embedding, timestep features] to predicted noise; the
expert's score is the arithmetic mean of its sub-policies (or, with the
band-split option, the single sub-policy responsible for the current
denoising band). Embedding = encoder(modality reading) concatenated with
robot state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .diffusion import fit_denoiser, make_schedule
from .errors import ConfigError, ContractError, ShapeError

TIMESTEP_DIM = 16
_N_FREQ = TIMESTEP_DIM // 2


def timestep_features(k, n_steps: int) -> np.ndarray:
    """Sinusoidal features of the denoising index.

    8 geometric frequencies spanning 1..n_steps applied to t = k/n_steps;
    the f=1 cosine is strictly monotone on (0, 1], so distinct k never
    collide. Accepts an int (returns (16,)) or an int array (returns (B,16)).
    """
    karr = np.asarray(k, dtype=np.float64)
    t = karr / n_steps
    if n_steps > 1:
        freqs = float(n_steps) ** (np.arange(_N_FREQ) / (_N_FREQ - 1))
    else:
        freqs = np.ones(_N_FREQ)
    angles = t[..., None] * freqs
    out = np.empty(t.shape + (TIMESTEP_DIM,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


@dataclass
class SubPolicy:
    """One noise-prediction MLP over [a_k, embedding, timestep features]."""

    params: nc.ParamSet
    spec: nc.MlpSpec
    n_steps: int

    def n_params(self) -> int:
        return self.params.n_params()


@dataclass
class ModalityExpert:
    modality: str
    modality_dim: int
    robot_dim: int
    action_dim: int
    encoder: nc.ParamSet
    encoder_spec: nc.MlpSpec
    subs: list[SubPolicy]
    n_steps: int
    noise_band_split: bool = False
    loss_history: list[float] = field(default_factory=list, repr=False)

    @property
    def n_sub(self) -> int:
        return len(self.subs)

    @property
    def emb_dim(self) -> int:
        return self.encoder_spec.output_dim + self.robot_dim

    def n_params(self) -> int:
        return self.encoder.n_params() + sum(sp.n_params() for sp in self.subs)

    def param_groups(self) -> list[tuple[str, nc.ParamSet]]:
        groups = [("enc", self.encoder)]
        groups += [(f"sub{j}", sp.params) for j, sp in enumerate(self.subs)]
        return groups

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for label, ps in self.param_groups():
            h.update(label.encode())
            h.update(ps.checksum().encode())
        return h.hexdigest()

    # -- frozen (numpy) paths used by sampling, routing, and analysis --

    def encode_rows(self, m_rows: np.ndarray, rs_rows: np.ndarray) -> np.ndarray:
        code = nc.mlp_infer(self.encoder, self.encoder_spec, m_rows)
        return np.concatenate([code, rs_rows], axis=1)

    def score_rows(self, a_rows: np.ndarray, emb_rows: np.ndarray, ks) -> np.ndarray:
        """Batched intra-composed score; ks is an int or an int array."""
        ks = np.broadcast_to(np.asarray(ks), (a_rows.shape[0],))
        feats = timestep_features(ks, self.n_steps)
        x = np.concatenate([a_rows, emb_rows, feats], axis=1)
        if self.noise_band_split:
            out = np.zeros((a_rows.shape[0], self.action_dim))
            for j, sp in enumerate(self.subs):
                mask = _band_mask(ks, self.n_steps, j, self.n_sub)
                if mask.any():
                    out[mask] = nc.mlp_infer(sp.params, sp.spec, x[mask])
            return out
        acc = nc.mlp_infer(self.subs[0].params, self.subs[0].spec, x)
        for sp in self.subs[1:]:
            acc = acc + nc.mlp_infer(sp.params, sp.spec, x)
        return acc / self.n_sub


def _band_mask(ks: np.ndarray, n_steps: int, j: int, n_sub: int) -> np.ndarray:
    """Which rows of ks fall in sub-policy j's denoising band.

    Band 0 owns the coarse half k > n_steps/2, the last band owns the rest;
    with more than two subs the range splits evenly, highest k first.
    """
    edges = np.linspace(0, n_steps, n_sub + 1)
    lo, hi = edges[n_sub - 1 - j], edges[n_sub - j]
    return (ks > lo) & (ks <= hi)


def encode(expert: ModalityExpert, m: np.ndarray, robot_state: np.ndarray) -> np.ndarray:
    """Embed one modality reading: encoder output followed by robot state."""
    m = np.asarray(m, dtype=np.float64)
    robot_state = np.asarray(robot_state, dtype=np.float64)
    if m.shape != (expert.modality_dim,):
        raise ShapeError(
            f"modality '{expert.modality}' expects dim {expert.modality_dim}, got {m.shape}"
        )
    if robot_state.shape != (expert.robot_dim,):
        raise ShapeError(f"robot state dim {robot_state.shape} != {expert.robot_dim}")
    return expert.encode_rows(m[None, :], robot_state[None, :])[0]


def subpolicy_eps(sp: SubPolicy, a_k: np.ndarray, e: np.ndarray, k: int) -> np.ndarray:
    """Single sub-policy noise prediction for one (a_k, embedding, k)."""
    if not 1 <= k <= sp.n_steps:
        raise ContractError(f"k={k} outside 1..{sp.n_steps}")
    x = np.concatenate([a_k, e, timestep_features(k, sp.n_steps)])
    if x.shape[0] != sp.spec.input_dim:
        raise ShapeError(
            f"sub-policy input dim {x.shape[0]} != expected {sp.spec.input_dim}"
        )
    return nc.mlp_infer(sp.params, sp.spec, x[None, :])[0]


def intra_compose(expert: ModalityExpert, a_k: np.ndarray, e: np.ndarray, k: int) -> np.ndarray:
    """Mean of the expert's sub-policy scores (band-active one if split)."""
    if expert.noise_band_split:
        ks = np.asarray([k])
        for j, sp in enumerate(expert.subs):
            if _band_mask(ks, expert.n_steps, j, expert.n_sub)[0]:
                return subpolicy_eps(sp, a_k, e, k)
        raise ContractError(f"k={k} falls in no denoising band")
    acc = subpolicy_eps(expert.subs[0], a_k, e, k)
    for sp in expert.subs[1:]:
        acc = acc + subpolicy_eps(sp, a_k, e, k)
    return acc / expert.n_sub


def init_expert(modality: str, modality_dim: int, robot_dim: int, action_dim: int,
                cfg, rng: np.random.Generator) -> ModalityExpert:
    """Fresh expert with random encoder/sub-policy weights from cfg shapes."""
    ex = cfg.expert
    enc_spec = nc.MlpSpec(modality_dim, tuple(ex.enc_hidden), ex.enc_out,
                          activation=ex.activation)
    encoder = nc.init_mlp(enc_spec, rng)
    emb_dim = ex.enc_out + robot_dim
    sub_spec = nc.MlpSpec(action_dim + emb_dim + TIMESTEP_DIM,
                          tuple(ex.sub_hidden), action_dim,
                          activation=ex.activation)
    subs = [SubPolicy(nc.init_mlp(sub_spec, rng), sub_spec, cfg.diffusion.steps)
            for _ in range(ex.n_sub)]
    return ModalityExpert(
        modality=modality, modality_dim=modality_dim, robot_dim=robot_dim,
        action_dim=action_dim, encoder=encoder, encoder_spec=enc_spec,
        subs=subs, n_steps=cfg.diffusion.steps,
        noise_band_split=ex.noise_band_split,
    )


def _expert_score_graph(expert: ModalityExpert, a_k: np.ndarray,
                        cond: np.ndarray, ks: np.ndarray) -> nc.Tensor:
    """Training-time score: graph-recorded encoder + sub-policies.

    cond rows are [raw modality reading, robot state]; gradients flow into
    the encoder and every sub-policy active for each row.
    """
    m_rows = cond[:, :expert.modality_dim]
    rs_rows = cond[:, expert.modality_dim:]
    code = nc.mlp_forward(expert.encoder, expert.encoder_spec, nc.const(m_rows))
    emb = nc.concat_cols([code, nc.const(rs_rows)])
    feats = timestep_features(ks, expert.n_steps)
    x = nc.concat_cols([nc.const(a_k), emb, nc.const(feats)])
    if expert.noise_band_split:
        total = None
        for j, sp in enumerate(expert.subs):
            mask = _band_mask(ks, expert.n_steps, j, expert.n_sub)
            term = nc.mul(nc.mlp_forward(sp.params, sp.spec, x),
                          nc.const(mask[:, None].astype(np.float64)))
            total = term if total is None else nc.add(total, term)
        return total
    total = None
    for sp in expert.subs:
        out = nc.mlp_forward(sp.params, sp.spec, x)
        total = out if total is None else nc.add(total, out)
    return nc.scale(total, 1.0 / expert.n_sub)


def train_expert(dataset, modality: str, cfg, rng: np.random.Generator) -> ModalityExpert:
    """Fit one modality's expert on the dataset by the eps-MSE objective.

    The encoder and all sub-policies train jointly; only the named modality's
    stream and the robot state are ever read. Deterministic given rng.
    """
    if modality not in dataset.modality_dims:
        raise ConfigError(
            f"dataset has modalities {list(dataset.modality_dims)}, not '{modality}'"
        )
    m_rows, rs_rows, a_rows = dataset.training_rows(modality)
    expert = init_expert(modality, dataset.modality_dims[modality],
                         dataset.robot_dim, a_rows.shape[1], cfg, rng)
    sched = make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start,
                          cfg.diffusion.beta_end)
    cond_rows = np.concatenate([m_rows, rs_rows], axis=1)
    score = lambda ak, c, ks: _expert_score_graph(expert, ak, c, ks)
    expert.loss_history = fit_denoiser(
        score, expert.param_groups(), a_rows, cond_rows, sched,
        steps=cfg.train.steps, batch=cfg.train.batch, lr=cfg.train.lr, rng=rng)
    return expert
