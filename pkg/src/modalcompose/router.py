"""The consensus network: maps concatenated modality embeddings to softmax
weights over modalities, plus the hard / top-2 / soft weight post-processing.

Weights depend only on the state embeddings, so they are computed once per
control step and held fixed across that step's denoising loop. Training uses
soft weights throughout; hard/top-2 are evaluation-time transforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .diffusion import fit_denoiser, make_schedule
from .errors import ConfigError, ContractError
from .experts import ModalityExpert, timestep_features

STRATEGIES = ("soft", "hard", "top2")


@dataclass
class Router:
    params: nc.ParamSet
    spec: nc.MlpSpec
    modality_order: tuple[str, ...]
    emb_dims: tuple[int, ...]
    loss_history: list[float] = field(default_factory=list, repr=False)

    @property
    def n_modalities(self) -> int:
        return len(self.modality_order)

    def n_params(self) -> int:
        return self.params.n_params()

    def weights_rows(self, emb_cat: np.ndarray) -> np.ndarray:
        """Batched softmax weights from pre-concatenated embedding rows."""
        logits = nc.mlp_infer(self.params, self.spec, emb_cat)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def check_weights(w: np.ndarray, n: int | None = None) -> np.ndarray:
    """Validate a consensus-weight vector: nonnegative, sums to 1 (1e-12)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or (n is not None and w.shape[0] != n):
        raise ContractError(f"expected {n} weights, got shape {w.shape}")
    if np.any(w < 0.0):
        raise ContractError(f"negative consensus weight in {w}")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ContractError(f"consensus weights sum to {w.sum()!r}, not 1")
    return w


def init_router(modality_order: tuple[str, ...], emb_dims: tuple[int, ...],
                hidden: tuple[int, ...], rng: np.random.Generator) -> Router:
    spec = nc.MlpSpec(int(sum(emb_dims)), tuple(hidden), len(modality_order))
    return Router(params=nc.init_mlp(spec, rng), spec=spec,
                  modality_order=tuple(modality_order), emb_dims=tuple(emb_dims))


def router_weights(router: Router, embeddings: list[np.ndarray]) -> np.ndarray:
    """Consensus weights for one state; embeddings in the recorded order."""
    if len(embeddings) != router.n_modalities:
        raise ContractError(
            f"router expects {router.n_modalities} embeddings, got {len(embeddings)}"
        )
    for e, d, name in zip(embeddings, router.emb_dims, router.modality_order):
        if np.asarray(e).shape != (d,):
            raise ContractError(
                f"embedding for '{name}' has shape {np.asarray(e).shape}, expected ({d},)"
            )
    cat = np.concatenate(embeddings)[None, :]
    return router.weights_rows(cat)[0]


def apply_strategy(w: np.ndarray, strategy: str) -> np.ndarray:
    """Post-process consensus weights; soft is the exact identity.

    hard: one-hot at the argmax (ties broken toward the lowest index).
    top2: keep the two largest (ties toward lower index), renormalize.
    Vectors already in the target form pass through unchanged, which makes
    every strategy idempotent bit-for-bit and makes top2 on N <= 2 identical
    to soft.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown routing strategy '{strategy}'")
    w = check_weights(w)
    if strategy == "soft":
        return w
    if strategy == "hard":
        out = np.zeros_like(w)
        out[int(np.argmax(w))] = 1.0
        return out
    if w.shape[0] <= 2 or np.count_nonzero(w) <= 2:
        return w
    order = np.argsort(-w, kind="stable")
    keep = order[:2]
    out = np.zeros_like(w)
    out[keep] = w[keep] / w[keep].sum()
    return out


def _router_score_graph(router: Router, experts: list[ModalityExpert],
                        a_k: np.ndarray, cond: np.ndarray, ks: np.ndarray,
                        slices: list[slice], joint: bool) -> nc.Tensor:
    """Weighted sum of expert scores with the weights on the graph.

    Expert scores enter as constants unless ``joint`` is set, in which case
    their encoders and sub-policies are recorded too and receive gradients.
    """
    rs = cond[:, slices[-1]]
    embs = []
    scores = []
    for ex, sl in zip(experts, slices[:-1]):
        m_rows = cond[:, sl]
        if joint:
            code = nc.mlp_forward(ex.encoder, ex.encoder_spec, nc.const(m_rows))
            emb = nc.concat_cols([code, nc.const(rs)])
            feats = timestep_features(ks, ex.n_steps)
            x = nc.concat_cols([nc.const(a_k), emb, nc.const(feats)])
            total = None
            for sp in ex.subs:
                out = nc.mlp_forward(sp.params, sp.spec, x)
                total = out if total is None else nc.add(total, out)
            scores.append(nc.scale(total, 1.0 / ex.n_sub))
            embs.append(emb)
        else:
            emb_np = ex.encode_rows(m_rows, rs)
            scores.append(nc.const(ex.score_rows(a_k, emb_np, ks)))
            embs.append(nc.const(emb_np))
    logits = nc.mlp_forward(router.params, router.spec, nc.concat_cols(embs))
    w = nc.softmax_rows(logits)
    total = None
    for i, s in enumerate(scores):
        term = nc.mul(nc.col(w, i), s)
        total = term if total is None else nc.add(total, term)
    return total


def train_router(experts: list[ModalityExpert], dataset, cfg,
                 rng: np.random.Generator) -> Router:
    """Fit consensus weights on frozen experts by the same eps-MSE objective.

    Gradients flow only into the router unless cfg.router.joint is set
    (end-to-end fine-tuning mode, which deliberately updates the experts).
    """
    if not experts:
        raise ContractError("train_router needs at least one expert")
    names = [ex.modality for ex in experts]
    if len(set(names)) != len(names):
        raise ContractError(f"duplicate expert modalities: {names}")
    for ex in experts:
        if ex.modality not in dataset.modality_dims:
            raise ContractError(f"dataset lacks modality '{ex.modality}'")
    mods, rs_rows, a_rows = dataset.training_rows_multi()
    blocks = [mods[ex.modality] for ex in experts] + [rs_rows]
    cond_rows = np.concatenate(blocks, axis=1)
    slices, off = [], 0
    for b in blocks:
        slices.append(slice(off, off + b.shape[1]))
        off += b.shape[1]
    router = init_router(tuple(names), tuple(ex.emb_dim for ex in experts),
                         tuple(cfg.router.hidden), rng)
    sched = make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start,
                          cfg.diffusion.beta_end)
    groups = [("router", router.params)]
    if cfg.router.joint:
        for ex in experts:
            groups += [(f"{ex.modality}.{label}", ps) for label, ps in ex.param_groups()]
    score = lambda ak, c, ks: _router_score_graph(
        router, experts, ak, c, ks, slices, cfg.router.joint)
    router.loss_history = fit_denoiser(
        score, groups, a_rows, cond_rows, sched,
        steps=cfg.train.router_steps, batch=cfg.train.batch, lr=cfg.train.lr,
        rng=rng)
    return router
