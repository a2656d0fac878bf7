"""Policy-level composition and the fusion baselines.

The composed policy runs one denoising loop whose score is the consensus-
weighted sum of per-expert scores; weights come from a router or a fixed
vector and are post-processed by a routing strategy. The baselines fuse at
the feature level instead: one score network conditioned on concatenated
embeddings (ConcatPolicy) or on a gated weighted sum of embeddings
(MoEFeaturePolicy).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .diffusion import NoiseSchedule, ddpm_sample, fit_denoiser, make_schedule
from .envs import ActionStats, Observation
from .errors import ConfigError, ContractError
from .experts import ModalityExpert, encode, intra_compose, timestep_features
from .router import Router, apply_strategy, check_weights, router_weights


def _expert_embeddings(experts: list[ModalityExpert], obs: Observation) -> list[np.ndarray]:
    embs = []
    for ex in experts:
        if ex.modality not in obs.modalities:
            raise ContractError(f"observation lacks modality '{ex.modality}'")
        embs.append(encode(ex, obs.modalities[ex.modality], obs.robot_state))
    return embs


def inter_compose(experts: list[ModalityExpert], w: np.ndarray, a_k: np.ndarray,
                  obs: Observation, k: int) -> np.ndarray:
    """Consensus-weighted sum of intra-composed expert scores.

    Zero-weight experts are skipped entirely, so a one-hot w reproduces the
    selected expert's score bit-for-bit.
    """
    w = check_weights(w, len(experts))
    embs = _expert_embeddings(experts, obs)
    total = None
    for wi, ex, e in zip(w, experts, embs):
        if wi == 0.0:
            continue
        term = wi * intra_compose(ex, a_k, e, k)
        total = term if total is None else total + term
    return total


@dataclass
class ComposedPolicy:
    experts: list[ModalityExpert]
    sched: NoiseSchedule
    stats: ActionStats
    router: Router | None = None
    fixed_w: np.ndarray | None = None
    strategy: str = "soft"
    sigma_mode: str = "beta"

    @property
    def modality_order(self) -> tuple[str, ...]:
        return tuple(ex.modality for ex in self.experts)

    def n_params(self) -> int:
        total = sum(ex.n_params() for ex in self.experts)
        if self.router is not None:
            total += self.router.n_params()
        return total

    def weights_for(self, obs: Observation) -> np.ndarray:
        """Post-strategy consensus weights at this state."""
        if self.router is not None:
            embs = _expert_embeddings(self.experts, obs)
            w = router_weights(self.router, embs)
        else:
            w = self.fixed_w
        return apply_strategy(w, self.strategy)

    def act(self, obs: Observation, rng: np.random.Generator) -> np.ndarray:
        """One denoised, denormalized action chunk for this observation."""
        embs = _expert_embeddings(self.experts, obs)
        if self.router is not None:
            w = router_weights(self.router, embs)
        else:
            w = self.fixed_w
        w = apply_strategy(w, self.strategy)
        active = [(wi, ex, e) for wi, ex, e in zip(w, self.experts, embs) if wi != 0.0]

        def score(a_k, _cond, k):
            total = None
            for wi, ex, e in active:
                term = wi * ex.score_rows(a_k[None, :], e[None, :], k)[0]
                total = term if total is None else total + term
            return total

        a_hat = ddpm_sample(score, None, self.sched, rng, self.stats.chunk_dim,
                            sigma_mode=self.sigma_mode)
        return self.stats.denormalize_chunk(a_hat)


def compose_policy(experts: list[ModalityExpert], router: Router, strategy: str,
                   sched: NoiseSchedule, stats: ActionStats,
                   sigma_mode: str = "beta") -> ComposedPolicy:
    """Router-weighted composition of trained experts."""
    order = tuple(ex.modality for ex in experts)
    if router.modality_order != order:
        raise ContractError(
            f"router order {router.modality_order} != expert order {order}"
        )
    for ex in experts:
        if ex.action_dim != stats.chunk_dim:
            raise ContractError(
                f"expert '{ex.modality}' action dim {ex.action_dim} != {stats.chunk_dim}"
            )
    return ComposedPolicy(experts=experts, sched=sched, stats=stats,
                          router=router, strategy=strategy, sigma_mode=sigma_mode)


def manual_compose(experts: list[ModalityExpert], fixed_weights, sched: NoiseSchedule,
                   stats: ActionStats, sigma_mode: str = "beta") -> ComposedPolicy:
    """Fixed-weight composition, e.g. (0.5, 0.5) over independently trained
    experts; weights are renormalized to sum 1 with a warning if needed."""
    w = np.asarray(fixed_weights, dtype=np.float64)
    if w.shape != (len(experts),):
        raise ContractError(f"{len(experts)} experts but weight shape {w.shape}")
    if np.any(w < 0.0):
        raise ContractError(f"negative manual weight in {w}")
    s = w.sum()
    if s <= 0.0:
        raise ContractError("manual weights must not be all zero")
    if abs(s - 1.0) > 1e-12:
        warnings.warn(f"manual weights sum to {s}; renormalizing")
        w = w / s
    return ComposedPolicy(experts=experts, sched=sched, stats=stats,
                          fixed_w=w, strategy="soft", sigma_mode=sigma_mode)


def single_expert_policy(expert: ModalityExpert, sched: NoiseSchedule,
                         stats: ActionStats, sigma_mode: str = "beta") -> ComposedPolicy:
    return manual_compose([expert], [1.0], sched, stats, sigma_mode)


# ---------------------------------------------------------------------------
# feature-fusion baselines


@dataclass
class _EncoderBank:
    """Per-modality encoders shared by both baselines."""

    modality_order: tuple[str, ...]
    modality_dims: tuple[int, ...]
    robot_dim: int
    encoders: list[tuple[nc.ParamSet, nc.MlpSpec]]

    def emb_dims(self) -> tuple[int, ...]:
        return tuple(spec.output_dim + self.robot_dim for _, spec in self.encoders)

    def encode_obs(self, obs: Observation) -> list[np.ndarray]:
        embs = []
        for name, dim, (params, spec) in zip(self.modality_order, self.modality_dims,
                                             self.encoders):
            if name not in obs.modalities:
                raise ContractError(f"observation lacks modality '{name}'")
            m = obs.modalities[name]
            code = nc.mlp_infer(params, spec, np.asarray(m, dtype=np.float64)[None, :])[0]
            embs.append(np.concatenate([code, obs.robot_state]))
        return embs

    def encode_rows_graph(self, cond: np.ndarray, slices: list[slice]) -> list[nc.Tensor]:
        rs = cond[:, slices[-1]]
        embs = []
        for (params, spec), sl in zip(self.encoders, slices[:-1]):
            code = nc.mlp_forward(params, spec, nc.const(cond[:, sl]))
            embs.append(nc.concat_cols([code, nc.const(rs)]))
        return embs

    def n_params(self) -> int:
        return sum(p.n_params() for p, _ in self.encoders)

    def param_groups(self) -> list[tuple[str, nc.ParamSet]]:
        return [(f"enc_{name}", p) for name, (p, _) in
                zip(self.modality_order, self.encoders)]


@dataclass
class ConcatPolicy:
    bank: _EncoderBank
    score_params: nc.ParamSet
    score_spec: nc.MlpSpec
    sched: NoiseSchedule
    stats: ActionStats
    sigma_mode: str = "beta"
    loss_history: list[float] = field(default_factory=list, repr=False)

    @property
    def modality_order(self) -> tuple[str, ...]:
        return self.bank.modality_order

    def n_params(self) -> int:
        return self.bank.n_params() + self.score_params.n_params()

    def param_groups(self) -> list[tuple[str, nc.ParamSet]]:
        return self.bank.param_groups() + [("score", self.score_params)]

    def act(self, obs: Observation, rng: np.random.Generator) -> np.ndarray:
        cond = np.concatenate(self.bank.encode_obs(obs))

        def score(a_k, _c, k):
            x = np.concatenate([a_k, cond, timestep_features(k, self.sched.K)])
            return nc.mlp_infer(self.score_params, self.score_spec, x[None, :])[0]

        a_hat = ddpm_sample(score, None, self.sched, rng, self.stats.chunk_dim,
                            sigma_mode=self.sigma_mode)
        return self.stats.denormalize_chunk(a_hat)


@dataclass
class MoEFeaturePolicy:
    bank: _EncoderBank
    gate_params: nc.ParamSet
    gate_spec: nc.MlpSpec
    score_params: nc.ParamSet
    score_spec: nc.MlpSpec
    sched: NoiseSchedule
    stats: ActionStats
    sigma_mode: str = "beta"
    loss_history: list[float] = field(default_factory=list, repr=False)

    @property
    def modality_order(self) -> tuple[str, ...]:
        return self.bank.modality_order

    def n_params(self) -> int:
        return (self.bank.n_params() + self.gate_params.n_params()
                + self.score_params.n_params())

    def param_groups(self) -> list[tuple[str, nc.ParamSet]]:
        return (self.bank.param_groups()
                + [("gate", self.gate_params), ("score", self.score_params)])

    def gate_weights(self, embs: list[np.ndarray]) -> np.ndarray:
        logits = nc.mlp_infer(self.gate_params, self.gate_spec,
                              np.concatenate(embs)[None, :])[0]
        z = logits - logits.max()
        e = np.exp(z)
        return e / e.sum()

    def act(self, obs: Observation, rng: np.random.Generator) -> np.ndarray:
        embs = self.bank.encode_obs(obs)
        g = self.gate_weights(embs)
        cond = sum(gi * e for gi, e in zip(g, embs))

        def score(a_k, _c, k):
            x = np.concatenate([a_k, cond, timestep_features(k, self.sched.K)])
            return nc.mlp_infer(self.score_params, self.score_spec, x[None, :])[0]

        a_hat = ddpm_sample(score, None, self.sched, rng, self.stats.chunk_dim,
                            sigma_mode=self.sigma_mode)
        return self.stats.denormalize_chunk(a_hat)


def _make_bank(dataset, cfg, rng: np.random.Generator) -> _EncoderBank:
    ex = cfg.expert
    encoders = []
    for dim in dataset.modality_dims.values():
        spec = nc.MlpSpec(dim, tuple(ex.enc_hidden), ex.enc_out, activation=ex.activation)
        encoders.append((nc.init_mlp(spec, rng), spec))
    return _EncoderBank(
        modality_order=tuple(dataset.modality_dims),
        modality_dims=tuple(dataset.modality_dims.values()),
        robot_dim=dataset.robot_dim, encoders=encoders,
    )


def _cond_layout(dataset):
    mods, rs_rows, a_rows = dataset.training_rows_multi()
    blocks = list(mods.values()) + [rs_rows]
    cond_rows = np.concatenate(blocks, axis=1)
    slices, off = [], 0
    for b in blocks:
        slices.append(slice(off, off + b.shape[1]))
        off += b.shape[1]
    return a_rows, cond_rows, slices


def train_concat_policy(dataset, cfg, rng: np.random.Generator) -> ConcatPolicy:
    """All-modality baseline: one score net over concatenated embeddings."""
    bank = _make_bank(dataset, cfg, rng)
    cond_dim = int(sum(bank.emb_dims()))
    sub_spec = nc.MlpSpec(dataset.chunk_dim + cond_dim + 16,
                          tuple(cfg.expert.sub_hidden), dataset.chunk_dim,
                          activation=cfg.expert.activation)
    score_params = nc.init_mlp(sub_spec, rng)
    sched = make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start,
                          cfg.diffusion.beta_end)
    a_rows, cond_rows, slices = _cond_layout(dataset)
    policy = ConcatPolicy(bank=bank, score_params=score_params, score_spec=sub_spec,
                          sched=sched, stats=dataset.stats(),
                          sigma_mode=cfg.diffusion.sigma_mode)

    def score(a_k, c, ks):
        embs = bank.encode_rows_graph(c, slices)
        feats = timestep_features(ks, sched.K)
        x = nc.concat_cols([nc.const(a_k)] + embs + [nc.const(feats)])
        return nc.mlp_forward(score_params, sub_spec, x)

    policy.loss_history = fit_denoiser(
        score, policy.param_groups(), a_rows, cond_rows, sched,
        steps=cfg.train.steps, batch=cfg.train.batch, lr=cfg.train.lr, rng=rng)
    return policy


def train_moe_policy(dataset, cfg, rng: np.random.Generator) -> MoEFeaturePolicy:
    """Feature-level MoE baseline: gated weighted sum of embeddings feeds one
    score net; the gate trains jointly with everything else."""
    bank = _make_bank(dataset, cfg, rng)
    emb_dims = bank.emb_dims()
    if len(set(emb_dims)) != 1:
        raise ConfigError(f"feature MoE needs equal embedding dims, got {emb_dims}")
    emb_dim = emb_dims[0]
    n = len(bank.modality_order)
    gate_spec = nc.MlpSpec(int(sum(emb_dims)), tuple(cfg.router.hidden), n)
    gate_params = nc.init_mlp(gate_spec, rng)
    # Zero the gate's output layer: the gate starts exactly uniform, so the
    # score net first learns on the plain mean of the embeddings and the
    # gate only sharpens once that helps the objective.
    last = len(gate_spec.layer_dims()) - 1
    gate_params[f"W{last}"].data[...] = 0.0
    sub_spec = nc.MlpSpec(dataset.chunk_dim + emb_dim + 16,
                          tuple(cfg.expert.sub_hidden), dataset.chunk_dim,
                          activation=cfg.expert.activation)
    score_params = nc.init_mlp(sub_spec, rng)
    sched = make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start,
                          cfg.diffusion.beta_end)
    a_rows, cond_rows, slices = _cond_layout(dataset)
    policy = MoEFeaturePolicy(bank=bank, gate_params=gate_params, gate_spec=gate_spec,
                              score_params=score_params, score_spec=sub_spec,
                              sched=sched, stats=dataset.stats(),
                              sigma_mode=cfg.diffusion.sigma_mode)

    def score(a_k, c, ks):
        embs = bank.encode_rows_graph(c, slices)
        logits = nc.mlp_forward(gate_params, gate_spec, nc.concat_cols(embs))
        g = nc.softmax_rows(logits)
        cond = None
        for i, e in enumerate(embs):
            term = nc.mul(nc.col(g, i), e)
            cond = term if cond is None else nc.add(cond, term)
        feats = timestep_features(ks, sched.K)
        x = nc.concat_cols([nc.const(a_k), cond, nc.const(feats)])
        return nc.mlp_forward(score_params, sub_spec, x)

    policy.loss_history = fit_denoiser(
        score, policy.param_groups(), a_rows, cond_rows, sched,
        steps=cfg.train.steps, batch=cfg.train.batch, lr=cfg.train.lr, rng=rng)
    return policy
