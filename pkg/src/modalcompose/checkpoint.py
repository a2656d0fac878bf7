"""Binary checkpoint persistence.

Layout: magic "MCPF", u32 LE version, u32 LE metadata length + UTF-8 JSON
metadata, u32 LE tensor count, then per tensor: u16 LE name length + UTF-8
name, u8 rank, rank x u32 LE dims, row-major 64-bit LE payload. Metadata is
canonical JSON (sorted keys), so identical runs write identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .diffusion import NoiseSchedule, make_schedule
from .envs import ActionStats
from .errors import ContractError, FormatError
from .experts import ModalityExpert, SubPolicy
from .router import Router

MAGIC = b"MCPF"
VERSION = 1


@dataclass
class Checkpoint:
    metadata: dict
    tensors: dict[str, np.ndarray]

    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


def _meta_bytes(metadata: dict) -> bytes:
    return json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(tensors: dict[str, np.ndarray], metadata: dict, path) -> None:
    """Write named float64 tensors plus JSON metadata in MCPF layout."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    mb = _meta_bytes(metadata)
    blob += struct.pack("<I", len(mb))
    blob += mb
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ContractError(f"tensor name too long: {name!r}")
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim > 0xFF:
            raise ContractError(f"tensor rank {arr.ndim} exceeds format limit")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += arr.astype("<f8").tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.off = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"{self.what}: truncated (wanted {n} bytes at {self.off})")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise FormatError(f"checkpoint not found: {p}")
    r = _Reader(p.read_bytes(), str(p))
    if r.take(4) != MAGIC:
        raise FormatError(f"{p}: bad magic, not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{p}: unsupported checkpoint version {version}")
    (mlen,) = r.unpack("<I")
    try:
        metadata = json.loads(r.take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{p}: bad metadata block: {exc}") from None
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        if name in tensors:
            raise FormatError(f"{p}: duplicate tensor name {name!r}")
        (rank,) = r.unpack("<B")
        dims = tuple(r.unpack("<" + "I" * rank)) if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = r.take(8 * n)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(
            np.float64)
    if r.off != len(r.data):
        raise FormatError(f"{p}: {len(r.data) - r.off} trailing bytes")
    return Checkpoint(metadata=metadata, tensors=tensors)


# ---------------------------------------------------------------------------
# typed metadata helpers


def _spec_meta(spec: nc.MlpSpec) -> dict:
    return {"input_dim": spec.input_dim, "hidden": list(spec.hidden),
            "output_dim": spec.output_dim, "activation": spec.activation}


def _spec_from_meta(m: dict) -> nc.MlpSpec:
    return nc.MlpSpec(m["input_dim"], tuple(m["hidden"]), m["output_dim"],
                      activation=m["activation"])


def _stats_meta(stats: ActionStats) -> dict:
    return {"act_min": list(stats.act_min), "act_max": list(stats.act_max),
            "action_dim": stats.action_dim, "horizon": stats.horizon}


def _stats_from_meta(m: dict) -> ActionStats:
    return ActionStats(act_min=np.asarray(m["act_min"], dtype=np.float64),
                       act_max=np.asarray(m["act_max"], dtype=np.float64),
                       action_dim=m["action_dim"], horizon=m["horizon"])


def _sched_meta(sched: NoiseSchedule) -> dict:
    return {"steps": sched.K, "beta_start": float(sched.betas[0]),
            "beta_end": float(sched.betas[-1])}


def _sched_from_meta(m: dict) -> NoiseSchedule:
    return make_schedule(m["steps"], m["beta_start"], m["beta_end"])


def _params_tensors(prefix: str, params: nc.ParamSet) -> dict[str, np.ndarray]:
    return {f"{prefix}/{name}": t.data for name, t in params.items()}


def _params_from_tensors(ck: Checkpoint, prefix: str, spec: nc.MlpSpec) -> nc.ParamSet:
    ps = nc.ParamSet()
    for i in range(len(spec.layer_dims())):
        for base in (f"W{i}", f"b{i}"):
            key = f"{prefix}/{base}"
            if key not in ck.tensors:
                raise FormatError(f"checkpoint missing tensor {key!r}")
            ps.add(base, ck.tensors[key])
    return ps


def common_metadata(kind: str, stats: ActionStats, sched: NoiseSchedule,
                    env_name: str, seed: int, config_hash: str) -> dict:
    return {"kind": kind, "env": env_name, "seed": seed,
            "config_hash": config_hash, "stats": _stats_meta(stats),
            "schedule": _sched_meta(sched)}


def save_expert(expert: ModalityExpert, stats: ActionStats, sched: NoiseSchedule,
                path, *, env_name: str, seed: int, config_hash: str) -> None:
    meta = common_metadata("expert", stats, sched, env_name, seed, config_hash)
    meta.update({
        "modality": expert.modality, "modality_dim": expert.modality_dim,
        "robot_dim": expert.robot_dim, "action_dim": expert.action_dim,
        "n_steps": expert.n_steps, "noise_band_split": expert.noise_band_split,
        "encoder_spec": _spec_meta(expert.encoder_spec),
        "sub_specs": [_spec_meta(s.spec) for s in expert.subs],
    })
    tensors = _params_tensors("enc", expert.encoder)
    for i, sub in enumerate(expert.subs):
        tensors.update(_params_tensors(f"sub{i}", sub.params))
    save_checkpoint(tensors, meta, path)


def expert_from_checkpoint(ck: Checkpoint) -> tuple[ModalityExpert, ActionStats,
                                                    NoiseSchedule]:
    m = ck.metadata
    if m.get("kind") != "expert":
        raise FormatError(f"expected an expert checkpoint, got kind {m.get('kind')!r}")
    enc_spec = _spec_from_meta(m["encoder_spec"])
    subs = []
    for i, sm in enumerate(m["sub_specs"]):
        spec = _spec_from_meta(sm)
        subs.append(SubPolicy(params=_params_from_tensors(ck, f"sub{i}", spec),
                              spec=spec, n_steps=m["n_steps"]))
    expert = ModalityExpert(
        modality=m["modality"], modality_dim=m["modality_dim"],
        robot_dim=m["robot_dim"], action_dim=m["action_dim"],
        encoder=_params_from_tensors(ck, "enc", enc_spec), encoder_spec=enc_spec,
        subs=subs, n_steps=m["n_steps"], noise_band_split=m["noise_band_split"],
    )
    return expert, _stats_from_meta(m["stats"]), _sched_from_meta(m["schedule"])


def save_router(router: Router, stats: ActionStats, sched: NoiseSchedule,
                path, *, env_name: str, seed: int, config_hash: str) -> None:
    meta = common_metadata("router", stats, sched, env_name, seed, config_hash)
    meta.update({
        "modality_order": list(router.modality_order),
        "emb_dims": list(router.emb_dims),
        "router_spec": _spec_meta(router.spec),
    })
    save_checkpoint(_params_tensors("router", router.params), meta, path)


def router_from_checkpoint(ck: Checkpoint) -> Router:
    m = ck.metadata
    if m.get("kind") != "router":
        raise FormatError(f"expected a router checkpoint, got kind {m.get('kind')!r}")
    spec = _spec_from_meta(m["router_spec"])
    return Router(params=_params_from_tensors(ck, "router", spec), spec=spec,
                  modality_order=tuple(m["modality_order"]),
                  emb_dims=tuple(m["emb_dims"]))


def _bank_meta(bank) -> dict:
    return {"modality_order": list(bank.modality_order),
            "modality_dims": list(bank.modality_dims),
            "robot_dim": bank.robot_dim,
            "encoder_specs": [_spec_meta(spec) for _, spec in bank.encoders]}


def _bank_tensors(bank) -> dict[str, np.ndarray]:
    out = {}
    for name, (params, _) in zip(bank.modality_order, bank.encoders):
        out.update(_params_tensors(f"enc_{name}", params))
    return out


def _bank_from_checkpoint(ck: Checkpoint, m: dict):
    from .compose import _EncoderBank
    encoders = []
    for name, sm in zip(m["modality_order"], m["encoder_specs"]):
        spec = _spec_from_meta(sm)
        encoders.append((_params_from_tensors(ck, f"enc_{name}", spec), spec))
    return _EncoderBank(modality_order=tuple(m["modality_order"]),
                        modality_dims=tuple(m["modality_dims"]),
                        robot_dim=m["robot_dim"], encoders=encoders)


def save_fusion(policy, path, *, env_name: str, seed: int, config_hash: str) -> None:
    """Save a ConcatPolicy or MoEFeaturePolicy checkpoint."""
    from .compose import ConcatPolicy, MoEFeaturePolicy
    if isinstance(policy, ConcatPolicy):
        kind = "concat"
    elif isinstance(policy, MoEFeaturePolicy):
        kind = "moe"
    else:
        raise ContractError(f"not a fusion policy: {type(policy).__name__}")
    meta = common_metadata(kind, policy.stats, policy.sched, env_name, seed,
                           config_hash)
    meta.update(_bank_meta(policy.bank))
    meta["score_spec"] = _spec_meta(policy.score_spec)
    meta["sigma_mode"] = policy.sigma_mode
    tensors = _bank_tensors(policy.bank)
    tensors.update(_params_tensors("score", policy.score_params))
    if kind == "moe":
        meta["gate_spec"] = _spec_meta(policy.gate_spec)
        tensors.update(_params_tensors("gate", policy.gate_params))
    save_checkpoint(tensors, meta, path)


def fusion_from_checkpoint(ck: Checkpoint):
    from .compose import ConcatPolicy, MoEFeaturePolicy
    m = ck.metadata
    kind = m.get("kind")
    if kind not in ("concat", "moe"):
        raise FormatError(f"expected a fusion checkpoint, got kind {kind!r}")
    bank = _bank_from_checkpoint(ck, m)
    score_spec = _spec_from_meta(m["score_spec"])
    score_params = _params_from_tensors(ck, "score", score_spec)
    stats = _stats_from_meta(m["stats"])
    sched = _sched_from_meta(m["schedule"])
    if kind == "concat":
        return ConcatPolicy(bank=bank, score_params=score_params,
                            score_spec=score_spec, sched=sched, stats=stats,
                            sigma_mode=m["sigma_mode"])
    gate_spec = _spec_from_meta(m["gate_spec"])
    return MoEFeaturePolicy(bank=bank, gate_params=_params_from_tensors(ck, "gate", gate_spec),
                            gate_spec=gate_spec, score_params=score_params,
                            score_spec=score_spec, sched=sched, stats=stats,
                            sigma_mode=m["sigma_mode"])


def check_compose_compatibility(metas: list[dict]) -> None:
    """Experts/router being composed must share config hash, schedule,
    normalization stats, action dim, horizon, and environment."""
    if not metas:
        raise ContractError("nothing to check")
    ref = metas[0]
    for m in metas[1:]:
        for key in ("config_hash", "schedule", "stats", "env"):
            if m.get(key) != ref.get(key):
                raise ContractError(
                    f"incompatible checkpoints: {key} differs "
                    f"({m.get(key)!r} vs {ref.get(key)!r})")
