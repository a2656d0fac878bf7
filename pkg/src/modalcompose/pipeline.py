"""Training/evaluation orchestration shared by the CLI and tests.

Artifacts land in an output directory: dataset (.mcds), checkpoints (.mcpf),
loss-history CSVs, composed-policy manifests (.txt), metrics CSVs. Everything
is a pure function of (config, seed), so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as cp
from .compose import (ComposedPolicy, compose_policy, manual_compose,
                      single_expert_policy, train_concat_policy, train_moe_policy)
from .diffusion import make_schedule
from .envs import Dataset, generate_dataset, make_env_spec, run_expert_episode
from .errors import ConfigError, ContractError, FormatError
from .experts import train_expert
from .rollout import run_policy_episode
from .router import STRATEGIES, train_router
from .rngstream import TAG_EVAL, TAG_TRAIN, stream
from .runconfig import RunConfig, model_hash

# fixed training-stream labels; expert i uses 1 + i, shared routers/baselines
# use labels no expert index can reach
_ROUTER_LABEL = 1000
_CONCAT_LABEL = 1001
_MOE_LABEL = 1002


def n_threads() -> int:
    """Worker cap from MODALCOMPOSE_THREADS (default 1)."""
    raw = os.environ.get("MODALCOMPOSE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"MODALCOMPOSE_THREADS must be an integer, got {raw!r}") from None


def default_dataset_path(cfg: RunConfig, out_dir: Path) -> Path:
    return out_dir / f"{cfg.env.name}_n{cfg.run.demos}_seed{cfg.run.seed}.mcds"


def ensure_out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def gen_data(cfg: RunConfig, path: Path | None = None) -> Path:
    """Generate the demonstration dataset for cfg and write it to disk."""
    out = ensure_out_dir(cfg)
    path = Path(path) if path else default_dataset_path(cfg, out)
    spec = make_env_spec(cfg.env.name)
    generate_dataset(spec, cfg.run.demos, seed=cfg.run.seed, path=path,
                     horizon=cfg.diffusion.horizon)
    return path


def _load_dataset(cfg: RunConfig) -> tuple[Dataset, Path]:
    out = ensure_out_dir(cfg)
    path = Path(cfg.run.dataset) if cfg.run.dataset else default_dataset_path(cfg, out)
    if not path.exists():
        raise ConfigError(
            f"dataset not found: {path} (run gen-data first or set [run] dataset)")
    return Dataset.read(path), path


def _normalize_methods(cfg: RunConfig, dataset: Dataset) -> list[str]:
    mods = list(dataset.modality_dims)
    if not cfg.run.methods:
        return [f"expert:{m}" for m in mods] + ["router", "concat", "moe"]
    out = []
    for method in cfg.run.methods:
        if method.startswith("expert:"):
            mod = method.split(":", 1)[1]
            if mod not in dataset.modality_dims:
                raise ConfigError(f"unknown modality in method {method!r} "
                                  f"(dataset has {mods})")
        elif method not in ("router", "concat", "moe"):
            raise ConfigError(f"unknown method {method!r}; expected "
                              f"expert:<modality>, router, concat, or moe")
        if method in out:
            raise ConfigError(f"duplicate method {method!r}")
        out.append(method)
    return out


def _method_filename(method: str, seed: int) -> str:
    return f"{method.replace(':', '-')}_seed{seed}.mcpf"


def _write_loss_csv(path: Path, history: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(history):
            w.writerow([i, f"{loss:.10g}"])


def run_training(cfg: RunConfig) -> dict[str, Path]:
    """Train the configured methods; write checkpoints and loss CSVs.

    Experts needed by 'router' are trained on demand even when not listed.
    Returns {method: checkpoint path}.
    """
    dataset, _ = _load_dataset(cfg)
    methods = _normalize_methods(cfg, dataset)
    out = ensure_out_dir(cfg)
    seed = cfg.run.seed
    mhash = model_hash(cfg)
    sched = make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start,
                          cfg.diffusion.beta_end)
    stats = dataset.stats()
    mods = list(dataset.modality_dims)

    def train_one_expert(mod: str):
        rng = stream(seed, TAG_TRAIN, 1 + mods.index(mod))
        return train_expert(dataset, mod, cfg, rng)

    experts_cache: dict[str, object] = {}

    def expert_for(mod: str):
        if mod not in experts_cache:
            experts_cache[mod] = train_one_expert(mod)
        return experts_cache[mod]

    written: dict[str, Path] = {}
    expert_methods = [m for m in methods if m.startswith("expert:")]
    workers = n_threads()
    if workers > 1 and len(expert_methods) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {m: pool.submit(train_one_expert, m.split(":", 1)[1])
                       for m in expert_methods}
            for m in expert_methods:
                experts_cache[m.split(":", 1)[1]] = futures[m].result()

    for method in methods:
        path = out / _method_filename(method, seed)
        if method.startswith("expert:"):
            mod = method.split(":", 1)[1]
            ex = expert_for(mod)
            cp.save_expert(ex, stats, sched, path, env_name=cfg.env.name,
                           seed=seed, config_hash=mhash)
            history = ex.loss_history
        elif method == "router":
            experts = [expert_for(m) for m in mods]
            router = train_router(experts, dataset, cfg,
                                  stream(seed, TAG_TRAIN, _ROUTER_LABEL))
            cp.save_router(router, stats, sched, path, env_name=cfg.env.name,
                           seed=seed, config_hash=mhash)
            history = router.loss_history
        elif method == "concat":
            policy = train_concat_policy(dataset, cfg,
                                         stream(seed, TAG_TRAIN, _CONCAT_LABEL))
            cp.save_fusion(policy, path, env_name=cfg.env.name, seed=seed,
                           config_hash=mhash)
            history = policy.loss_history
        else:
            policy = train_moe_policy(dataset, cfg,
                                      stream(seed, TAG_TRAIN, _MOE_LABEL))
            cp.save_fusion(policy, path, env_name=cfg.env.name, seed=seed,
                           config_hash=mhash)
            history = policy.loss_history
        _write_loss_csv(out / f"loss_{method.replace(':', '-')}_seed{seed}.csv",
                        history)
        written[method] = path
    return written


# ---------------------------------------------------------------------------
# composed-policy manifests


def write_manifest(path, *, env_name: str, expert_paths: list[str],
                   router_path: str | None = None, weights=None,
                   strategy: str = "soft", stats_hash: str = "") -> None:
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    if (router_path is None) == (weights is None):
        raise ContractError("manifest needs exactly one of router or weights")
    lines = ["# composed-policy manifest", f"env = {env_name}",
             f"strategy = {strategy}", f"stats_hash = {stats_hash}"]
    for p in expert_paths:
        lines.append(f"expert = {p}")
    if router_path is not None:
        lines.append(f"router = {router_path}")
    else:
        lines.append("weights = " + ",".join(repr(float(w)) for w in weights))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> tuple[ComposedPolicy, dict]:
    """Rebuild a composed policy from its manifest.

    Checkpoint paths are resolved relative to the manifest's directory and
    cross-checked for compatibility (config hash, schedule, stats, env).
    """
    p = Path(path)
    if not p.exists():
        raise FormatError(f"manifest not found: {p}")
    fields = {"expert": []}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{p}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "expert":
            fields["expert"].append(value)
        else:
            fields[key] = value
    if not fields["expert"]:
        raise FormatError(f"{p}: no expert checkpoints listed")
    base = p.parent
    loaded = [cp.load_checkpoint(base / e) for e in fields["expert"]]
    metas = [ck.metadata for ck in loaded]
    parts = [cp.expert_from_checkpoint(ck) for ck in loaded]
    experts = [e for e, _, _ in parts]
    stats = parts[0][1]
    sched = parts[0][2]
    if "router" in fields:
        rck = cp.load_checkpoint(base / fields["router"])
        metas.append(rck.metadata)
        cp.check_compose_compatibility(metas)
        router = cp.router_from_checkpoint(rck)
        policy = compose_policy(experts, router, fields.get("strategy", "soft"),
                                sched, stats)
    elif "weights" in fields:
        cp.check_compose_compatibility(metas)
        w = [float(x) for x in fields["weights"].split(",")]
        policy = manual_compose(experts, w, sched, stats)
        policy.strategy = fields.get("strategy", "soft")
    else:
        raise FormatError(f"{p}: manifest lists neither router nor weights")
    want = fields.get("stats_hash", "")
    if want and want != stats.key():
        raise ContractError(
            f"{p}: normalization stats hash mismatch ({want} != {stats.key()})")
    meta = {"env": fields.get("env", metas[0].get("env")),
            "strategy": policy.strategy, "metas": metas}
    return policy, meta


# ---------------------------------------------------------------------------
# evaluation


class RandomPolicy:
    """Uniform random actions in [-1, 1]; the Monte-Carlo floor."""

    def __init__(self, action_dim: int):
        self.action_dim = action_dim

    def n_params(self) -> int:
        return 0

    def act(self, obs, rng) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=self.action_dim)


def _policy_from_path(path) -> tuple[object, str, str]:
    """Load a policy from a manifest or checkpoint path.

    Returns (policy, method label, env name).
    """
    p = Path(path)
    if not p.exists():
        raise FormatError(f"no such policy file: {p}")
    if p.read_bytes()[:4] == cp.MAGIC:
        ck = cp.load_checkpoint(p)
        kind = ck.metadata.get("kind")
        if kind == "expert":
            expert, stats, sched = cp.expert_from_checkpoint(ck)
            return (single_expert_policy(expert, sched, stats),
                    f"expert:{expert.modality}", ck.metadata["env"])
        if kind in ("concat", "moe"):
            return cp.fusion_from_checkpoint(ck), kind, ck.metadata["env"]
        raise FormatError(f"{p}: cannot evaluate a {kind!r} checkpoint directly")
    policy, meta = load_manifest(p)
    label = "composed" if policy.router is not None else "manual"
    return policy, label, meta["env"]


def _eval_episodes(policy, spec, seed: int, n: int) -> tuple[float, float]:
    workers = n_threads()
    if workers == 1:
        wins = 0
        steps = []
        for ep in range(n):
            rec = run_policy_episode(policy, spec, seed, ep)
            wins += rec.success
            steps.append(rec.steps)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            recs = list(pool.map(
                lambda ep: run_policy_episode(policy, spec, seed, ep), range(n)))
        wins = sum(r.success for r in recs)
        steps = [r.steps for r in recs]
    return wins / n, float(np.mean(steps))


def run_eval(target, n: int, seed: int, env_name: str | None = None,
             method: str | None = None) -> list[dict]:
    """Evaluate a policy target over n seeded episodes.

    target: manifest path, checkpoint path, or a policy object (then env_name
    and method are required). Returns metrics rows. Failures naturally end at
    T_max steps, matching the timeout convention for mean_steps.
    """
    if n <= 0:
        raise ContractError("n must be positive")
    if isinstance(target, (str, Path)):
        policy, label, env = _policy_from_path(target)
    else:
        if env_name is None or method is None:
            raise ContractError("policy objects need env_name and method labels")
        policy, label, env = target, method, env_name
    spec = make_env_spec(env_name or env)
    rate, mean_steps = _eval_episodes(policy, spec, seed, n)
    return [{"task": spec.name, "method": label, "success_rate": rate,
             "mean_steps": mean_steps, "param_count": policy.n_params(),
             "seed": seed}]


def eval_scripted(env_name: str, n: int, seed: int) -> list[dict]:
    """Oracle upper-bound row: the scripted expert driving its own episodes."""
    if n <= 0:
        raise ContractError("n must be positive")
    spec = make_env_spec(env_name)
    wins = 0
    steps = []
    for ep in range(n):
        episode, success = run_expert_episode(spec, stream(seed, TAG_EVAL, ep))
        wins += success
        steps.append(len(episode.actions))
    return [{"task": env_name, "method": "scripted", "success_rate": wins / n,
             "mean_steps": float(np.mean(steps)), "param_count": 0, "seed": seed}]


METRICS_COLUMNS = ("task", "method", "success_rate", "mean_steps",
                   "param_count", "seed")


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for row in rows:
            w.writerow([row["task"], row["method"],
                        f"{row['success_rate']:.4f}", f"{row['mean_steps']:.2f}",
                        row["param_count"], row["seed"]])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            rows.append({"task": raw["task"], "method": raw["method"],
                         "success_rate": float(raw["success_rate"]),
                         "mean_steps": float(raw["mean_steps"]),
                         "param_count": int(raw["param_count"]),
                         "seed": int(raw["seed"])})
        return rows


# ---------------------------------------------------------------------------
# dataset-size sweep


def sweep_dataset_size(cfg: RunConfig, sizes: list[int]) -> list[dict]:
    """Train composed + concat at each dataset size; two metrics rows per size."""
    if not sizes:
        raise ConfigError("sweep needs at least one size")
    if len(set(sizes)) != len(sizes):
        raise ConfigError(f"duplicate size in sweep list {sizes}")
    if sorted(sizes) != list(sizes):
        raise ConfigError(f"sweep sizes must be ascending, got {sizes}")
    out = ensure_out_dir(cfg)
    rows = []
    for size in sizes:
        sub = cfg.with_section("run", demos=size,
                               dataset=str(out / f"sweep_{cfg.env.name}_n{size}"
                                           f"_seed{cfg.run.seed}.mcds"))
        gen_data(sub, sub.run.dataset)
        dataset = Dataset.read(sub.run.dataset)
        mods = list(dataset.modality_dims)
        sub = sub.with_section(
            "run", methods=tuple(f"expert:{m}" for m in mods) + ("router", "concat"))
        paths = run_training(sub)
        experts, stats, sched = [], None, None
        for m in mods:
            ck = cp.load_checkpoint(paths[f"expert:{m}"])
            ex, stats, sched = cp.expert_from_checkpoint(ck)
            experts.append(ex)
        router = cp.router_from_checkpoint(cp.load_checkpoint(paths["router"]))
        composed = compose_policy(experts, router, cfg.run.strategy, sched, stats)
        concat = cp.fusion_from_checkpoint(cp.load_checkpoint(paths["concat"]))
        for label, pol in (("composed", composed), ("concat", concat)):
            row = run_eval(pol, cfg.run.eval_n, cfg.run.seed,
                           env_name=cfg.env.name, method=label)[0]
            row["task"] = f"{cfg.env.name}@{size}"
            rows.append(row)
    return rows
