"""Run configuration: typed sections, a small `key = value` file format, and
stable hashing so checkpoints can record exactly what produced them.

File format: lines of ``key = value`` grouped under ``[section]`` headers.
Blank lines and ``#`` comments are ignored. Unknown sections or keys are hard
errors so experiment typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class EnvConfig:
    name: str = "occluded_reach"
    modalities: tuple[str, ...] = ()   # empty = the env's native modality order


@dataclass(frozen=True)
class DiffusionConfig:
    steps: int = 50            # denoising steps per action sample
    beta_start: float = 1e-4
    beta_end: float = 0.02
    horizon: int = 1           # actions predicted per control step
    sigma_mode: str = "beta"   # beta | beta_tilde


@dataclass(frozen=True)
class ExpertConfig:
    n_sub: int = 2
    enc_hidden: tuple[int, ...] = (64, 64)
    enc_out: int = 32
    sub_hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    noise_band_split: bool = False


@dataclass(frozen=True)
class RouterConfig:
    hidden: tuple[int, ...] = (64,)
    joint: bool = False        # train router jointly with experts


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch: int = 64
    lr: float = 1e-3
    router_steps: int = 2000


@dataclass(frozen=True)
class ProbeConfig:
    sigma_scale: float = 0.1   # noise stddev = scale x per-coordinate data stddev
    ema_alpha: float = 0.1
    draws: int = 1             # perturbation draws averaged per (step, modality)
    modalities: tuple[str, ...] = ()   # empty = probe all


@dataclass(frozen=True)
class RunSection:
    """Per-run orchestration knobs: these never affect model compatibility."""

    seed: int = 0
    methods: tuple[str, ...] = ()   # empty = every expert + router + concat + moe
    strategy: str = "soft"          # soft | hard | top2, applied at composition
    dataset: str = ""               # .mcds path; empty = derived from out dir
    demos: int = 100
    eval_n: int = 200
    out: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    run: RunSection = field(default_factory=RunSection)

    def with_section(self, section: str, /, **updates) -> "RunConfig":
        return replace(self, **{section: replace(getattr(self, section), **updates)})


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _parse_value(raw: str, template, where: str):
    if isinstance(template, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got '{raw}'")
    if isinstance(template, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got '{raw}'") from None
    if isinstance(template, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got '{raw}'") from None
    if isinstance(template, tuple):
        if raw.strip() == "":
            return ()
        parts = [p.strip() for p in raw.split(",")]
        if template and isinstance(template[0], int):
            try:
                return tuple(int(p) for p in parts)
            except ValueError:
                raise ConfigError(f"{where}: expected comma-separated ints, got '{raw}'") from None
        return tuple(parts)
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    section = None
    sec_updates: dict[str, dict] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(
                    f"line {lineno}: unknown section '[{section}]' "
                    f"(known: {', '.join(sorted(_SECTIONS))})"
                )
            sec_updates.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line}'")
        if section is None:
            raise ConfigError(f"line {lineno}: key before any [section] header")
        key, raw = (part.strip() for part in line.split("=", 1))
        sec_obj = getattr(cfg, section)
        known = {f.name for f in fields(sec_obj)}
        if key not in known:
            raise ConfigError(
                f"line {lineno}: unknown key '{key}' in [{section}] "
                f"(known: {', '.join(sorted(known))})"
            )
        template = getattr(sec_obj, key)
        sec_updates[section][key] = _parse_value(raw, template, f"line {lineno}: {section}.{key}")
    for section, updates in sec_updates.items():
        if updates:
            cfg = cfg.with_section(section, **updates)
    return cfg


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), base)


def config_text(cfg: RunConfig) -> str:
    """Canonical serialization; parsing it back reproduces cfg exactly."""
    lines = []
    for sec_field in fields(RunConfig):
        sec = getattr(cfg, sec_field.name)
        lines.append(f"[{sec_field.name}]")
        for f in fields(sec):
            v = getattr(sec, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()[:16]


_MODEL_SECTIONS = ("env", "diffusion", "expert", "router", "train")


def model_hash(cfg: RunConfig) -> str:
    """Hash of the sections that determine trained-model compatibility.

    Excludes [probe] and [run], so checkpoints trained under different seeds,
    output paths, or probe settings still compose.
    """
    lines = []
    for name in _MODEL_SECTIONS:
        sec = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(sec):
            v = getattr(sec, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]
