"""Run configuration: one flat namespace of dotted keys.

Values resolve in order defaults < config file < environment (``CONFODOM_``
prefix, dots become underscores) < command-line ``--set`` pairs. The file
format is ``key = value`` per line with ``#`` comments; the run manifest is
written in the same format, so a manifest can be fed back as a config.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

from .cloud import DEFAULT_VOXEL_SIZE, MIN_RANGE
from .evaluation import KITTI_LENGTHS
from .icp import IcpConfig
from .losses import LossWeights
from .solver import SolverConfig

ENV_PREFIX = "CONFODOM_"
META_PREFIX = "meta."


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CloudConfig:
    voxel_size: tuple = DEFAULT_VOXEL_SIZE
    normal_k: int = 4
    min_range: float = MIN_RANGE


@dataclass(frozen=True)
class EvalConfig:
    lengths: tuple = KITTI_LENGTHS
    stride: int = 1


@dataclass(frozen=True)
class AblationConfig:
    """Switches that zero a loss weight without editing it."""

    l_ra: bool = True
    l_tr: bool = True
    l_fs: bool = True


@dataclass(frozen=True)
class RunConfig:
    input: str = ""
    gt: str | None = None
    output: str = "run"
    seed: int | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    cloud: CloudConfig = field(default_factory=CloudConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def effective_solver(self) -> SolverConfig:
        w = self.solver.weights
        w = replace(
            w,
            w2=w.w2 if self.ablation.l_ra else 0.0,
            w3=w.w3 if self.ablation.l_tr else 0.0,
            w4=w.w4 if self.ablation.l_fs else 0.0,
        )
        return replace(self.solver, weights=w)


# nested sections and where they live inside RunConfig
_SECTIONS = {
    "solver": ("solver",),
    "loss": ("solver", "weights"),
    "icp": ("solver", "icp"),
    "cloud": ("cloud",),
    "eval": ("eval",),
    "ablation": ("ablation",),
}
_TOP = ("input", "gt", "output", "seed")
_OPTIONAL = {"gt": str, "seed": int, "solver.refine_max_dist": float}
_INT_TUPLES = {"eval.lengths"}


def _get(obj, path):
    for name in path:
        obj = getattr(obj, name)
    return obj


def _set(obj, path, updates):
    if not path:
        return replace(obj, **updates)
    head, rest = path[0], path[1:]
    return replace(obj, **{head: _set(getattr(obj, head), rest, updates)})


def _section_keys(cfg: RunConfig):
    for prefix, path in _SECTIONS.items():
        sub = _get(cfg, path)
        for f in fields(sub):
            value = getattr(sub, f.name)
            if hasattr(value, "__dataclass_fields__"):
                continue  # nested sections are listed under their own prefix
            yield f"{prefix}.{f.name}", path, f.name


def flatten(cfg: RunConfig) -> dict:
    out = {k: getattr(cfg, k) for k in _TOP}
    for key, path, name in _section_keys(cfg):
        out[key] = getattr(_get(cfg, path), name)
    return out


def known_keys() -> list:
    return sorted(flatten(RunConfig()))


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key: str, text: str, default):
    text = text.strip()
    try:
        if key in _OPTIONAL:
            if text.lower() in ("none", "null", ""):
                return None
            return _OPTIONAL[key](text)
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {text!r}")
        if isinstance(default, tuple):
            cast = int if key in _INT_TUPLES else float
            return tuple(cast(v) for v in text.split(",") if v.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def read_config_file(path) -> dict:
    """Parse a ``key = value`` file into raw strings; ``meta.*`` keys are ignored."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    raw = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key.startswith(META_PREFIX):
            raw[key] = value
    return raw


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    raw = {}
    for key in known_keys():
        name = ENV_PREFIX + key.replace(".", "_").upper()
        if name in environ:
            raw[key] = environ[name]
    return raw


def apply_overrides(cfg: RunConfig, raw: dict) -> RunConfig:
    defaults = flatten(cfg)
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    top = {}
    per_path = {}
    for key, text in raw.items():
        value = parse_value(key, text, defaults[key])
        if key in _TOP:
            top[key] = value
        else:
            prefix, name = key.split(".", 1)
            per_path.setdefault(_SECTIONS[prefix], {})[name] = value
    try:
        # deepest sections first so their parents pick up the rebuilt children
        for path in sorted(per_path, key=len, reverse=True):
            cfg = _set(cfg, path, per_path[path])
        return replace(cfg, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def resolve(config_path=None, cli_pairs=(), environ=None, base: RunConfig = None) -> RunConfig:
    cfg = base or RunConfig()
    if config_path:
        cfg = apply_overrides(cfg, read_config_file(config_path))
    cfg = apply_overrides(cfg, env_overrides(environ))
    raw = {}
    for pair in cli_pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        raw[key.strip()] = value
    return apply_overrides(cfg, raw)


def dump(cfg: RunConfig, meta: dict = None) -> str:
    lines = [f"{k} = {format_value(v)}" for k, v in sorted(flatten(cfg).items())]
    for k, v in sorted((meta or {}).items()):
        lines.append(f"{META_PREFIX}{k} = {format_value(v)}")
    return "\n".join(lines) + "\n"
