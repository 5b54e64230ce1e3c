"""Run configuration files: TOML documents validated before any compute."""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .engine import ConfigError, StageConfig, validate_stages

STAGE_KEYS = {f.name for f in dataclasses.fields(StageConfig)}
DATASET_KEYS = {
    "kind", "classes", "per_class", "size", "channels", "noise_sigma", "seed",
    "images", "labels", "train_fraction", "split_seed",
}
REWARD_KEYS = {"reference_params", "penalty_exponent"}
SEARCH_KEYS = {"workers", "use_baseline", "checkpoint_every_epochs"}
EVAL_KEYS = {"layers", "channels", "epochs", "batch_size", "lr", "momentum", "weight_decay"}
TOP_KEYS = {"seed", "dataset", "reward", "search", "stage_defaults", "stage", "eval"}


class ConfigFileError(ConfigError):
    """A configuration problem anchored to ``path:line``."""

    def __init__(self, path, line, message):
        self.path, self.line = path, line
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: {message}")


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    classes: int = 10
    per_class: int = 200
    size: int = 16
    channels: int = 3
    noise_sigma: float = 0.3
    seed: int = 0
    images: str | None = None
    labels: str | None = None
    train_fraction: float = 0.5
    split_seed: int = 0


@dataclass
class EvalSpec:
    layers: int | None = None
    channels: int | None = None
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 3e-4


@dataclass
class RunConfig:
    path: Path
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    reference_params: float | None = None  # None: per-stage default
    penalty_exponent: float = -0.25
    workers: int = 1
    use_baseline: bool = True
    checkpoint_every_epochs: int = 1
    stages: list = field(default_factory=list)
    eval: EvalSpec = field(default_factory=EvalSpec)


def bundled_configs():
    return sorted(p.name[:-5] for p in resources.files("tndnas.configs").iterdir() if p.name.endswith(".toml"))


def resolve_config_path(name):
    """A filesystem path, or the name of a bundled config such as ``quick``."""
    p = Path(name)
    if p.exists():
        return p
    stem = p.name[:-5] if p.name.endswith(".toml") else p.name
    if str(p.parent) == "." and stem in bundled_configs():
        return Path(str(resources.files("tndnas.configs").joinpath(stem + ".toml")))
    raise ConfigFileError(name, None, "config file not found")


class _Lines:
    """Locates table headers and keys in TOML text for error messages."""

    def __init__(self, text):
        self.lines = text.splitlines()

    def header(self, name, occurrence=0):
        pat = re.compile(r"^\s*\[\[?\s*" + re.escape(name) + r"\s*\]\]?\s*(#.*)?$")
        hits = [i + 1 for i, l in enumerate(self.lines) if pat.match(l)]
        return hits[occurrence] if occurrence < len(hits) else None

    def key(self, key, table=None, occurrence=0):
        """1-based line of ``key`` inside ``table`` (top level when None)."""
        start = self.header(table, occurrence) if table else 0
        if start is None:
            return None
        pat = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
        for i in range(start, len(self.lines)):
            if re.match(r"^\s*\[", self.lines[i]):
                break
            if pat.match(self.lines[i]):
                return i + 1
        return start or None


def _type_ok(annotation, value):
    for t in (a.strip() for a in str(annotation).split("|")):
        if t == "bool" and isinstance(value, bool):
            return True
        if isinstance(value, bool):
            continue
        if t == "int" and isinstance(value, int):
            return True
        if t == "float" and isinstance(value, (int, float)):
            return True
        if t == "str" and isinstance(value, str):
            return True
    return False


def _check_keys(section, allowed, path, lines, table, occurrence=0, cls=None):
    if not isinstance(section, dict):
        raise ConfigFileError(path, lines.header(table, occurrence), f"[{table}] must be a table")
    types = {f.name: f.type for f in dataclasses.fields(cls)} if cls else {}
    for k, v in section.items():
        if k not in allowed:
            raise ConfigFileError(
                path, lines.key(k, table, occurrence), f"unknown key {k!r} in [{table}]; allowed: {sorted(allowed)}"
            )
        if k in types and not _type_ok(types[k], v):
            raise ConfigFileError(
                path, lines.key(k, table, occurrence), f"[{table}] {k} must be {types[k]}, got {v!r}"
            )


def _typed(cls, values, path, line, table):
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigFileError(path, line, f"[{table}]: {e}") from e


def load_config(name):
    path = resolve_config_path(name)
    text = path.read_text()
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigFileError(path, int(m.group(1)) if m else None, f"TOML syntax error: {e}") from e
    lines = _Lines(text)
    for k in doc:
        if k not in TOP_KEYS:
            raise ConfigFileError(path, lines.key(k) or lines.header(k), f"unknown top-level key {k!r}")
    cfg = RunConfig(path=path)
    if "seed" in doc:
        if not isinstance(doc["seed"], int):
            raise ConfigFileError(path, lines.key("seed"), "seed must be an integer")
        cfg.seed = doc["seed"]

    ds = doc.get("dataset", {})
    _check_keys(ds, DATASET_KEYS, path, lines, "dataset", cls=DatasetSpec)
    cfg.dataset = _typed(DatasetSpec, ds, path, lines.header("dataset"), "dataset")
    if cfg.dataset.kind not in ("synthetic", "idx"):
        raise ConfigFileError(path, lines.key("kind", "dataset"), "dataset kind must be 'synthetic' or 'idx'")
    if cfg.dataset.kind == "idx":
        for k in ("images", "labels"):
            v = getattr(cfg.dataset, k)
            if not v:
                raise ConfigFileError(path, lines.header("dataset"), f"idx dataset needs '{k}'")
            p = Path(v) if Path(v).is_absolute() else path.parent / v
            if not p.exists():
                raise ConfigFileError(path, lines.key(k, "dataset"), f"dataset file not found: {p}")
            setattr(cfg.dataset, k, str(p))
    if not 0 < cfg.dataset.train_fraction < 1:
        raise ConfigFileError(path, lines.key("train_fraction", "dataset"), "train_fraction must lie in (0, 1)")

    rw = doc.get("reward", {})
    _check_keys(rw, REWARD_KEYS, path, lines, "reward")
    ref = rw.get("reference_params", "auto")
    if ref == "auto":
        cfg.reference_params = None
    elif isinstance(ref, (int, float)) and ref > 0:
        cfg.reference_params = float(ref)
    else:
        raise ConfigFileError(path, lines.key("reference_params", "reward"), "reference_params must be > 0 or \"auto\"")
    beta = rw.get("penalty_exponent", cfg.penalty_exponent)
    if not _type_ok("float", beta):
        raise ConfigFileError(path, lines.key("penalty_exponent", "reward"), "penalty_exponent must be a number")
    cfg.penalty_exponent = float(beta)

    se = doc.get("search", {})
    _check_keys(se, SEARCH_KEYS, path, lines, "search", cls=RunConfig)
    for k, v in se.items():
        setattr(cfg, k, v)
    if cfg.workers < 1 or cfg.checkpoint_every_epochs < 1:
        raise ConfigFileError(path, lines.header("search"), "workers and checkpoint_every_epochs must be >= 1")

    defaults = doc.get("stage_defaults", {})
    _check_keys(defaults, STAGE_KEYS - {"layers"}, path, lines, "stage_defaults", cls=StageConfig)
    raw_stages = doc.get("stage", [])
    if not isinstance(raw_stages, list) or not raw_stages:
        raise ConfigFileError(path, None, "at least one [[stage]] table is required")
    for k, st in enumerate(raw_stages):
        _check_keys(st, STAGE_KEYS, path, lines, "stage", k, cls=StageConfig)
        line = lines.header("stage", k)
        if "layers" not in st:
            raise ConfigFileError(path, line, f"stage {k} needs 'layers'")
        try:
            cfg.stages.append(StageConfig(**{**defaults, **st}))
        except (ConfigError, TypeError) as e:
            raise ConfigFileError(path, line, f"stage {k}: {e}") from e
    try:
        validate_stages(cfg.stages)
    except ConfigError as e:
        m = re.match(r"stage (\d+)", str(e))
        raise ConfigFileError(path, lines.header("stage", int(m.group(1))) if m else None, str(e)) from e

    ev = doc.get("eval", {})
    _check_keys(ev, EVAL_KEYS, path, lines, "eval", cls=EvalSpec)
    cfg.eval = _typed(EvalSpec, ev, path, lines.header("eval"), "eval")
    return cfg
