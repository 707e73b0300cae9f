"""TOML run configuration: defaults, validation with line/key diagnostics, builders."""

from __future__ import annotations

import copy
import re
from pathlib import Path

import tomli

from . import attack, ckks
from .federation import MODES, RANGE_MODES, FederationConfig, HEParams
from .nn import TrainConfig
from .quantize import BIT_WIDTHS
from .shaping import ClipConfig, PruneSchedule

# section -> key -> (default, allowed choices or None)
SCHEMA: dict[str, dict[str, tuple]] = {
    "federation": {
        "clients": (5, None),
        "rounds": (30, None),
        "mode": ("quancrypt", MODES),
        "smoothing": (1.0, None),
        "range_mode": ("shared", RANGE_MODES),
        "headroom": (1.0, None),
        "checkpoint_patience": (5, None),
        "seed": (0, None),
        "dataset": ("mnist", ("mnist", "synthetic")),
        "data_dir": ("", None),
        "model": ("mlp", ("mlp", "tiny-conv")),
        "partition": ("iid", ("iid", "label-shards")),
        "classes_per_client": (2, None),
        "test_size": (500, None),
        "train_fraction": (0.8, None),
        "synthetic_count": (2000, None),
        "synthetic_features": (64, None),
        "synthetic_separation": (4.0, None),
    },
    "training": {
        "learning_rate": (0.001, None),
        "weight_decay": (0.0001, None),
        "batch_size": (64, None),
        "local_epochs": (1, None),
        "optimizer": ("adam", ("adam", "sgd")),
    },
    "he": {
        "degree": (ckks.DEFAULT_DEGREE, None),
        "moduli_bits": (list(ckks.DEFAULT_MODULI_BITS), None),
        "scale_bits": (40, None),
    },
    "quantization": {"bits": (8, BIT_WIDTHS)},
    "pruning": {
        "p0": (0.20, None),
        "p_target": (0.50, None),
        "t_eff": (40, None),
        "t_target": (300, None),
    },
    "clipping": {"alpha": (3.0, None)},
    "attack": {
        "tv_weight": (attack.BENCH_CONFIG.tv_weight, None),
        "steps": (attack.BENCH_CONFIG.steps, None),
        "step_size": (attack.BENCH_CONFIG.step_size, None),
        "init": ("random-uniform", attack.INITS),
        "fd_epsilon": (1e-4, None),
        "patience": (50, None),
        "prune_rates": ([0.0, 0.3, 0.5, 0.7], None),
        "seeds": (10, None),
    },
}


class ConfigError(ValueError):
    """Invalid configuration; ``str()`` names the file, line and key when known."""

    def __init__(self, message: str, source: str = "", line: int | None = None, key: str = ""):
        self.source, self.line, self.key = source, line, key
        where = source
        if line is not None:
            where += f":{line}"
        prefix = ": ".join(p for p in (where, key) if p)
        super().__init__(f"{prefix}: {message}" if prefix else message)


def defaults() -> dict:
    return {sec: {k: copy.deepcopy(v[0]) for k, v in keys.items()} for sec, keys in SCHEMA.items()}


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Map (section, key) to the 1-based line where the key is assigned."""
    out: dict[tuple[str, str], int] = {}
    section = ""
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"^\[\s*([^\]]+?)\s*\]", line)
        if m:
            section = m.group(1)
            out.setdefault((section, ""), no)
            continue
        m = re.match(r"^([A-Za-z0-9_\-]+)\s*=", line)
        if m:
            out.setdefault((section, m.group(1)), no)
    return out


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    return isinstance(value, type(default))


def _type_name(default) -> str:
    if isinstance(default, list):
        return "array of numbers"
    return {int: "integer", float: "number", str: "string"}.get(type(default), type(default).__name__)


def set_value(cfg: dict, section: str, key: str, value, source: str = "", line: int | None = None) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]", source, line, section)
    if key not in SCHEMA[section]:
        raise ConfigError("unknown key", source, line, f"{section}.{key}")
    default, choices = SCHEMA[section][key]
    if not _type_ok(default, value):
        raise ConfigError(f"expected {_type_name(default)}, got {value!r}", source, line, f"{section}.{key}")
    if choices is not None and value not in choices:
        raise ConfigError(f"must be one of {list(choices)}, got {value!r}", source, line, f"{section}.{key}")
    if isinstance(default, float):
        value = float(value)
    cfg[section][key] = value


def load_config(path=None) -> dict:
    """Defaults merged with the TOML file at ``path`` (if any)."""
    cfg = defaults()
    if path is None:
        return cfg
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from exc
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", str(path), int(m.group(1)) if m else None) from exc
    lines = _key_lines(text)
    for section, body in raw.items():
        if not isinstance(body, dict):
            raise ConfigError("top-level keys must live inside a [section]", str(path), lines.get(("", section)), section)
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", str(path), lines.get((section, "")), section)
        for key, value in body.items():
            set_value(cfg, section, key, value, str(path), lines.get((section, key)))
    validate(cfg, str(path), lines)
    return cfg


def _build(cfg: dict, section: str, fn, source: str, lines: dict):
    try:
        return fn()
    except ValueError as exc:
        raise ConfigError(str(exc), source, lines.get((section, "")), f"[{section}]") from exc


def validate(cfg: dict, source: str = "", lines: dict | None = None) -> None:
    """Build every typed config once so range errors surface as ``ConfigError``."""
    lines = lines or {}
    f = cfg["federation"]
    for key in ("clients", "rounds", "test_size", "synthetic_count", "synthetic_features", "classes_per_client"):
        if f[key] < 1:
            raise ConfigError("must be >= 1", source, lines.get(("federation", key)), f"federation.{key}")
    if not 0 < f["train_fraction"] < 1:
        raise ConfigError("must lie in (0, 1)", source, lines.get(("federation", "train_fraction")), "federation.train_fraction")
    a = cfg["attack"]
    if a["seeds"] < 1:
        raise ConfigError("must be >= 1", source, lines.get(("attack", "seeds")), "attack.seeds")
    if not a["prune_rates"] or any(not 0 <= r <= 1 for r in a["prune_rates"]):
        raise ConfigError("rates must lie in [0, 1]", source, lines.get(("attack", "prune_rates")), "attack.prune_rates")
    _build(cfg, "training", lambda: train_config(cfg), source, lines)
    _build(cfg, "pruning", lambda: PruneSchedule(**cfg["pruning"]), source, lines)
    _build(cfg, "clipping", lambda: ClipConfig(**cfg["clipping"]), source, lines)
    _build(cfg, "he", lambda: ckks.check_parameters(*_he_tuple(cfg)), source, lines)
    _build(cfg, "federation", lambda: federation_config(cfg), source, lines)
    _build(cfg, "attack", lambda: attack_config(cfg), source, lines)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["training"], seed=cfg["federation"]["seed"])


def _he_tuple(cfg: dict):
    h = cfg["he"]
    return h["degree"], tuple(h["moduli_bits"]), float(2 ** h["scale_bits"])


def he_params(cfg: dict) -> HEParams:
    return HEParams(*_he_tuple(cfg))


def federation_config(cfg: dict) -> FederationConfig:
    f = cfg["federation"]
    return FederationConfig(
        num_clients=f["clients"],
        rounds=f["rounds"],
        mode=f["mode"],
        smoothing=f["smoothing"],
        bits=cfg["quantization"]["bits"],
        clip=ClipConfig(**cfg["clipping"]),
        schedule=PruneSchedule(**cfg["pruning"]),
        train=train_config(cfg),
        he=he_params(cfg),
        range_mode=f["range_mode"],
        headroom=f["headroom"],
        checkpoint_patience=f["checkpoint_patience"],
        seed=f["seed"],
    )


def attack_config(cfg: dict) -> attack.AttackConfig:
    a = cfg["attack"]
    return attack.AttackConfig(
        tv_weight=a["tv_weight"],
        steps=a["steps"],
        step_size=a["step_size"],
        init=a["init"],
        fd_epsilon=a["fd_epsilon"],
        patience=a["patience"],
        seed=cfg["federation"]["seed"],
    )
