"""Flat ``key = value`` run configuration shared by every command."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .imagecore import GRID_KINDS

DEFAULT_LAMBDA = {"logpolar": 96.0, "cartesian": 16.0}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


@dataclass
class RunConfig:
    grid_kind: str = "logpolar"
    L: int = 32
    # None resolves to the grid kind's default
    lam: float | None = None
    K: int = 128
    epochs: int = 20
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    dropout: float = 0.1
    jitter_std_deg: float = 5.0
    margin: float = 1.0
    distance_power: int = 2
    seed: int = 0
    # synthetic desk dataset
    n_sources: int = 8
    pairs_per_source: int = 25
    test_sources: int = 3
    test_pairs_per_source: int = 20
    image_size: int = 160
    keypoints_per_pair: int = 80
    keep_scale_fraction: float = 0.5
    noise_level: float = 0.02
    occluders: int = 2
    # paths
    data_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA.get(self.grid_kind, 96.0)
        self.validate()

    def validate(self):
        if self.grid_kind not in GRID_KINDS:
            raise ConfigError("grid_kind", f"must be one of {GRID_KINDS}, got {self.grid_kind!r}")
        checks = {
            "L": self.L >= 2, "lambda": self.lam > 0, "K": self.K >= 2, "epochs": self.epochs >= 1,
            "learning_rate": self.learning_rate > 0, "momentum": 0 <= self.momentum < 1,
            "weight_decay": self.weight_decay >= 0, "dropout": 0 <= self.dropout < 1,
            "jitter_std_deg": self.jitter_std_deg >= 0, "margin": self.margin > 0,
            "distance_power": self.distance_power in (1, 2), "seed": self.seed >= 0,
            "n_sources": self.n_sources >= 1, "pairs_per_source": self.pairs_per_source >= 1,
            "test_sources": self.test_sources >= 1, "test_pairs_per_source": self.test_pairs_per_source >= 1,
            "image_size": self.image_size >= 32, "keypoints_per_pair": self.keypoints_per_pair >= 1,
            "keep_scale_fraction": 0 <= self.keep_scale_fraction <= 1,
            "noise_level": self.noise_level >= 0, "occluders": self.occluders >= 0,
        }
        for key, ok in checks.items():
            if not ok:
                raise ConfigError(key, "value out of range")


# file key -> attribute name
_ALIASES = {"lambda": "lam"}


def _fields():
    return {f.name: f for f in fields(RunConfig)}


def _convert(key: str, attr: str, raw: str):
    f = _fields()[attr]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.split()[0]}") from None
    return raw


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse ``key = value`` lines; '#' starts a comment; unknown keys are rejected."""
    known = _fields()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} is not 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        attr = _ALIASES.get(key, key)
        if attr not in known or key == "lam":
            raise ConfigError(key, "unknown key")
        if attr in values:
            raise ConfigError(key, "given twice")
        values[attr] = _convert(key, attr, raw)
    for key, val in (overrides or {}).items():
        values[_ALIASES.get(key, key)] = val
    return RunConfig(**values)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        key = next((k for k, v in _ALIASES.items() if v == f.name), f.name)
        lines.append(f"{key} = {getattr(cfg, f.name)!r}".replace("'", ""))
    return "\n".join(lines) + "\n"


def load_config(path, overrides: dict | None = None) -> RunConfig:
    text = ""
    if path:
        with open(path) as f:
            text = f.read()
    return parse_config(text, overrides)
