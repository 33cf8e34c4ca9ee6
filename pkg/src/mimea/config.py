"""Run configuration: nested dataclasses, dotted-key overrides, config files."""

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .pmf import FAMILIES, MODALITIES, modality_key


@dataclass
class PMFConfig:
    lam: float = 0.1
    distribution: str = "beta"
    pivot: str = "s"
    detach_weights: bool = True
    kl_agg: str = "mean_clamped"


@dataclass
class OTMAConfig:
    epsilon: float = 0.05
    max_iters: int = 500
    tol: float = 1e-6
    consume: str = "replace"


@dataclass
class MCLConfig:
    tau: float = 0.1
    gamma: float = 0.8
    modalities: tuple = MODALITIES


@dataclass
class TrainConfig:
    dim: int = 32
    heads: int = 2
    attr_edges: bool = False
    lr: float = 5e-3
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    epochs: int = 200
    batch_size: int = 512
    seed: int = 0
    seed_ratio: float = 0.2
    iterative: bool = True
    R: int = 5
    M: int = 50
    patience: int = 0  # 0 disables early stopping
    eval_every: int = 10
    bidirectional: bool = False
    pmf: PMFConfig = field(default_factory=PMFConfig)
    otma: OTMAConfig = field(default_factory=OTMAConfig)
    mcl: MCLConfig = field(default_factory=MCLConfig)

    def validate(self):
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim={self.dim} must be a positive multiple of heads={self.heads}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if not 0 < self.seed_ratio < 1:
            raise ConfigError(f"seed_ratio must lie in (0, 1), got {self.seed_ratio}")
        if self.iterative and (self.R < 1 or self.M < self.R):
            raise ConfigError(f"iterative training needs R >= 1 and M >= R, got R={self.R} M={self.M}")
        if self.patience < 0 or self.eval_every < 1:
            raise ConfigError("patience must be >= 0 and eval_every >= 1")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.pmf.distribution not in FAMILIES:
            raise ConfigError(f"unknown distribution {self.pmf.distribution!r}")
        if self.pmf.kl_agg not in ("mean_clamped", "raw_sum"):
            raise ConfigError(f"unknown kl_agg {self.pmf.kl_agg!r}")
        self.pmf.pivot = modality_key(self.pmf.pivot)
        if self.otma.consume not in ("replace", "average", "off"):
            raise ConfigError(f"unknown otma.consume {self.otma.consume!r}")
        if not self.otma.epsilon > 0 or self.otma.max_iters < 1 or not self.otma.tol > 0:
            raise ConfigError("otma.epsilon, otma.max_iters and otma.tol must be positive")
        if not self.mcl.tau > 0 or self.mcl.gamma < 0:
            raise ConfigError("mcl.tau must be positive and mcl.gamma nonnegative")
        mods = tuple(k for k in MODALITIES if k in {modality_key(m) for m in self.mcl.modalities})
        if not mods:
            raise ConfigError("at least one modality is required")
        self.mcl.modalities = mods
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["mcl"]["modalities"] = list(d["mcl"]["modalities"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        subs = {"pmf": PMFConfig, "otma": OTMAConfig, "mcl": MCLConfig}
        for key, sub in subs.items():
            d[key] = sub(**d.get(key, {}))
        d["mcl"].modalities = tuple(d["mcl"].modalities)
        return cls(**d).validate()

    def digest(self):
        """sha256 of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).digest()


# config-file spelling -> attribute name
_ALIASES = {"pmf.lambda": "pmf.lam"}


def _coerce(current, raw, key):
    if isinstance(current, bool):
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(current, tuple):
        if isinstance(raw, str):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return tuple(raw)
    try:
        return type(current)(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(current).__name__}") from None


def set_key(cfg, key, value):
    """Set a dotted key such as ``otma.epsilon`` or ``lr``."""
    key = _ALIASES.get(key, key)
    parts = key.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not hasattr(obj, part) or not dataclasses.is_dataclass(getattr(obj, part)):
            raise ConfigError(f"unknown config section {part!r} in {key!r}")
        obj = getattr(obj, part)
    # config files lowercase keys, so R and M are matched case-insensitively
    names = {f.name.lower(): f.name for f in dataclasses.fields(obj)}
    name = names.get(parts[-1].lower())
    if name is None:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(obj, name, _coerce(getattr(obj, name), value, key))


def apply_overrides(cfg, overrides):
    for key, value in overrides.items():
        set_key(cfg, key, value)
    return cfg


def read_config_file(path):
    """Flat {dotted.key: raw string} from an INI-style file.

    Keys under ``[train]`` (or before any section) are top-level.
    """
    parser = configparser.ConfigParser(strict=False)
    try:
        with open(path) as fh:
            parser.read_string("[train]\n" + fh.read())
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            out[key if section == "train" else f"{section}.{key}"] = value
    return out


FULL_SCALE_DEFAULTS = {"dim": 400, "lr": 5e-4, "batch_size": 512, "epochs": 1000,
                  "mcl.tau": 0.1, "mcl.gamma": 0.8, "pmf.lambda": 0.1}
