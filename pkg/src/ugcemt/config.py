"""Experiment configuration and its flat ``key = value`` text form.

Nested groups are addressed with dotted keys (``sam.rho``, ``net.levels``,
``ablation.use_ca``, ``seeds.init``). Precedence when resolving: command-line
overrides > config file > defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .backbone import NetworkSpec
from .errors import ConfigurationError
from .sam import SamConfig

MODES = ("CR", "PLG", "SUP")


@dataclass
class Ablation:
    use_ewa: bool = True
    use_ca: bool = True
    use_ugm: bool = True
    mode: str = "CR"  # CR: consistency, PLG: hard pseudo labels, SUP: labeled data only


@dataclass
class Seeds:
    init: int = 0
    split: int = 0
    train: int = 0


@dataclass
class TrainConfig:
    labeled_fraction: float = 0.1
    batch_size: int = 4
    t_max: int = 6000
    ewa_beta: float = 0.99
    noise_sigma: float = 0.1
    patch_size: tuple = (32, 32, 16)
    fg_bias: float = 0.5
    eval_every: int = 0
    T_mc: int = 8
    ugm_per_step: bool = True  # phase 1: weight consistency by a fresh MC-dropout map each step
    ugm_recompute: bool = False  # phase 2: recompute maps each step instead of using persisted ones
    ugm_samples: bool = False  # phase 2: scale teacher input noise by normalised entropy
    ugm_weight_supervised: bool = False
    phase2_cold_start: bool = False
    seeds: Seeds = field(default_factory=Seeds)
    ablation: Ablation = field(default_factory=Ablation)
    sam: SamConfig = field(default_factory=SamConfig)
    net: NetworkSpec = field(default_factory=NetworkSpec)

    @property
    def labeled_bs(self) -> int:
        return self.batch_size // 2

    @property
    def unlabeled_bs(self) -> int:
        return self.batch_size - self.labeled_bs

    def validate(self) -> "TrainConfig":
        if not 0 < self.labeled_fraction <= 1:
            raise ConfigurationError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (labeled + unlabeled halves)")
        if self.t_max <= 0:
            raise ConfigurationError("t_max must be positive")
        if not 0 <= self.ewa_beta <= 1:
            raise ConfigurationError("ewa_beta must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.T_mc < 2:
            raise ConfigurationError("T_mc must be >= 2")
        if self.ablation.mode not in MODES:
            raise ConfigurationError(f"ablation.mode must be one of {MODES}")
        if self.ablation.mode == "PLG" and self.ablation.use_ugm:
            raise ConfigurationError("ablation.mode=PLG excludes ablation.use_ugm")
        if len(self.patch_size) != 3 or any(p % self.net.divisor for p in self.patch_size):
            raise ConfigurationError(f"patch_size {self.patch_size} must be 3 dims divisible by {self.net.divisor}")
        self.net.validate()
        self.sam.validate()
        return self


def _flatten(obj, prefix=""):
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = v
    return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in _flatten(cfg).items())


def _parse(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple) or (default is None and key.endswith("dropout_sites")):
            if raw.lower() == "none":
                return None
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if key.endswith("dropout_sites"):
                return tuple(items)
            return tuple(int(x) for x in items)
        return raw
    except ValueError:
        raise ConfigurationError(f"cannot parse {key} = {raw!r}") from None


def parse_pairs(text: str) -> dict:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def apply(cfg: TrainConfig, pairs: dict) -> TrainConfig:
    flat = _flatten(cfg)
    for key, raw in pairs.items():
        if key not in flat:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        value = _parse(raw, flat[key], key)
        *path, last = key.split(".")
        cfg = _replace_path(cfg, path, last, value)
    return cfg


def _replace_path(obj, path, last, value):
    if not path:
        return dataclasses.replace(obj, **{last: value})
    child = getattr(obj, path[0])
    return dataclasses.replace(obj, **{path[0]: _replace_path(child, path[1:], last, value)})


def resolve(file_text: str | None = None, overrides: dict | None = None, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base if base is not None else TrainConfig()
    if file_text:
        cfg = apply(cfg, parse_pairs(file_text))
    if overrides:
        cfg = apply(cfg, overrides)
    return cfg.validate()


def with_ablation(cfg: TrainConfig, **flags) -> TrainConfig:
    return dataclasses.replace(cfg, ablation=dataclasses.replace(cfg.ablation, **flags))


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(cfg, seeds=Seeds(init=seed, split=seed, train=seed))
