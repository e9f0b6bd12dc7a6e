"""Run configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Lists are comma separated.
Unknown keys and malformed values raise ``ConfigError`` naming the field.
``profile`` selects a preset (desk default or one of the full-scale
benchmark profiles); keys given explicitly in the file override it.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adapt import PROFILES, LossWeights
from .datagen import ShiftSpec
from .supernet import ArchSpec, ConfigSpace


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    profile: str = "desk"
    widths: tuple[float, ...] = (1.0, 0.75, 0.5)
    resolutions: tuple[int, ...] = (32, 24, 16)
    bitwidths: tuple[int, ...] = (8, 6, 4)
    arch: str = "desk"
    num_classes: int = 4
    lambda_cls: float = 1.0
    lambda_rd: float = 1.0
    lambda_pl: float = 1.0
    lambda_im: float = 1.0
    tau_pl: float = 0.9
    disable_im: bool = False
    ema_momentum: float = 0.96
    warmup_epochs: int = 6
    adapt_epochs: int = 6
    batch_size: int = 64
    lr: float = 0.05
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    num_random: int = 2
    seed: int = 0
    mode: str = "sandwichq"
    single_bit: int = 0
    paper_literal_unsigned: bool = False
    strict: bool = False
    budget_intervals: int = 8
    budget_axis: str = "macs"
    selection_data: str = "target"
    source_data: str = ""
    target_data: str = ""
    target_eval_data: str = ""
    init_weights: str = ""
    data_seed: int = 0
    n_source: int = 2000
    n_target: int = 2000
    shift_brightness: float = 0.3
    shift_contrast: float = 1.0
    shift_noise: float = 0.1
    shift_texture_amplitude: float = 0.0
    shift_texture_frequency: float = 0.0
    max_steps: int = 0
    eval_every: int = 0

    # ------------------------------------------------------------ derived
    def space(self) -> ConfigSpace:
        q = (self.single_bit,) if self.single_bit else self.bitwidths
        return ConfigSpace(self.widths, self.resolutions, q)

    def arch_spec(self) -> ArchSpec:
        return ArchSpec.desk(self.num_classes)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_cls, self.lambda_rd, self.lambda_pl,
                           0.0 if self.disable_im else self.lambda_im, self.tau_pl)

    def shift(self) -> ShiftSpec:
        return ShiftSpec((self.shift_brightness,) * 3, self.shift_contrast, self.shift_noise,
                         self.shift_texture_amplitude, self.shift_texture_frequency)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("widths", "resolutions", "bitwidths"):
            d[k] = list(d[k])
        return d


_CHOICES = {
    "profile": ("desk", *PROFILES),
    "arch": ("desk",),
    "optimizer": ("sgd", "adam"),
    "mode": ("sandwichq", "per_bit_sandwich"),
    "budget_axis": ("macs", "bitops"),
    "selection_data": ("target", "heldout"),
}
_FULL_SCALE_SPACE = {"widths": (1.0, 0.86, 0.73, 0.60), "resolutions": (224, 192, 160, 128)}


def _parse_bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _convert(f, text: str):
    kind = f.type if isinstance(f.type, str) else str(f.type)
    if kind.startswith("tuple[float"):
        return tuple(float(x) for x in text.split(",") if x.strip())
    if kind.startswith("tuple[int"):
        return tuple(int(x) for x in text.split(",") if x.strip())
    if kind == "bool":
        return _parse_bool(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def _validate(cfg: RunConfig) -> None:
    for key, allowed in _CHOICES.items():
        if getattr(cfg, key) not in allowed:
            raise ConfigError(key, f"must be one of {', '.join(allowed)}; got {getattr(cfg, key)!r}")
    positive = ("num_classes", "batch_size", "budget_intervals", "n_source", "n_target")
    for key in positive:
        if getattr(cfg, key) < 1:
            raise ConfigError(key, "must be >= 1")
    for key in ("warmup_epochs", "adapt_epochs", "num_random", "max_steps", "eval_every", "single_bit",
                "lambda_cls", "lambda_rd", "lambda_pl", "lambda_im", "weight_decay", "momentum",
                "shift_texture_frequency"):
        if getattr(cfg, key) < 0:
            raise ConfigError(key, "must be non-negative")
    if not cfg.lr > 0:
        raise ConfigError("lr", "must be positive")
    if not 0.0 < cfg.tau_pl < 1.0:
        raise ConfigError("tau_pl", "must lie in (0, 1)")
    if not 0.0 < cfg.ema_momentum <= 1.0:
        raise ConfigError("ema_momentum", "must lie in (0, 1]")
    if cfg.single_bit and cfg.single_bit < 2:
        raise ConfigError("single_bit", "must be 0 (off) or a bit-width >= 2")
    if cfg.num_classes < 2:
        raise ConfigError("num_classes", "must be >= 2")
    for key in ("widths", "resolutions", "bitwidths"):
        vals = getattr(cfg, key)
        if not vals:
            raise ConfigError(key, "must list at least one value")
        if len(set(vals)) != len(vals):
            raise ConfigError(key, f"has duplicate entries: {', '.join(map(str, vals))}")
        if any(v <= 0 for v in vals):
            raise ConfigError(key, "entries must be positive")
    if 1.0 not in cfg.widths or max(cfg.widths) > 1.0:
        raise ConfigError("widths", "must lie in (0, 1] and include 1.0")
    if any(q < 2 or q > 32 for q in cfg.bitwidths):
        raise ConfigError("bitwidths", "entries must lie in [2, 32]")
    if cfg.single_bit > 32:
        raise ConfigError("single_bit", "must be at most 32")
    shift_fields = {"brightness": "shift_brightness", "contrast": "shift_contrast", "noise": "shift_noise",
                    "texture": "shift_texture_amplitude"}
    try:
        cfg.shift()
    except ValueError as e:
        key = next((v for k, v in shift_fields.items() if k in str(e)), "shift_noise")
        raise ConfigError(key, str(e)) from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    by_name = {f.name: f for f in fields(RunConfig)}
    given: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value' in {source}, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in by_name:
            raise ConfigError(key, f"unknown key (line {lineno} of {source})")
        if key in given:
            raise ConfigError(key, f"given twice (line {lineno} of {source})")
        try:
            given[key] = _convert(by_name[key], value)
        except ValueError as e:
            raise ConfigError(key, f"bad value {value!r}: {e}") from None

    cfg = RunConfig()
    profile = given.get("profile", "desk")
    if profile not in _CHOICES["profile"]:
        raise ConfigError("profile", f"must be one of {', '.join(_CHOICES['profile'])}; got {profile!r}")
    if profile != "desk":
        for k, v in {**_FULL_SCALE_SPACE, **PROFILES[profile]}.items():
            setattr(cfg, k, v)
    for k, v in given.items():
        setattr(cfg, k, v)

    seed_env = os.environ.get("RTFQ_SEED")
    if seed_env is not None:
        try:
            cfg.seed = int(seed_env)
        except ValueError:
            raise ConfigError("seed", f"RTFQ_SEED must be an integer, got {seed_env!r}") from None
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError("config", f"cannot read {p}: {e.strerror}") from None
    return parse_config(text, str(p))


def format_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
