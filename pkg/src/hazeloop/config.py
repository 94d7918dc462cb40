"""Flat key=value configuration with documented defaults.

Unknown keys are rejected; missing keys take the defaults below.  Lines
starting with '#' and blank lines are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError


def _channels(s):
    return tuple(int(c) for c in s.split(","))


@dataclass
class Config:
    data_manifest: str = ""
    data_out_dir: str = "data"
    haze_beta_min: float = 0.4
    haze_beta_max: float = 1.6
    haze_a_min: float = 0.7
    haze_a_max: float = 1.0
    model_channels: tuple = (16, 32, 64)
    train_stage: int = 1
    train_epochs: int = 30
    train_lr: float = 1e-4
    train_batch: int = 8
    train_seed: int = 0
    loss_lambda: float = 0.1
    loss_beta1: float = 0.1
    loss_beta2: float = 0.3
    loss_gamma: float = 0.01
    perceptual_kind: str = "toy"
    text_kind: str = "toy"
    loop_k_max: int = 1

    def validate(self):
        if self.loss_lambda < 0 or self.loss_gamma < 0:
            raise ConfigError("loss.lambda and loss.gamma must be >= 0")
        if not self.loss_beta1 < self.loss_beta2:
            raise ConfigError(
                f"loss.beta1 ({self.loss_beta1}) must be < loss.beta2 ({self.loss_beta2})"
            )
        if self.train_epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.train_stage not in (1, 2):
            raise ConfigError("train.stage must be 1 or 2")
        if self.loop_k_max < 1:
            raise ConfigError("loop.k_max must be >= 1")
        if self.haze_beta_min < 0 or self.haze_beta_min > self.haze_beta_max:
            raise ConfigError("haze.beta_min/max must satisfy 0 <= min <= max")
        if not (0 <= self.haze_a_min <= self.haze_a_max <= 1):
            raise ConfigError("haze.A_min/max must satisfy 0 <= min <= max <= 1")
        return self


# file key -> (attribute, parser)
_KEYS = {
    "data.manifest": ("data_manifest", str),
    "data.out_dir": ("data_out_dir", str),
    "haze.beta_min": ("haze_beta_min", float),
    "haze.beta_max": ("haze_beta_max", float),
    "haze.A_min": ("haze_a_min", float),
    "haze.A_max": ("haze_a_max", float),
    "model.channels": ("model_channels", _channels),
    "train.stage": ("train_stage", int),
    "train.epochs": ("train_epochs", int),
    "train.lr": ("train_lr", float),
    "train.batch": ("train_batch", int),
    "train.seed": ("train_seed", int),
    "loss.lambda": ("loss_lambda", float),
    "loss.beta1": ("loss_beta1", float),
    "loss.beta2": ("loss_beta2", float),
    "loss.gamma": ("loss_gamma", float),
    "perceptual.kind": ("perceptual_kind", str),
    "text.kind": ("text_kind", str),
    "loop.k_max": ("loop_k_max", int),
}

_ATTR_TO_KEY = {attr: key for key, (attr, _) in _KEYS.items()}


def parse_config(text: str) -> Config:
    cfg = Config()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        attr, parser = _KEYS[key]
        try:
            setattr(cfg, attr, parser(value))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return cfg.validate()


def load_config(path: str) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: Config) -> str:
    """Render the resolved config (defaults applied) as key=value lines."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{_ATTR_TO_KEY[f.name]} = {value}")
    return "\n".join(lines)
