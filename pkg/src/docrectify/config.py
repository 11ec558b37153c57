"""Run configuration: named presets, ``key=value`` files and validation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ValidationError
from .mae import ModelConfig


@dataclass(frozen=True)
class RunConfig:
    H: int = 96
    W: int = 96
    P: int = 8
    D: int = 128
    heads: int = 0  # 0 selects max(2, D // 64)
    K1: int = 4
    K2: int = 2
    mask_ratio: float = 0.75
    max_lr: float = 1e-4
    warmup_fraction: float = 0.3
    epochs: int = 20
    batch: int = 8
    seed: int = 0
    count: int = 200  # samples written by gen-data
    corpus: str = ""
    freeze_encoder: bool = False
    from_scratch: bool = False
    preset: str = "desk"

    def validate(self) -> "RunConfig":
        for name in ("H", "W", "P", "D", "K1", "K2", "epochs", "batch"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.H % self.P or self.W % self.P:
            raise ValidationError(f"image {self.H}x{self.W} is not divisible by patch size {self.P}")
        if self.D % 4:
            raise ValidationError(f"width D={self.D} must be a multiple of 4 for the 2-D "
                                  "sin-cos positional table")
        heads = self.heads or max(2, self.D // 64)
        if self.D % heads:
            raise ValidationError(f"width D={self.D} is not divisible by {heads} heads")
        if not 0 <= self.mask_ratio < 1:
            raise ValidationError(f"mask ratio must lie in [0, 1), got {self.mask_ratio}")
        if not self.max_lr > 0:
            raise ValidationError(f"max_lr must be positive, got {self.max_lr}")
        if not 0 < self.warmup_fraction < 1:
            raise ValidationError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if self.count < 0:
            raise ValidationError(f"count must be non-negative, got {self.count}")
        return self

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.H, self.W, self.P, self.D, self.K1, self.K2, self.heads)

    def echo(self) -> dict:
        return asdict(self)


PRESETS = {
    "paper": RunConfig(H=288, W=288, P=16, D=512, K1=6, K2=4, mask_ratio=0.75, max_lr=1e-4,
                       epochs=65, batch=64, preset="paper"),
    "desk": RunConfig(),
}


def _coerce(kind, key: str, text: str):
    text = text.strip()
    if kind is bool or kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"{key}: expected a boolean, got {text!r}")
    try:
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
    except ValueError as exc:
        raise ValidationError(f"{key}: cannot parse {text!r}") from exc
    return text


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_text(text: str) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValidationError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(_FIELD_TYPES[key], key, value)
    return values


def resolve_config(preset: str | None = None, path=None, **overrides) -> RunConfig:
    """Preset, then config file, then explicit overrides (``None`` values skipped)."""
    file_values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    name = preset or file_values.pop("preset", None) or "desk"
    file_values.pop("preset", None)
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = replace(PRESETS[name], **file_values)
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.echo().items())


def write_config_echo(cfg: RunConfig, path) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")


def config_from_echo(echo: dict) -> RunConfig:
    known = {k: v for k, v in echo.items() if k in _FIELD_TYPES}
    return replace(RunConfig(), **known).validate()
