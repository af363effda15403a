"""Flat ``key=value`` pipeline configuration with strict key checking."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .can_codec import ContractError


class ConfigError(ContractError):
    pass


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "out"
    # decoding and instances
    trace: str = ""
    layout: str = "plain"
    catalog: str = ""
    byte_order: str = "intel"
    rate: int = 10
    window: int = 10
    stride: int = 1
    # injection and split
    fraction_attacked: float = 0.5
    split: str = "0.8,0.1,0.1"
    # detector
    optimizer: str = "adam"
    lr: float = 0.0  # 0 selects the optimizer's default
    epochs: int = 50
    batch_size: int = 32
    hidden: int = 128
    # attacks
    attacks: str = "fgsm-l2,fgsm-linf,bim-l2,bim-linf,deepfool,deepfool_variant"
    epsilon: float = 13.0
    bim_iterations: int = 20
    deepfool_iterations: int = 50
    overshoot: float = 0.02
    kappa: float = 0.5
    alpha_clip: float = 0.95
    distortion_subset: str = "all"
    physical_units: bool = False
    # retraining
    adv_iterations: int = 10
    adv_draw_size: int = 200
    adv_epochs: int = 30
    adv_threshold: float = 0.5
    adv_attack: str = "fgsm-l2"
    adv_selective: bool = True
    adv_patience: int = 3
    defense: str = "fgsm-l2"
    # simulation
    scenario: str = ""

    def __post_init__(self):
        if self.rate < 1 or self.window < 1 or self.stride < 1:
            raise ConfigError("rate, window and stride must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.hidden < 1:
            raise ConfigError("epochs, batch_size and hidden must be positive")
        if self.distortion_subset not in ("all", "successful"):
            raise ConfigError("distortion_subset must be all or successful")
        self.ratios  # validates

    @property
    def ratios(self) -> tuple[float, float, float]:
        try:
            parts = tuple(float(x) for x in self.split.split(","))
        except ValueError:
            raise ConfigError(f"split {self.split!r} is not three comma-separated numbers") from None
        if len(parts) != 3:
            raise ConfigError("split needs exactly three ratios")
        return parts

    @property
    def attack_list(self) -> list[str]:
        return [a.strip() for a in self.attacks.split(",") if a.strip()]

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    try:
        return type(default)(raw.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_pairs(lines, source: str = "config") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"{source} line {lineno}: expected key=value")
        pairs[key.strip()] = val.strip()
    return pairs


def resolve(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    """Defaults, then the config file, then ``overrides``; unknown keys are errors."""
    pairs: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        pairs.update(parse_pairs(p.read_text().splitlines(), str(p)))
    pairs.update(overrides or {})
    defaults = PipelineConfig()
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(pairs) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return PipelineConfig(**{k: _coerce(k, v, getattr(defaults, k)) for k, v in pairs.items()})
