"""Run configuration: a flat ``key=value`` file, overridable from the command line."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


PATH_FIELDS = ("data_dir", "run_dir")


@dataclass
class RunConfig:
    # fine-tuning hyperparameters
    learning_rate: float = 5e-6
    lr_scheduler: str = "cosine_with_restarts"
    lr_warmup_steps: int = 100
    gradient_accumulation_steps: int = 5
    resolution: int = 64
    use_ema: bool = False
    # run control
    seed: int = 0
    total_steps: int = 1000
    batch_size: int = 1
    num_restarts: int = 0
    checkpoint_every: int = 100
    # diffusion
    diffusion_T: int = 50
    guidance_scale: float = 3.0
    prompt_dropout: float = 0.5
    base_channels: int = 32
    groups: int = 8
    text_dim: int = 32
    # cyclegan
    lambda_cycle: float = 10.0
    cyclegan_lr: float = 2e-4
    cyclegan_channels: int = 16
    cyclegan_res_blocks: int = 4
    # data
    canny_low: float = 0.1
    canny_high: float = 0.2
    # evaluation
    fid_repeats: int = 10
    fid_samples: int = 64
    fid_reference: int = 0
    fid_single_image: bool = False
    # paths
    data_dir: str = "data"
    run_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.use_ema:
            raise ConfigError("use_ema=true is not supported (EMA is disabled for fine-tuning)")
        if self.lr_scheduler != "cosine_with_restarts":
            raise ConfigError(f"unsupported lr_scheduler {self.lr_scheduler!r}; only cosine_with_restarts")
        positive = ("resolution", "total_steps", "batch_size", "gradient_accumulation_steps", "diffusion_T",
                    "base_channels", "groups", "text_dim", "cyclegan_channels", "fid_repeats", "checkpoint_every")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("learning_rate", "cyclegan_lr", "lambda_cycle", "guidance_scale", "lr_warmup_steps",
                     "num_restarts", "fid_reference", "cyclegan_res_blocks"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.prompt_dropout <= 1.0:
            raise ConfigError("prompt_dropout must lie in [0, 1]")
        if not 0.0 <= self.canny_low <= self.canny_high <= 1.0:
            raise ConfigError("need 0 <= canny_low <= canny_high <= 1")
        if self.resolution % 4:
            raise ConfigError("resolution must be divisible by 4")

    def to_text(self, include_paths: bool = True) -> str:
        return "".join(
            f"{f.name}={_format(getattr(self, f.name))}\n"
            for f in fields(self)
            if include_paths or f.name not in PATH_FIELDS
        )

    def portable_dict(self) -> dict:
        """Every setting except filesystem locations."""
        return {k: v for k, v in dataclasses.asdict(self).items() if k not in PATH_FIELDS}

    def run_id(self) -> str:
        """Hash of the path-independent settings, so moved runs keep their id."""
        return hashlib.sha256(self.to_text(include_paths=False).encode()).hexdigest()[:12]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r} (expected {kind.__name__})") from None


_TYPES = {"float": float, "int": int, "bool": bool, "str": str}


def field_types() -> dict[str, type]:
    return {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(RunConfig)}


def parse_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    types = field_types()
    unknown = sorted(set(pairs) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, types[k], v) for k, v in pairs.items()}
    return dataclasses.replace(base or RunConfig(), **values)


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return parse_pairs(pairs, base)


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides``; later sources win."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_text(p.read_text(), cfg)
    if overrides:
        cfg = parse_pairs(overrides, cfg)
    return cfg
