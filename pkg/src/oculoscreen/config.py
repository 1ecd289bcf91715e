"""Central defaults and the layered configuration file.

Precedence: CLI flags override the config file, the config file overrides
the built-in defaults below. The file is plain JSON with optional sections;
unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .capture_protocol import QualityPolicy
from .classifier import TrainConfig
from .errors import ParseError
from .features import EncoderConfig
from .preprocess import DEFAULT_CELL_SIZE, DEFAULT_CROP_H, DEFAULT_CROP_W, GridSpec

_SECTIONS = {"grid", "encoder", "train", "crop", "quality_policy", "risk_tiers", "evaluate"}


@dataclass
class PipelineConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    quality: QualityPolicy = field(default_factory=QualityPolicy)
    crop_h: int = DEFAULT_CROP_H
    crop_w: int = DEFAULT_CROP_W
    cell_size: int = DEFAULT_CELL_SIZE
    k: int = 5
    risk_low: float = 0.2
    risk_high: float = 0.6


def load_pipeline_config(path: str | Path | None) -> PipelineConfig:
    """Built-in defaults, overlaid with the JSON config file if given."""
    cfg = PipelineConfig()
    if path is None:
        return cfg
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    unknown = set(data) - _SECTIONS
    if unknown:
        raise ParseError(f"{path}: unknown config sections {sorted(unknown)}")

    if "grid" in data:
        cfg.grid = GridSpec.from_dict(data["grid"])
    if "encoder" in data:
        cfg.encoder = EncoderConfig.from_dict(data["encoder"])
    if "train" in data:
        cfg.train = TrainConfig.from_dict(data["train"])
    if "quality_policy" in data:
        cfg.quality = QualityPolicy.from_dict(data["quality_policy"])
    if "crop" in data:
        crop = data["crop"]
        cfg.crop_h = int(crop.get("h", cfg.crop_h))
        cfg.crop_w = int(crop.get("w", cfg.crop_w))
        cfg.cell_size = int(crop.get("cell", cfg.cell_size))
    if "risk_tiers" in data:
        tiers = data["risk_tiers"]
        cfg.risk_low = float(tiers.get("low", cfg.risk_low))
        cfg.risk_high = float(tiers.get("high", cfg.risk_high))
    if "evaluate" in data:
        cfg.k = int(data["evaluate"].get("k", cfg.k))
    return cfg


def with_train_overrides(cfg: PipelineConfig, **overrides) -> PipelineConfig:
    """Apply non-None training flag overrides on top of a config."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    if updates:
        cfg.train = replace(cfg.train, **updates)
    return cfg
