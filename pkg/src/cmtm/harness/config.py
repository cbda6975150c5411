"""Run configuration and its flat ``key=value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

from ..errors import ConfigError, UsageError
from ..modulation import CmtmConfig
from ..segnet import SegNetConfig
from ..synthvid import SceneConfig


@dataclass
class RunConfig:
    # token modulation
    channels: int = 64
    blocks: int = 2
    heads: int = 1
    mask_ratio: float = 0.4
    apply_to_app: bool = True
    apply_to_mo: bool = True
    # network
    stage1: int = 16
    stage2: int = 32
    decoder_channels: int = 16
    # optimiser
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # data
    height: int = 32
    width: int = 32
    frames: int = 8
    train_sequences: int = 4
    eval_sequences: int = 2
    flow_max_mag: float = 4.0
    data_seed: int = 0
    # evaluation
    tol_px: int = 1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.train_sequences < 1 or self.eval_sequences < 0 or self.frames < 1:
            raise ConfigError("need at least one training sequence and one frame")
        if self.tol_px < 0:
            raise ConfigError("tol_px must be non-negative")
        self.cmtm_config()
        self.segnet_config()

    def cmtm_config(self) -> CmtmConfig:
        return CmtmConfig(self.channels, self.blocks, self.heads, self.mask_ratio,
                          self.apply_to_app, self.apply_to_mo, self.seed)

    def segnet_config(self) -> SegNetConfig:
        return SegNetConfig(self.stage1, self.stage2, self.decoder_channels, self.cmtm_config())

    def scene_config(self) -> SceneConfig:
        return SceneConfig(height=self.height, width=self.width, frames=self.frames,
                           flow_max_mag=self.flow_max_mag)

    def estimator_params(self) -> dict:
        return dict(
            channels=self.channels, blocks=self.blocks, heads=self.heads, mask_ratio=self.mask_ratio,
            apply_to_app=self.apply_to_app, apply_to_mo=self.apply_to_mo, stage1=self.stage1,
            stage2=self.stage2, decoder_channels=self.decoder_channels, learning_rate=self.lr,
            n_steps=self.steps, batch_size=self.batch_size, beta1=self.beta1, beta2=self.beta2,
            adam_eps=self.adam_eps, random_state=self.seed,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, text: str):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        return float(text)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {text!r} as {kind}") from None


def serialize(cfg: RunConfig) -> str:
    lines = ["# cmtm run configuration"]
    lines += [f"{f.name}={_format(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def parse(text: str) -> RunConfig:
    """Read ``key=value`` lines; ``#`` starts a comment; unset keys keep defaults."""
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise UsageError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise UsageError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(serialize(cfg), encoding="utf-8")
    return path


def tiny_config(**overrides) -> RunConfig:
    """Smallest network used by the gradient checker (8x8 inputs)."""
    base = dict(channels=8, blocks=2, heads=2, stage1=4, stage2=4, decoder_channels=4,
                height=8, width=8, frames=2, steps=0)
    base.update(overrides)
    return RunConfig(**base)
