"""Toy two-stream encoder/decoder segmentation network.

Two identically shaped, independently parameterised encoders turn the RGB
frame and the flow image into three stride-2 feature stages. The deepest
stage of both streams goes through :func:`cmtm_forward`; the decoder then
walks back up, summing the two streams at every stage, and emits one logit
per input pixel.

The decoder is a minimal stand-in of the right topology, not a copy of any
published decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .modulation import CmtmConfig, CmtmParams, Mode, cmtm_forward
from .params import normal, zeros
from .tensor import Tensor

IN_CHANNELS = 3
STAGES = 3


@dataclass
class SegNetConfig:
    stage1: int = 16
    stage2: int = 32
    decoder_channels: int = 16
    cmtm: CmtmConfig = field(default_factory=CmtmConfig)

    def __post_init__(self):
        if min(self.stage1, self.stage2, self.decoder_channels) < 1:
            raise ConfigError("stage and decoder channel counts must be positive")

    @property
    def stage_channels(self):
        return (self.stage1, self.stage2, self.cmtm.channels)


@dataclass
class StageParams:
    w_merge: Tensor
    b_merge: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderParams:
    stages: List[StageParams]

    @classmethod
    def init(cls, channels, rng, dtype=np.float32):
        stages, c_in = [], IN_CHANNELS
        for c in channels:
            stages.append(StageParams(
                w_merge=_fan_in(rng, (4 * c_in, c), dtype),
                b_merge=zeros((c,), dtype),
                w1=_fan_in(rng, (c, c), dtype),
                b1=zeros((c,), dtype),
                w2=_fan_in(rng, (c, c), dtype, gain=0.5),
                b2=zeros((c,), dtype),
            ))
            c_in = c
        return cls(stages)


@dataclass
class Mlp:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, c, rng, dtype):
        return cls(_fan_in(rng, (c, c), dtype), zeros((c,), dtype),
                   _fan_in(rng, (c, c), dtype, gain=0.5), zeros((c,), dtype))

    def __call__(self, x):
        h = T.gelu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(x, T.add(T.matmul(h, self.w2), self.b2))


@dataclass
class DecoderParams:
    lateral_w: List[Tensor]
    lateral_b: List[Tensor]
    w_image: Tensor
    w_flow: Tensor
    b_input: Tensor
    refine: List[Mlp]
    w_out: Tensor
    b_out: Tensor

    @classmethod
    def init(cls, channels, width, rng, dtype=np.float32):
        return cls(
            lateral_w=[_fan_in(rng, (c, width), dtype) for c in channels],
            lateral_b=[zeros((width,), dtype) for _ in channels],
            w_image=_fan_in(rng, (IN_CHANNELS, width), dtype),
            w_flow=_fan_in(rng, (IN_CHANNELS, width), dtype),
            b_input=zeros((width,), dtype),
            refine=[Mlp.init(width, rng, dtype) for _ in range(STAGES)],
            w_out=_fan_in(rng, (width, 1), dtype),
            b_out=zeros((1,), dtype),
        )


@dataclass
class SegModel:
    encoder_app: EncoderParams
    encoder_mo: EncoderParams
    cmtm: CmtmParams
    decoder: DecoderParams

    @classmethod
    def init(cls, config: SegNetConfig, seed: Optional[int] = None, dtype=np.float32) -> "SegModel":
        rng = np.random.default_rng(config.cmtm.seed if seed is None else seed)
        chans = config.stage_channels
        return cls(
            encoder_app=EncoderParams.init(chans, rng, dtype),
            encoder_mo=EncoderParams.init(chans, rng, dtype),
            cmtm=CmtmParams.init(config.cmtm, rng, dtype),
            decoder=DecoderParams.init(chans, config.decoder_channels, rng, dtype),
        )


def _fan_in(rng, shape, dtype, gain=1.0):
    return normal(rng, shape, gain / math.sqrt(shape[0]), dtype)


def space_to_depth(x: Tensor) -> Tensor:
    """``(..., H, W, C)`` to ``(..., H/2, W/2, 4C)`` by folding 2x2 patches into channels."""
    *lead, h, w, c = x.shape
    k = len(lead)
    x = T.reshape(x, (*lead, h // 2, 2, w // 2, 2, c))
    x = T.transpose(x, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    return T.reshape(x, (*lead, h // 2, w // 2, 4 * c))


def encoder_forward(image, params: EncoderParams) -> List[Tensor]:
    """Three stride-2 patch-merge + pointwise-MLP stages; returns all three maps."""
    x = T.as_tensor(image)
    h, w = x.shape[-3], x.shape[-2]
    if h % 8 or w % 8 or h < 8 or w < 8:
        raise ConfigError(f"encoder input {h}x{w} must be a positive multiple of 8 on each side")
    if x.shape[-1] != IN_CHANNELS:
        raise DimensionError(f"encoder expects {IN_CHANNELS} input channels, got {x.shape[-1]}")
    stages = []
    for sp in params.stages:
        x = T.add(T.matmul(space_to_depth(x), sp.w_merge), sp.b_merge)
        hid = T.gelu(T.add(T.matmul(x, sp.w1), sp.b1))
        x = T.add(x, T.add(T.matmul(hid, sp.w2), sp.b2))
        stages.append(x)
    return stages


def decoder_forward(feats_app, feats_mo, image, flow_rgb, params: DecoderParams) -> Tensor:
    def lateral(k):
        return T.add(T.matmul(T.add(feats_app[k], feats_mo[k]), params.lateral_w[k]), params.lateral_b[k])

    y = lateral(2)
    for k in (1, 0):
        y = params.refine[k + 1](T.add(T.upsample_nearest(y, 2), lateral(k)))
    skip = T.add(T.add(T.matmul(image, params.w_image), T.matmul(flow_rgb, params.w_flow)), params.b_input)
    y = params.refine[0](T.add(T.upsample_nearest(y, 2), skip))
    logits = T.add(T.matmul(y, params.w_out), params.b_out)
    return T.reshape(logits, logits.shape[:-1])


def model_forward(
    image,
    flow_rgb,
    model: SegModel,
    config: SegNetConfig,
    mode: Union[Mode, str] = Mode.EVAL,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Mask logits of shape ``(H, W)`` (or ``(B, H, W)`` for batched input)."""
    dtype = model.decoder.w_out.dtype
    image = T.as_tensor(np.asarray(image.data if isinstance(image, Tensor) else image, dtype=dtype))
    flow_rgb = T.as_tensor(np.asarray(flow_rgb.data if isinstance(flow_rgb, Tensor) else flow_rgb, dtype=dtype))
    if image.shape != flow_rgb.shape:
        raise DimensionError(f"image {image.shape} and flow image {flow_rgb.shape} differ")
    feats_app = encoder_forward(image, model.encoder_app)
    feats_mo = encoder_forward(flow_rgb, model.encoder_mo)
    out = cmtm_forward(feats_app[2], feats_mo[2], config.cmtm, model.cmtm, mode, rng)
    feats_app = feats_app[:2] + [out.app]
    feats_mo = feats_mo[:2] + [out.mo]
    return decoder_forward(feats_app, feats_mo, image, flow_rgb, model.decoder)


def segmentation_loss(logits: Tensor, gt_mask) -> Tensor:
    """Mean binary cross-entropy with logits."""
    gt = np.asarray(gt_mask)
    if gt.shape != logits.shape:
        raise DimensionError(f"logits {logits.shape} vs mask {gt.shape}")
    return T.bce_with_logits(logits, gt.astype(logits.dtype))
