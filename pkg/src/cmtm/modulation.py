"""Cross-modality token modulation.

Appearance and motion feature maps are flattened into token matrices, tagged
with a fixed 2-D sinusoidal position code and a learnable per-modality
vector, optionally masked (training only), concatenated into one ``2N``-row
sequence and refined by a stack of dense pre-norm transformer blocks in
which every token attends to every token of both modalities.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .params import normal, ones, zeros
from .tensor import Tensor

INIT_STD = 0.02
LN_EPS = 1e-5


class Modality(str, enum.Enum):
    APPEARANCE = "appearance"
    MOTION = "motion"


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class CmtmConfig:
    channels: int = 64
    blocks: int = 2
    heads: int = 1
    mask_ratio: float = 0.4
    apply_to_app: bool = True
    apply_to_mo: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"channels={self.channels} must be a positive multiple of heads={self.heads}")
        if self.channels % 2:
            raise ConfigError(f"channels={self.channels} must be even for the positional code")
        if self.blocks < 1:
            raise ConfigError(f"blocks={self.blocks} must be at least 1")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio={self.mask_ratio} outside [0, 1)")


@dataclass
class TokenSequence:
    tokens: Tensor  # (..., N, C)
    modality: Modality
    spatial: Tuple[int, int]

    def __post_init__(self):
        h, w = self.spatial
        if self.tokens.shape[-2] != h * w:
            raise DimensionError(f"{self.tokens.shape[-2]} tokens do not tile a {h}x{w} grid")

    @property
    def n(self):
        return self.tokens.shape[-2]


@dataclass
class MaskPlan:
    """Retain mask for one stream and one iteration (``True`` keeps the token)."""

    retain_mask: np.ndarray
    masked_indices: np.ndarray
    ratio: float

    @property
    def n(self):
        return self.retain_mask.shape[0]

    @classmethod
    def identity(cls, n: int) -> "MaskPlan":
        return cls(np.ones(n, dtype=bool), np.zeros(0, dtype=np.int64), 0.0)


@dataclass
class BlockParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, dtype=np.float32) -> "BlockParams":
        c, hidden = channels, 4 * channels
        return cls(
            wq=normal(rng, (c, c), INIT_STD, dtype),
            wk=normal(rng, (c, c), INIT_STD, dtype),
            wv=normal(rng, (c, c), INIT_STD, dtype),
            wo=normal(rng, (c, c), INIT_STD, dtype),
            w1=normal(rng, (c, hidden), INIT_STD, dtype),
            b1=zeros((hidden,), dtype),
            w2=normal(rng, (hidden, c), INIT_STD, dtype),
            b2=zeros((c,), dtype),
            ln1_g=ones((c,), dtype),
            ln1_b=zeros((c,), dtype),
            ln2_g=ones((c,), dtype),
            ln2_b=zeros((c,), dtype),
        )


@dataclass
class CmtmParams:
    blocks: List[BlockParams]
    mask_token_app: Tensor
    mask_token_mo: Tensor
    modality_emb_app: Tensor
    modality_emb_mo: Tensor

    @classmethod
    def init(cls, config: CmtmConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = np.random.default_rng(config.seed) if rng is None else rng
        c = config.channels
        blocks = [BlockParams.init(c, rng, dtype) for _ in range(config.blocks)]
        return cls(
            blocks=blocks,
            mask_token_app=normal(rng, (c,), INIT_STD, dtype),
            mask_token_mo=normal(rng, (c,), INIT_STD, dtype),
            modality_emb_app=normal(rng, (c,), INIT_STD, dtype),
            modality_emb_mo=normal(rng, (c,), INIT_STD, dtype),
        )

    def mask_token(self, modality: Modality) -> Tensor:
        return self.mask_token_app if Modality(modality) is Modality.APPEARANCE else self.mask_token_mo

    def modality_embedding(self, modality: Modality) -> Tensor:
        return self.modality_emb_app if Modality(modality) is Modality.APPEARANCE else self.modality_emb_mo


class CmtmOutput(NamedTuple):
    app: Tensor
    mo: Tensor
    plan_app: Union[MaskPlan, List[MaskPlan], None]
    plan_mo: Union[MaskPlan, List[MaskPlan], None]


# ---------------------------------------------------------------------------
# tokens


def tokenize(feature: Tensor, modality: Modality) -> TokenSequence:
    """Flatten ``(..., H, W, C)`` row-major into ``(..., H*W, C)`` tokens."""
    feature = T.as_tensor(feature)
    if feature.ndim < 3 or min(feature.shape[-3:]) < 1:
        raise DimensionError(f"tokenize expects (..., H, W, C), got {feature.shape}")
    *lead, h, w, c = feature.shape
    return TokenSequence(T.reshape(feature, (*lead, h * w, c)), Modality(modality), (h, w))


def detokenize(seq: TokenSequence) -> Tensor:
    h, w = seq.spatial
    *lead, _, c = seq.tokens.shape
    return T.reshape(seq.tokens, (*lead, h, w, c))


@functools.lru_cache(maxsize=64)
def _sincos_table(h: int, w: int, c: int) -> np.ndarray:
    half = c // 2
    j = np.arange(half)
    freq = 1.0 / (10000.0 ** (2 * (j // 2) / half))
    use_sin = j % 2 == 0

    def encode(pos):
        angle = pos[:, None] * freq[None, :]
        return np.where(use_sin, np.sin(angle), np.cos(angle))

    rows, cols = np.divmod(np.arange(h * w), w)
    table = np.concatenate([encode(rows.astype(np.float64)), encode(cols.astype(np.float64))], axis=1)
    table.setflags(write=False)
    return table


def positional_embedding(h: int, w: int, c: int, dtype=np.float32) -> Tensor:
    """Fixed 2-D sin/cos table of shape ``(H*W, C)``.

    The first ``C/2`` channels encode the row index and the rest the column
    index; inside each half, channel ``2k`` is ``sin`` and ``2k+1`` is ``cos``
    at frequency ``10000**(-2k / (C/2))``.
    """
    if c % 2:
        raise ConfigError(f"positional embedding needs an even channel count, got {c}")
    if h < 1 or w < 1:
        raise ConfigError(f"positional embedding needs a non-empty grid, got {h}x{w}")
    return Tensor(_sincos_table(h, w, c), dtype=dtype)


# ---------------------------------------------------------------------------
# masking


def masked_count(n: int, ratio: float) -> int:
    # the nudge keeps e.g. 0.29 * 100 = 28.999999999999996 at 29
    return int(math.floor(ratio * n + 1e-9))


def sample_mask_plan(n: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Mask exactly ``floor(ratio * n)`` positions drawn uniformly without replacement."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio {ratio} outside [0, 1)")
    k = masked_count(n, ratio)
    masked = np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)
    retain = np.ones(n, dtype=bool)
    retain[masked] = False
    return MaskPlan(retain, masked, float(ratio))


def apply_token_mask(seq: TokenSequence, plan, params: CmtmParams) -> TokenSequence:
    """Replace masked rows by the modality's learnable mask token.

    ``plan`` is one :class:`MaskPlan`, or a list with one plan per leading
    batch element.
    """
    plans = plan if isinstance(plan, (list, tuple)) else [plan]
    for p in plans:
        if p.n != seq.n:
            raise DimensionError(f"mask plan covers {p.n} tokens, sequence has {seq.n}")
    if isinstance(plan, (list, tuple)):
        if seq.tokens.ndim != 3 or len(plans) != seq.tokens.shape[0]:
            raise DimensionError(f"{len(plans)} plans for token batch of shape {seq.tokens.shape}")
        retain = np.stack([p.retain_mask for p in plans])
    else:
        retain = plan.retain_mask
    token = params.mask_token(seq.modality)
    out = T.where(retain[..., None], seq.tokens, token)
    return TokenSequence(out, seq.modality, seq.spatial)


# ---------------------------------------------------------------------------
# attention


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, c = x.shape
    x = T.reshape(x, (*lead, n, heads, c // heads))
    k = len(lead)
    return T.transpose(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    k = len(lead)
    x = T.transpose(x, (*range(k), k + 1, k, k + 2))
    return T.reshape(x, (*lead, n, h * d))


def attention(x: Tensor, bp: BlockParams, heads: int = 1, return_weights: bool = False):
    """Dense softmax attention of every row over every row of ``x``.

    Returns the merged-head value mix ``Softmax(Q K^T / sqrt(C/h)) V`` before
    the output projection, optionally with the ``(..., h, rows, rows)`` weights.
    """
    c = x.shape[-1]
    if c % heads:
        raise ConfigError(f"channels={c} not divisible by heads={heads}")
    q = _split_heads(T.matmul(x, bp.wq), heads)
    k = _split_heads(T.matmul(x, bp.wk), heads)
    v = _split_heads(T.matmul(x, bp.wv), heads)
    logits = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(c // heads))
    weights = T.softmax_rows(logits)
    mixed = _merge_heads(T.matmul(weights, v))
    return (mixed, weights) if return_weights else mixed


def dense_transformer_block(tokens: Tensor, bp: BlockParams, heads: int = 1) -> Tensor:
    """Pre-norm residual block: ``x + MHA(LN(x))`` then ``x + FFN(LN(x))``."""
    if tokens.shape[-1] % heads:
        raise ConfigError(f"channels={tokens.shape[-1]} not divisible by heads={heads}")
    h = T.layer_norm(tokens, bp.ln1_g, bp.ln1_b, LN_EPS)
    x = T.add(tokens, T.matmul(attention(h, bp, heads), bp.wo))
    h = T.layer_norm(x, bp.ln2_g, bp.ln2_b, LN_EPS)
    h = T.add(T.matmul(T.gelu(T.add(T.matmul(h, bp.w1), bp.b1)), bp.w2), bp.b2)
    return T.add(x, h)


def block_attention(q_app, k_app, v_app, q_mo, k_mo, v_mo, heads: int = 1):
    """Attention written as the four modality blocks of the weight matrix.

    Works on plain 2-D arrays. Each row's softmax normaliser runs over both
    modalities' keys, then

        A_app = W[app,app] V_app + W[app,mo] V_mo
        A_mo  = W[mo,app]  V_app + W[mo,mo]  V_mo

    Returns ``(A_app, A_mo, weights)`` where ``weights`` maps each block name
    to an array of shape ``(heads, N, N)``.
    """
    arrays = [np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in
              (q_app, k_app, v_app, q_mo, k_mo, v_mo)]
    q_a, k_a, v_a, q_m, k_m, v_m = arrays
    n_app, n_mo, c = q_a.shape[0], q_m.shape[0], q_a.shape[1]
    for a in arrays:
        if a.ndim != 2 or a.shape[1] != c:
            raise DimensionError("block_attention needs 2-D operands sharing one channel count")
    if k_a.shape[0] != n_app or v_a.shape[0] != n_app or k_m.shape[0] != n_mo or v_m.shape[0] != n_mo:
        raise DimensionError("query/key/value row counts disagree within a modality")
    if c % heads:
        raise ConfigError(f"channels={c} not divisible by heads={heads}")
    d = c // heads
    scale = 1.0 / math.sqrt(d)
    out_app = np.zeros((n_app, c))
    out_mo = np.zeros((n_mo, c))
    blocks = {name: np.zeros((heads, n_app if name[0] == "app" else n_mo, n_app if name[1] == "app" else n_mo))
              for name in (("app", "app"), ("app", "mo"), ("mo", "app"), ("mo", "mo"))}
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for src, q, out in (("app", q_a, out_app), ("mo", q_m, out_mo)):
            s_app = q[:, sl] @ k_a[:, sl].T * scale
            s_mo = q[:, sl] @ k_m[:, sl].T * scale
            top = np.maximum(s_app.max(axis=1), s_mo.max(axis=1))[:, None]
            e_app, e_mo = np.exp(s_app - top), np.exp(s_mo - top)
            z = e_app.sum(axis=1, keepdims=True) + e_mo.sum(axis=1, keepdims=True)
            w_app, w_mo = e_app / z, e_mo / z
            blocks[(src, "app")][h] = w_app
            blocks[(src, "mo")][h] = w_mo
            out[:, sl] = w_app @ v_a[:, sl] + w_mo @ v_m[:, sl]
    return out_app, out_mo, blocks


def block_decomposition(tokens_app, tokens_mo, bp: BlockParams, heads: int = 1):
    """Attention sub-layer of a block computed stream-by-stream.

    Applies the block's first layer norm and the Q/K/V projections to each
    stream separately, then :func:`block_attention`. The result matches rows
    ``0..N`` and ``N..2N`` of :func:`attention` on ``LN(concat(app, mo))``.
    Reference path only; float64 numpy throughout.
    """
    a = np.asarray(tokens_app.data if isinstance(tokens_app, Tensor) else tokens_app, dtype=np.float64)
    m = np.asarray(tokens_mo.data if isinstance(tokens_mo, Tensor) else tokens_mo, dtype=np.float64)
    if a.ndim != 2 or m.ndim != 2 or a.shape != m.shape:
        raise DimensionError(f"block_decomposition needs equal N x C streams, got {a.shape} and {m.shape}")
    g, b = bp.ln1_g.data.astype(np.float64), bp.ln1_b.data.astype(np.float64)

    def norm(x):
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(var + LN_EPS) * g + b

    wq, wk, wv = (w.data.astype(np.float64) for w in (bp.wq, bp.wk, bp.wv))
    ha, hm = norm(a), norm(m)
    out_app, out_mo, _ = block_attention(ha @ wq, ha @ wk, ha @ wv, hm @ wq, hm @ wk, hm @ wv, heads)
    return out_app, out_mo


# ---------------------------------------------------------------------------
# full module


def embed(seq: TokenSequence, params: CmtmParams) -> TokenSequence:
    h, w = seq.spatial
    pos = positional_embedding(h, w, seq.tokens.shape[-1], dtype=seq.tokens.dtype)
    tokens = T.add(T.add(seq.tokens, pos), params.modality_embedding(seq.modality))
    return TokenSequence(tokens, seq.modality, seq.spatial)


def _plans_for(n: int, batch: Optional[int], ratio: float, rng):
    if batch is None:
        return sample_mask_plan(n, ratio, rng)
    return [sample_mask_plan(n, ratio, rng) for _ in range(batch)]


def cmtm_forward(
    f_app: Tensor,
    f_mo: Tensor,
    config: CmtmConfig,
    params: CmtmParams,
    mode: Union[Mode, str] = Mode.EVAL,
    rng: Optional[np.random.Generator] = None,
) -> CmtmOutput:
    """Modulate a pair of ``(H, W, C)`` (or ``(B, H, W, C)``) feature maps.

    In train mode each stream whose toggle is on gets a fresh mask plan (one
    per batch element); eval mode never touches ``rng``. Both streams always
    take part in attention.
    """
    mode = Mode(mode)
    f_app, f_mo = T.as_tensor(f_app), T.as_tensor(f_mo)
    if f_app.shape != f_mo.shape:
        raise DimensionError(f"stream shapes differ: {f_app.shape} vs {f_mo.shape}")
    if f_app.shape[-1] != config.channels:
        raise DimensionError(f"features have {f_app.shape[-1]} channels, config expects {config.channels}")
    if len(params.blocks) != config.blocks:
        raise ConfigError(f"params hold {len(params.blocks)} blocks, config expects {config.blocks}")
    batch = f_app.shape[0] if f_app.ndim == 4 else None

    seq_app = embed(tokenize(f_app, Modality.APPEARANCE), params)
    seq_mo = embed(tokenize(f_mo, Modality.MOTION), params)
    plan_app = plan_mo = None
    if mode is Mode.TRAIN:
        if rng is None:
            raise ConfigError("train mode needs an explicit rng")
        if config.apply_to_app:
            plan_app = _plans_for(seq_app.n, batch, config.mask_ratio, rng)
            seq_app = apply_token_mask(seq_app, plan_app, params)
        if config.apply_to_mo:
            plan_mo = _plans_for(seq_mo.n, batch, config.mask_ratio, rng)
            seq_mo = apply_token_mask(seq_mo, plan_mo, params)

    x = T.concat_rows(seq_app.tokens, seq_mo.tokens)
    for bp in params.blocks:
        x = dense_transformer_block(x, bp, config.heads)
    out_app, out_mo = T.split_rows(x, seq_app.n)
    return CmtmOutput(
        detokenize(TokenSequence(out_app, Modality.APPEARANCE, seq_app.spatial)),
        detokenize(TokenSequence(out_mo, Modality.MOTION, seq_mo.spatial)),
        plan_app,
        plan_mo,
    )
