"""Transformer encoders for the two complementary streams.

``single_stream_encode`` runs self-attention over the concatenated
[text; visual] sequence. ``dual_stream_encode`` keeps the modalities apart
with per-modality self-attention, then couples them with co-attention
blocks in which each side queries the other.

Blocks are pre-norm residual. Masked key positions get an additive
``MASK_SENTINEL`` before the softmax, and masked query rows receive no
update, so nothing flows into or out of a masked position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .representation import Linear
from .tensor import MASK_SENTINEL, Tensor, concat, gelu, layer_norm, mul, softmax, tanh


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, hidden: int) -> "LayerNormParams":
        return cls(Tensor(np.ones(hidden), requires_grad=True), Tensor(np.zeros(hidden), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


@dataclass
class AttentionBlockParams:
    """One attention + feed-forward block.

    ``ln_kv`` is only present for cross-modal blocks, where keys and values
    come from the other stream and get their own normalisation.
    """

    heads: int
    ln1: LayerNormParams
    query: Linear
    key: Linear
    value: Linear
    output: Linear
    ln2: LayerNormParams
    ff_in: Linear
    ff_out: Linear
    ln_kv: LayerNormParams | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int, heads: int, cross: bool = False,
             std: float = 0.02) -> "AttentionBlockParams":
        if hidden % heads:
            raise DimensionError(f"hidden size {hidden} not divisible by {heads} heads")
        return cls(
            heads=heads,
            ln1=LayerNormParams.init(hidden),
            query=Linear.init(rng, hidden, hidden, std),
            # no key bias: softmax is invariant to it, so it would never train
            key=Linear.init(rng, hidden, hidden, std, bias=False),
            value=Linear.init(rng, hidden, hidden, std),
            output=Linear.init(rng, hidden, hidden, std),
            ln2=LayerNormParams.init(hidden),
            ff_in=Linear.init(rng, hidden, 4 * hidden, std),
            ff_out=Linear.init(rng, 4 * hidden, hidden, std),
            ln_kv=LayerNormParams.init(hidden) if cross else None,
        )


@dataclass
class CoAttentionParams:
    text: AttentionBlockParams
    visual: AttentionBlockParams


@dataclass
class StreamOutput:
    text_hidden: Tensor
    visual_hidden: Tensor
    pooled: Tensor


def _check_mask(mask: np.ndarray, what: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if np.any(mask.sum(axis=-1) < 1):
        raise ContractError(f"{what} has a sequence with every position masked")
    return mask


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, s, h = x.shape
    return x.reshape(tuple(lead) + (s, heads, h // heads)).swapaxes(-2, -3)


def multi_head_attention(queries_from: Tensor, keys_from: Tensor, key_mask: np.ndarray,
                         p: AttentionBlockParams) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention; returns the projected output and the weights."""
    heads = p.heads
    q = _split_heads(p.query(queries_from), heads)
    k = _split_heads(p.key(keys_from), heads)
    v = _split_heads(p.value(keys_from), heads)
    d = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    bias = (1.0 - np.asarray(key_mask, dtype=np.float64)) * MASK_SENTINEL
    weights = softmax(scores + bias[..., None, None, :], axis=-1)
    ctx = (weights @ v).swapaxes(-2, -3)
    *lead, s, _, _ = ctx.shape
    merged = ctx.reshape(tuple(lead) + (s, heads * d))
    return p.output(merged), weights.data


def _feed_forward(x: Tensor, qmask: np.ndarray, p: AttentionBlockParams) -> Tensor:
    h = p.ff_out(gelu(p.ff_in(p.ln2(x))))
    return x + mul(h, qmask)


def self_attention_block(x: Tensor, mask, p: AttentionBlockParams) -> Tensor:
    mask = _check_mask(mask, "self-attention input")
    qmask = mask[..., None]
    h = p.ln1(x)
    attn, _ = multi_head_attention(h, h, mask, p)
    x = x + mul(attn, qmask)
    return _feed_forward(x, qmask, p)


def co_attention_block(x: Tensor, y: Tensor, x_mask, y_mask, p: CoAttentionParams) -> tuple[Tensor, Tensor]:
    """Each stream queries the other; both directions read the pre-update inputs."""
    x_mask = _check_mask(x_mask, "co-attention text input")
    y_mask = _check_mask(y_mask, "co-attention visual input")
    x_attn, _ = multi_head_attention(p.text.ln1(x), p.text.ln_kv(y), y_mask, p.text)
    y_attn, _ = multi_head_attention(p.visual.ln1(y), p.visual.ln_kv(x), x_mask, p.visual)
    x_qmask, y_qmask = x_mask[..., None], y_mask[..., None]
    x_new = _feed_forward(x + mul(x_attn, x_qmask), x_qmask, p.text)
    y_new = _feed_forward(y + mul(y_attn, y_qmask), y_qmask, p.visual)
    return x_new, y_new


@dataclass
class SingleStreamParams:
    blocks: list[AttentionBlockParams]
    pool: Linear

    @classmethod
    def init(cls, rng, hidden: int, heads: int, layers: int, std: float = 0.02) -> "SingleStreamParams":
        return cls([AttentionBlockParams.init(rng, hidden, heads, std=std) for _ in range(layers)],
                   Linear.init(rng, hidden, hidden, std))


@dataclass
class DualStreamParams:
    text_blocks: list[AttentionBlockParams]
    visual_blocks: list[AttentionBlockParams]
    co_blocks: list[CoAttentionParams]
    text_pool: Linear
    visual_pool: Linear

    @classmethod
    def init(cls, rng, hidden: int, heads: int, text_layers: int, visual_layers: int,
             co_layers: int, std: float = 0.02) -> "DualStreamParams":
        def block(cross=False):
            return AttentionBlockParams.init(rng, hidden, heads, cross=cross, std=std)

        return cls(
            text_blocks=[block() for _ in range(text_layers)],
            visual_blocks=[block() for _ in range(visual_layers)],
            co_blocks=[CoAttentionParams(block(True), block(True)) for _ in range(co_layers)],
            text_pool=Linear.init(rng, hidden, hidden, std),
            visual_pool=Linear.init(rng, hidden, hidden, std),
        )


def single_stream_encode(text: Tensor, visual: Tensor, text_mask, roi_mask,
                         params: SingleStreamParams) -> StreamOutput:
    t = text.shape[-2]
    mask = np.concatenate([np.asarray(text_mask, dtype=np.float64),
                           np.asarray(roi_mask, dtype=np.float64)], axis=-1)
    x = concat([text, visual], axis=-2)
    for block in params.blocks:
        x = self_attention_block(x, mask, block)
    pooled = tanh(params.pool(x[..., 0, :]))
    return StreamOutput(x[..., :t, :], x[..., t:, :], pooled)


def dual_stream_encode(text: Tensor, visual: Tensor, text_mask, roi_mask,
                       params: DualStreamParams) -> StreamOutput:
    text_mask = np.asarray(text_mask, dtype=np.float64)
    roi_mask = _check_mask(roi_mask, "visual stream")
    x, y = text, visual
    for block in params.text_blocks:
        x = self_attention_block(x, text_mask, block)
    for block in params.visual_blocks:
        y = self_attention_block(y, roi_mask, block)
    for block in params.co_blocks:
        x, y = co_attention_block(x, y, text_mask, roi_mask, block)
    text_pooled = tanh(params.text_pool(x[..., 0, :]))
    weights = roi_mask / roi_mask.sum(axis=-1, keepdims=True)
    visual_mean = mul(y, weights[..., None]).sum(axis=-2)
    visual_pooled = tanh(params.visual_pool(visual_mean))
    return StreamOutput(x, y, mul(text_pooled, visual_pooled))
