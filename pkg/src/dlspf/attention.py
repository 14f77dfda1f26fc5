"""Scaled dot-product attention, multi-head attention and a transformer encoder block.

All functions operate on ``(..., k, d)`` tensors: any leading axes are batch
axes, ``k`` is the context length and ``d`` the embedding dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Dense, DimensionError, LayerNorm, Module, Tensor, masked_fill, softmax

_MASKED = -1e30


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int
    num_heads: int = 1
    context_length: int = 1
    dropout_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.context_length < 1:
            raise ValueError("context_length must be >= 1")
        if self.dropout_rate != 0.0:
            # Dropout is not implemented; deterministic forward passes only.
            raise ValueError("dropout_rate must be 0")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def causal_mask(k_q: int, k_kv: int | None = None) -> np.ndarray:
    """Boolean mask, true where query ``i`` must NOT see key ``j`` (``j > i``)."""
    k_kv = k_q if k_kv is None else k_kv
    return np.triu(np.ones((k_q, k_kv), dtype=bool), k=1)


def attention_weights(q: Tensor, k: Tensor, causal: bool = False) -> Tensor:
    """Row-stochastic matrix ``softmax(q kᵀ / sqrt(d))``."""
    d = q.shape[-1]
    scores = (q @ k.transpose()) * (1.0 / np.sqrt(d))
    if causal:
        scores = masked_fill(scores, causal_mask(q.shape[-2], k.shape[-2]), _MASKED)
    return softmax(scores, axis=-1)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, causal_mask: bool = False) -> Tensor:
    """``softmax(q kᵀ / sqrt(d)) v``; with ``causal_mask`` row i only sees rows <= i.

    Raises:
        DimensionError: If feature widths of ``q`` and ``k`` differ or ``k`` and
            ``v`` have different lengths.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    return attention_weights(q, k, causal_mask) @ v


class MultiHeadAttention(Module):
    """H heads of linear query/key/value maps, concatenated and output-projected.

    Each head's ``F_q, F_k, F_v`` is a single linear map; the H maps are stored
    side by side in one ``d x d`` matrix per role.
    """

    def __init__(
        self,
        cfg: AttentionConfig,
        rng: np.random.Generator,
        zero_out: bool = False,
        dtype=np.float64,
    ) -> None:
        d = cfg.embed_dim
        self.num_heads = cfg.num_heads
        self.query = Dense(d, d, rng, dtype=dtype)
        self.key = Dense(d, d, rng, dtype=dtype)
        self.value = Dense(d, d, rng, dtype=dtype)
        self.out = Dense(d, d, rng, zero_init=zero_out, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        *lead, k, d = x.shape
        h = self.num_heads
        x = x.reshape(*lead, k, h, d // h)
        n = len(lead)
        return x.transpose(*range(n), n + 1, n, n + 2)

    def _merge(self, x: Tensor) -> Tensor:
        *lead, h, k, hd = x.shape
        n = len(lead)
        return x.transpose(*range(n), n + 1, n, n + 2).reshape(*lead, k, h * hd)

    def forward(self, x_q: Tensor, x_kv: Tensor | None = None, causal: bool = False) -> Tensor:
        x_kv = x_q if x_kv is None else x_kv
        if x_q.shape[-1] != x_kv.shape[-1]:
            raise DimensionError(f"query width {x_q.shape[-1]} != key/value width {x_kv.shape[-1]}")
        q = self._split(self.query(x_q))
        k = self._split(self.key(x_kv))
        v = self._split(self.value(x_kv))
        heads = scaled_dot_product_attention(q, k, v, causal)
        return self.out(self._merge(heads))


def multi_head_attention(
    x_q: Tensor, x_kv: Tensor, mha: MultiHeadAttention, causal: bool = False
) -> Tensor:
    """Functional alias: self-attention when ``x_q is x_kv``, else cross-attention."""
    return mha(x_q, x_kv, causal)


def positional_encoding(k: int, d: int) -> np.ndarray:
    """Sinusoidal encoding: channel 2i is ``sin(p / 10000^(2i/d))``, 2i+1 the cosine."""
    if k < 1 or d < 1:
        raise ValueError("k and d must be >= 1")
    pos = np.arange(k)[:, None]
    two_i = np.arange(0, d, 2)
    angle = pos / np.power(10000.0, two_i / d)
    pe = np.zeros((k, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


class EncoderBlock(Module):
    """Pre-norm transformer encoder block: ``x + MHA(LN(x))`` then ``+ FFN(LN(.))``."""

    def __init__(
        self,
        cfg: AttentionConfig,
        rng: np.random.Generator,
        ff_mult: int = 2,
        activation: str = "gelu",
        zero_out: bool = False,
        dtype=np.float64,
    ) -> None:
        d = cfg.embed_dim
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.attn = MultiHeadAttention(cfg, rng, zero_out=zero_out, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.ff1 = Dense(d, ff_mult * d, rng, activation=activation, dtype=dtype)
        self.ff2 = Dense(ff_mult * d, d, rng, zero_init=zero_out, dtype=dtype)

    def forward(self, x: Tensor, causal: bool = False) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, causal)
        return x + self.ff2(self.ff1(self.norm2(x)))


def encoder_block_forward(x: Tensor, block: EncoderBlock, causal: bool = False) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"encoder block expects (..., k, d), got {x.shape}")
    return block(x, causal)
