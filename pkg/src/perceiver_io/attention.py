"""The attention building block shared by encoder, processor and decoder.

A block is QKV attention between a query array and a key/value array,
wrapped GPT-2 style::

    X = Attn(layerNorm(x_q), layerNorm(x_kv))
    X = X + x_q                      # optional query residual
    X = X + MLP(layerNorm(X))

All arrays are ``[n, channels]`` or batched ``[batch, n, channels]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .layers import LayerNorm, Linear, MLP, Module, dropout
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int = 1
    qk_channels: int | None = None  # defaults to the query input width
    v_channels: int | None = None  # defaults to qk_channels
    output_channels: int | None = None  # defaults to the query input width
    mlp_hidden_ratio: float = 1.0
    use_query_residual: bool = True
    dropout_rate: float = 0.0
    layer_norm_eps: float = 1e-5
    approximate_gelu: bool = False


@dataclass(frozen=True)
class ResolvedAttention:
    """Concrete widths of one attention module."""

    q_channels: int
    kv_channels: int
    qk_channels: int
    v_channels: int
    output_channels: int
    mlp_hidden: int
    num_heads: int


def resolve(cfg: AttentionConfig, q_channels: int, kv_channels: int) -> ResolvedAttention:
    qk = cfg.qk_channels if cfg.qk_channels is not None else q_channels
    v = cfg.v_channels if cfg.v_channels is not None else qk
    out = cfg.output_channels if cfg.output_channels is not None else q_channels
    if cfg.num_heads < 1:
        raise ConfigError("num_heads must be positive")
    if qk % cfg.num_heads or v % cfg.num_heads:
        raise ConfigError(
            f"qk_channels={qk} and v_channels={v} must both be divisible by num_heads={cfg.num_heads}"
        )
    if cfg.use_query_residual and out != q_channels:
        raise ConfigError(
            f"query residual needs output_channels ({out}) == query channels ({q_channels})"
        )
    if not 0.0 <= cfg.dropout_rate < 1.0:
        raise ConfigError("dropout_rate must lie in [0, 1)")
    hidden = max(1, int(round(cfg.mlp_hidden_ratio * out)))
    return ResolvedAttention(q_channels, kv_channels, qk, v, out, hidden, cfg.num_heads)


def attention_mask(mask, kv_ndim: int) -> np.ndarray | None:
    """Reshape a boolean mask so it broadcasts against ``[..., heads, n, m]`` logits.

    A mask with one axis fewer than the key/value array marks valid kv
    elements (``[m]`` or ``[batch, m]``); a mask with as many axes is a full
    query-by-key mask (``[n, m]`` or ``[batch, n, m]``).
    """
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == kv_ndim - 1:
        return mask[..., None, None, :]
    if mask.ndim == kv_ndim:
        return mask[..., None, :, :]
    raise ValueError(f"mask with {mask.ndim} axes does not fit key/value input with {kv_ndim} axes")


class AttentionModule(Module):
    """Cross- or self-attention block with its layer norms and MLP."""

    def __init__(
        self,
        name: str,
        config: AttentionConfig,
        q_channels: int,
        kv_channels: int,
        rng: np.random.Generator,
    ):
        self.config = config
        self.dims = d = resolve(config, q_channels, kv_channels)
        self.q_norm = LayerNorm(f"{name}.q_norm", q_channels, config.layer_norm_eps)
        self.kv_norm = LayerNorm(f"{name}.kv_norm", kv_channels, config.layer_norm_eps)
        self.to_q = Linear(f"{name}.attn.q", q_channels, d.qk_channels, rng)
        # A key bias shifts every logit of a row equally, so softmax ignores it.
        self.to_k = Linear(f"{name}.attn.k", kv_channels, d.qk_channels, rng, bias=False)
        self.to_v = Linear(f"{name}.attn.v", kv_channels, d.v_channels, rng)
        self.to_out = Linear(f"{name}.attn.o", d.v_channels, d.output_channels, rng)
        self.mlp_norm = LayerNorm(f"{name}.mlp_norm", d.output_channels, config.layer_norm_eps)
        self.mlp = MLP(
            f"{name}.mlp",
            d.output_channels,
            d.mlp_hidden,
            rng,
            approximate_gelu=config.approximate_gelu,
            dropout_rate=config.dropout_rate,
        )

    def _split_heads(self, x: Tensor, transpose_last: bool = False) -> Tensor:
        *lead, n, c = x.shape
        h = self.dims.num_heads
        x = ops.reshape(x, (*lead, n, h, c // h))
        k = len(lead)
        axes = (*range(k), k + 1, k + 2, k) if transpose_last else (*range(k), k + 1, k, k + 2)
        return ops.transpose(x, axes)

    def qkv_attention(
        self,
        x_q: Tensor,
        x_kv: Tensor,
        mask=None,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Multi-head QKV attention (no norms, residuals or MLP).

        Per head: ``softmax(Q_h K_h^T / sqrt(F / heads)) V_h``; heads are
        concatenated and projected by the output layer.
        """
        _check_inputs(x_q, x_kv, self.dims)
        d = self.dims
        q = self._split_heads(self.to_q(x_q))  # [..., h, n, dq]
        k_t = self._split_heads(self.to_k(x_kv), transpose_last=True)  # [..., h, dq, m]
        v = self._split_heads(self.to_v(x_kv))  # [..., h, m, dv]
        q = ops.scale(q, 1.0 / math.sqrt(d.qk_channels // d.num_heads))
        weights = ops.softmax(ops.matmul(q, k_t), attention_mask(mask, x_kv.ndim))
        weights = dropout(weights, self.config.dropout_rate, rng)
        o = ops.matmul(weights, v)  # [..., h, n, dv]
        lead = o.shape[:-3]
        k = len(lead)
        o = ops.transpose(o, (*range(k), k + 1, k, k + 2))
        o = ops.reshape(o, (*lead, x_q.shape[-2], d.v_channels))
        return self.to_out(o)

    def __call__(
        self,
        x_q: Tensor,
        x_kv: Tensor,
        mask=None,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        x = self.qkv_attention(self.q_norm(x_q), self.kv_norm(x_kv), mask, rng)
        if self.config.use_query_residual:
            x = ops.add(x, x_q)
        return ops.add(x, self.mlp(self.mlp_norm(x), rng))


class SelfAttention(AttentionModule):
    """Attention block whose queries and keys/values are the same array."""

    def __init__(self, name: str, config: AttentionConfig, channels: int, rng: np.random.Generator):
        if not config.use_query_residual:
            raise ConfigError("self-attention blocks always use the query residual")
        super().__init__(name, config, channels, channels, rng)
        # One norm serves both roles since queries and keys/values coincide.
        del self.kv_norm
        self.norm = self.q_norm
        del self.q_norm

    def __call__(self, x: Tensor, mask=None, rng: np.random.Generator | None = None) -> Tensor:
        h = self.norm(x)
        y = ops.add(self.qkv_attention(h, h, mask, rng), x)
        return ops.add(y, self.mlp(self.mlp_norm(y), rng))


def _check_inputs(x_q: Tensor, x_kv: Tensor, d: ResolvedAttention) -> None:
    if x_q.shape[-1] != d.q_channels:
        raise ValueError(f"query input has {x_q.shape[-1]} channels, module expects {d.q_channels}")
    if x_kv.shape[-1] != d.kv_channels:
        raise ValueError(f"key/value input has {x_kv.shape[-1]} channels, module expects {d.kv_channels}")
    if x_q.ndim != x_kv.ndim or x_q.shape[:-2] != x_kv.shape[:-2]:
        raise ValueError(f"query {x_q.shape} and key/value {x_kv.shape} batch axes differ")
