"""Differentiable primitives.

Every public function here computes its result with numpy and records itself
on the active tape; the matching backward rule sits directly below it.
There is no implicit broadcasting: elementwise binary ops need equal shapes,
the only exceptions being ``add_bias`` (a ``[c]`` vector over the last axis)
and ``matmul`` with a 2-D right operand, which applies the matrix to every
row of a batched left operand.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from .tensor import DTYPE, Node, ShapeError, Tensor, record, register_backward

MASK_SENTINEL = -1e9

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_TANH_C = math.sqrt(2.0 / math.pi)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return record("add", (a, b), a.data + b.data)


@register_backward("add")
def _add_bwd(node: Node, g: np.ndarray):
    return g, g


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return record("sub", (a, b), a.data - b.data)


@register_backward("sub")
def _sub_bwd(node: Node, g: np.ndarray):
    return g, -g


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    return record("mul", (a, b), a.data * b.data)


@register_backward("mul")
def _mul_bwd(node: Node, g: np.ndarray):
    a, b = node.inputs
    return g * b.data, g * a.data


def scale(a: Tensor, c: float) -> Tensor:
    return record("scale", (a,), a.data * c, c=c)


@register_backward("scale")
def _scale_bwd(node: Node, g: np.ndarray):
    return (g * node.saved["c"],)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` of shape ``[c]`` added along the last axis of ``x``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    return record("add_bias", (x, b), x.data + b.data)


@register_backward("add_bias")
def _add_bias_bwd(node: Node, g: np.ndarray):
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


def abs_(x: Tensor) -> Tensor:
    return record("abs", (x,), np.abs(x.data))


@register_backward("abs")
def _abs_bwd(node: Node, g: np.ndarray):
    return (g * np.sign(node.inputs[0].data),)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D ``[inner, cols]`` matrix applied to every row of
    ``a`` (``[..., rows, inner]``), or has exactly the same leading batch
    axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ for {a.shape} and {b.shape}")
    return record("matmul", (a, b), np.matmul(a.data, b.data))


@register_backward("matmul")
def _matmul_bwd(node: Node, g: np.ndarray):
    a, b = node.inputs
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
    gb = None
    if b.requires_grad:
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
    return ga, gb


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Position-wise affine map ``x @ w + b``."""
    y = matmul(x, w)
    return add_bias(y, b) if b is not None else y


# -- nonlinearities -----------------------------------------------------------


def gelu(x: Tensor, approximate: bool = False) -> Tensor:
    """GELU; exact erf form unless ``approximate`` selects the tanh variant."""
    v = x.data
    if approximate:
        inner = _TANH_C * (v + 0.044715 * v**3)
        t = np.tanh(inner)
        return record("gelu", (x,), 0.5 * v * (1.0 + t), t=t, approximate=True)
    cdf = 0.5 * (1.0 + erf(v / _SQRT_2))
    return record("gelu", (x,), v * cdf, cdf=cdf, approximate=False)


@register_backward("gelu")
def _gelu_bwd(node: Node, g: np.ndarray):
    v = node.inputs[0].data
    if node.saved["approximate"]:
        t = node.saved["t"]
        dinner = _TANH_C * (1.0 + 3 * 0.044715 * v**2)
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner
    else:
        d = node.saved["cdf"] + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v)
    return (g * d,)


def relu(x: Tensor) -> Tensor:
    return record("relu", (x,), np.maximum(x.data, 0.0))


@register_backward("relu")
def _relu_bwd(node: Node, g: np.ndarray):
    return (g * (node.inputs[0].data > 0),)


def tanh(x: Tensor) -> Tensor:
    return record("tanh", (x,), np.tanh(x.data))


@register_backward("tanh")
def _tanh_bwd(node: Node, g: np.ndarray):
    y = node.output.data
    return (g * (1.0 - y * y),)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is an optional boolean array (True = attend) broadcastable to
    ``x``; blocked entries get exactly zero weight. A row with every entry
    blocked raises ``ValueError``.
    """
    v = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.broadcast_to(mask, v.shape).any(axis=-1)):
            raise ValueError("softmax: a row has every entry masked (no valid attention targets)")
        v = np.where(mask, v, v + MASK_SENTINEL)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    return record("softmax", (x,), y)


@register_backward("softmax")
def _softmax_bwd(node: Node, g: np.ndarray):
    y = node.output.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def layer_norm(x: Tensor, scale_: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row of the last axis to zero mean / unit variance, then scale and shift."""
    c = x.shape[-1]
    if scale_.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: scale {scale_.shape}/bias {bias.shape} vs channels {c}")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return record("layer_norm", (x, scale_, bias), xhat * scale_.data + bias.data, xhat=xhat, rstd=rstd)


@register_backward("layer_norm")
def _layer_norm_bwd(node: Node, g: np.ndarray):
    x, s, _ = node.inputs
    xhat, rstd = node.saved["xhat"], node.saved["rstd"]
    c = x.shape[-1]
    gs = g.reshape(-1, c)
    dscale = (gs * xhat.reshape(-1, c)).sum(axis=0)
    dbias = gs.sum(axis=0)
    gx = None
    if x.requires_grad:
        dxhat = g * s.data
        gx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
    return gx, dscale, dbias


# -- structural ops -----------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size or any(s < 1 for s in shape):
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return record("reshape", (x,), x.data.reshape(shape))


@register_backward("reshape")
def _reshape_bwd(node: Node, g: np.ndarray):
    return (g.reshape(node.inputs[0].shape),)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    return record("transpose", (x,), np.transpose(x.data, axes), axes=axes)


@register_backward("transpose")
def _transpose_bwd(node: Node, g: np.ndarray):
    return (np.transpose(g, np.argsort(node.saved["axes"])),)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return record("concat", tensors, out, axis=ax, sizes=sizes)


@register_backward("concat")
def _concat_bwd(node: Node, g: np.ndarray):
    cuts = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.split(g, cuts, axis=node.saved["axis"]))


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    n = x.shape[ax]
    if not 0 <= start < stop <= n:
        raise IndexError(f"slice [{start}, {stop}) out of range for axis of size {n}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    return record("slice", (x,), x.data[tuple(idx)], index=tuple(idx))


@register_backward("slice")
def _slice_bwd(node: Node, g: np.ndarray):
    out = np.zeros(node.inputs[0].shape, dtype=DTYPE)
    out[node.saved["index"]] = g
    return (out,)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows (axis -2, the index dimension) of ``x``; duplicates allowed."""
    idx = np.asarray(indices, dtype=np.int64)
    n = x.shape[-2]
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_rows needs a non-empty 1-D index array")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    return record("gather_rows", (x,), np.take(x.data, idx, axis=-2), idx=idx)


@register_backward("gather_rows")
def _gather_rows_bwd(node: Node, g: np.ndarray):
    x = node.inputs[0]
    out = np.zeros(x.shape, dtype=DTYPE)
    moved = np.moveaxis(out, -2, 0)
    np.add.at(moved, node.saved["idx"], np.moveaxis(g, -2, 0))
    return (out,)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of a ``[vocab, c]`` table for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for vocabulary of {table.shape[0]}")
    return record("embedding_lookup", (table,), table.data[ids], ids=ids)


@register_backward("embedding_lookup")
def _embedding_bwd(node: Node, g: np.ndarray):
    table = node.inputs[0]
    out = np.zeros(table.shape, dtype=DTYPE)
    np.add.at(out, node.saved["ids"].reshape(-1), g.reshape(-1, table.shape[1]))
    return (out,)


def repeat_batch(x: Tensor, batch: int) -> Tensor:
    """Stack ``batch`` copies of ``x`` along a new leading axis."""
    return record("repeat_batch", (x,), np.repeat(x.data[None], batch, axis=0))


@register_backward("repeat_batch")
def _repeat_batch_bwd(node: Node, g: np.ndarray):
    return (g.sum(axis=0),)


# -- reductions ---------------------------------------------------------------


def sum_(x: Tensor) -> Tensor:
    return record("sum", (x,), np.asarray(x.data.sum()))


@register_backward("sum")
def _sum_bwd(node: Node, g: np.ndarray):
    return (np.full(node.inputs[0].shape, float(g), dtype=DTYPE),)


def mean(x: Tensor) -> Tensor:
    return record("mean", (x,), np.asarray(x.data.mean()))


@register_backward("mean")
def _mean_bwd(node: Node, g: np.ndarray):
    shape = node.inputs[0].shape
    return (np.full(shape, float(g) / int(np.prod(shape)), dtype=DTYPE),)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    """Mean over one axis, keeping it as an extent-1 axis."""
    ax = axis % x.ndim
    return record("mean_axis", (x,), x.data.mean(axis=ax, keepdims=True), axis=ax)


@register_backward("mean_axis")
def _mean_axis_bwd(node: Node, g: np.ndarray):
    shape = node.inputs[0].shape
    ax = node.saved["axis"]
    return (np.broadcast_to(g / shape[ax], shape).copy(),)


def sum_last(x: Tensor) -> Tensor:
    """Sum over the last axis (drops it)."""
    if x.ndim < 2:
        raise ShapeError("sum_last needs at least 2 axes")
    return record("sum_last", (x,), x.data.sum(axis=-1))


@register_backward("sum_last")
def _sum_last_bwd(node: Node, g: np.ndarray):
    return (np.broadcast_to(g[..., None], node.inputs[0].shape).copy(),)


# -- fused losses -------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row cross-entropy of integer ``targets`` under softmax(logits).

    Returns a tensor with the logits' shape minus the class axis.
    """
    t = np.asarray(targets, dtype=np.int64)
    v = logits.data
    if t.shape != v.shape[:-1]:
        raise ShapeError(f"targets {t.shape} do not match logits {v.shape}")
    k = v.shape[-1]
    if t.size and (t.min() < 0 or t.max() >= k):
        raise IndexError(f"target class out of range for {k} classes")
    m = v.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(v - m).sum(axis=-1))
    picked = np.take_along_axis(v, t[..., None], axis=-1)[..., 0]
    return record("softmax_xent", (logits,), lse - picked, targets=t)


@register_backward("softmax_xent")
def _softmax_xent_bwd(node: Node, g: np.ndarray):
    v = node.inputs[0].data
    p = np.exp(v - v.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    idx = node.saved["targets"][..., None]
    np.put_along_axis(p, idx, np.take_along_axis(p, idx, axis=-1) - 1.0, axis=-1)
    return (p * g[..., None],)


def sigmoid_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy against multi-hot ``targets`` in [0, 1]."""
    z = np.asarray(targets, dtype=DTYPE)
    v = logits.data
    if z.shape != v.shape:
        raise ShapeError(f"targets {z.shape} do not match logits {v.shape}")
    # max(v, 0) - v z + log(1 + exp(-|v|))
    out = np.maximum(v, 0.0) - v * z + np.log1p(np.exp(-np.abs(v)))
    return record("sigmoid_xent", (logits,), out, targets=z)


@register_backward("sigmoid_xent")
def _sigmoid_xent_bwd(node: Node, g: np.ndarray):
    v = node.inputs[0].data
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return (g * (sig - node.saved["targets"]),)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
