"""Losses, the LAMB optimizer, learning-rate schedules and metrics."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import ops
from .attention import ConfigError
from .preprocessing import IGNORE
from .tensor import Parameter, Tape, Tensor

LOSS_KINDS = ("softmax_ce", "l1", "multi_hot_ce")
PSNR_INF = float("inf")


# -- losses ------------------------------------------------------------------


@dataclass(frozen=True)
class LossTerm:
    """Loss on output rows ``[start, stop)``; ``None`` bounds mean the whole axis."""

    name: str
    kind: str
    weight: float = 1.0
    start: int | None = None
    stop: int | None = None


@dataclass(frozen=True)
class LossSpec:
    terms: tuple[LossTerm, ...]

    def validate(self, num_outputs: int | None = None) -> None:
        if not self.terms:
            raise ConfigError("a loss spec needs at least one term")
        for t in self.terms:
            if t.kind not in LOSS_KINDS:
                raise ConfigError(f"unknown loss kind {t.kind!r}; expected one of {LOSS_KINDS}")
            if t.weight < 0:
                raise ConfigError(f"loss weight for {t.name!r} is negative")
        if all(t.weight == 0 for t in self.terms):
            raise ConfigError("all loss weights are zero")
        if num_outputs is not None:
            spans = sorted(self.span(t, num_outputs) for t in self.terms)
            pos = 0
            for a, b in spans:
                if a != pos or b <= a:
                    raise ConfigError(f"loss ranges {spans} do not partition [0, {num_outputs})")
                pos = b
            if pos != num_outputs:
                raise ConfigError(f"loss ranges {spans} do not partition [0, {num_outputs})")

    @staticmethod
    def span(term: LossTerm, num_outputs: int) -> tuple[int, int]:
        return (0 if term.start is None else term.start, num_outputs if term.stop is None else term.stop)


def elementwise_loss(outputs: Tensor, targets, kind: str, valid=None) -> tuple[Tensor, np.ndarray]:
    """Unreduced loss and the matching weight array (0 where invalid).

    ``softmax_ce`` gives one value per row and treats ``IGNORE`` targets as
    invalid; ``l1`` and ``multi_hot_ce`` give one value per output channel.
    """
    if kind == "softmax_ce":
        t = np.asarray(targets, dtype=np.int64)
        w = (t != IGNORE).astype(np.float64)
        loss = ops.softmax_cross_entropy(outputs, np.where(t == IGNORE, 0, t))
    elif kind == "l1":
        t = np.asarray(targets, dtype=np.float64)
        loss = ops.abs_(ops.sub(outputs, Tensor(t)))
        w = np.ones(loss.shape)
    elif kind == "multi_hot_ce":
        loss = ops.sigmoid_cross_entropy(outputs, targets)
        w = np.ones(loss.shape)
    else:
        raise ConfigError(f"unknown loss kind {kind!r}")
    if valid is not None:
        w = w * np.broadcast_to(np.asarray(valid, dtype=np.float64).reshape(
            np.shape(valid) + (1,) * (w.ndim - np.ndim(valid))), w.shape)
    return loss, w


def masked_mean(loss: Tensor, weights: np.ndarray) -> Tensor:
    total = float(weights.sum())
    if total == 0:
        return Tensor(np.zeros(()))
    return ops.scale(ops.sum_(ops.mul(loss, Tensor(weights))), 1.0 / total)


def range_loss(outputs: Tensor, targets, kind: str, valid=None) -> Tensor:
    """Mean loss of one range.

    Cross-entropy averages over valid rows; L1 averages over valid entries;
    multi-hot cross-entropy sums over classes and averages over rows.
    """
    loss, w = elementwise_loss(outputs, targets, kind, valid)
    if kind == "multi_hot_ce":
        return ops.scale(masked_mean(loss, w), loss.shape[-1])
    return masked_mean(loss, w)


def per_query_loss(outputs: Tensor, targets, kind: str) -> Tensor:
    """One loss value per output row ``[..., O]`` (channel-averaged for L1)."""
    loss, _ = elementwise_loss(outputs, targets, kind)
    if kind == "softmax_ce":
        if np.any(np.asarray(targets) == IGNORE):
            raise ValueError("per-query cross-entropy needs a target for every row")
        return loss
    if kind == "l1":
        return ops.scale(ops.sum_last(loss), 1.0 / loss.shape[-1])
    return ops.sum_last(loss)


def composite_loss(
    outputs: Tensor,
    targets: Mapping[str, object],
    spec: LossSpec,
    valid: Mapping[str, object] | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of per-range losses; returns ``(total, unweighted components)``."""
    spec.validate(outputs.shape[-2])
    valid = valid or {}
    total = None
    components = {}
    axis = outputs.ndim - 2
    for t in spec.terms:
        a, b = spec.span(t, outputs.shape[-2])
        part = outputs if (a, b) == (0, outputs.shape[-2]) else ops.slice_(outputs, axis, a, b)
        value = range_loss(part, targets[t.name], t.kind, valid.get(t.name))
        components[t.name] = value.item()
        weighted = ops.scale(value, t.weight)
        total = weighted if total is None else ops.add(total, weighted)
    return total, components


# -- optimizer ---------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Parameter]) -> "OptimizerState":
        return cls({p.name: np.zeros(p.shape) for p in params}, {p.name: np.zeros(p.shape) for p in params}, 0)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def lamb_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-6,
    decay_mask: Sequence[bool] | None = None,
) -> OptimizerState:
    """One LAMB update, applied in place to ``params``.

    Adam moments with bias correction give ``u = m_hat / (sqrt(v_hat) + eps)
    + wd * theta``; each tensor then moves by ``lr * ||theta|| / ||u|| * u``,
    with the ratio taken as 1 when either norm is zero. ``decay_mask`` turns
    weight decay off for individual tensors.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient for {p.name!r} has shape {np.shape(g)}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    new_m, new_v = dict(state.m), dict(state.v)
    for i, (p, g) in enumerate(zip(params, grads)):
        m = beta1 * state.m.get(p.name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(p.name, 0.0) + (1.0 - beta2) * g * g
        new_m[p.name], new_v[p.name] = m, v
        theta = p.data
        u = (m / c1) / (np.sqrt(v / c2) + eps)
        wd = weight_decay if decay_mask is None or decay_mask[i] else 0.0
        if wd:
            u = u + wd * theta
        w_norm = float(np.linalg.norm(theta))
        u_norm = float(np.linalg.norm(u))
        ratio = w_norm / u_norm if w_norm > 0 and u_norm > 0 else 1.0
        p.assign(theta - lr * ratio * u)
    return OptimizerState(new_m, new_v, step)


class Lamb:
    """Stateful wrapper: owns the moments and reads gradients from ``Parameter.grad``.

    Weight decay skips 1-D tensors (biases, norm scales) unless
    ``decay_vectors`` is set.
    """

    def __init__(
        self,
        params: Sequence[Parameter],
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-6,
        clip_norm: float | None = None,
        decay_vectors: bool = False,
    ):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.decay_mask = [decay_vectors or p.ndim > 1 for p in self.params]
        self.state = OptimizerState.for_params(self.params)

    def step(self, lr: float, grads: Sequence[np.ndarray] | None = None) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        norm = global_norm(grads)
        if self.clip_norm is not None and norm > self.clip_norm:
            grads = [g * (self.clip_norm / norm) for g in grads]
        self.state = lamb_step(
            self.params, grads, self.state, lr, self.weight_decay,
            self.beta1, self.beta2, self.eps, self.decay_mask,
        )
        return norm


# -- schedules ---------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """``warmup_cosine``: linear 0 -> base over ``warmup_steps``, then cosine to 0
    over ``decay_steps``. ``flat_cosine``: base for ``flat_steps``, then the
    same cosine. ``constant``: base forever. Beyond the cycle the rate is 0."""

    kind: str = "warmup_cosine"
    base_rate: float = 1e-3
    warmup_steps: int = 0
    flat_steps: int = 0
    decay_steps: int = 1000

    def validate(self) -> None:
        if self.kind not in ("warmup_cosine", "flat_cosine", "constant"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.base_rate < 0 or self.warmup_steps < 0 or self.flat_steps < 0 or self.decay_steps < 0:
            raise ConfigError("schedule rates and lengths must be non-negative")


def schedule_rate(schedule: Schedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    s = schedule
    if s.kind == "constant":
        return s.base_rate
    if s.kind == "warmup_cosine":
        if step < s.warmup_steps:
            return s.base_rate * step / s.warmup_steps
        t = step - s.warmup_steps
    elif s.kind == "flat_cosine":
        if step < s.flat_steps:
            return s.base_rate
        t = step - s.flat_steps
    else:
        raise ConfigError(f"unknown schedule kind {s.kind!r}")
    if t >= s.decay_steps:
        return 0.0
    return s.base_rate * 0.5 * (1.0 + math.cos(math.pi * t / s.decay_steps))


# -- gradients and query subsampling -------------------------------------------


def compute_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Parameter]) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``loss_fn`` under a fresh tape; returns ``(loss, grads)``."""
    with Tape() as tape:
        loss = loss_fn()
    return loss.item(), tape.gradient(loss, list(params))


def microbatch_gradients(
    loss_fns: Sequence[Callable[[], Tensor]],
    params: Sequence[Parameter],
    workers: int = 1,
) -> tuple[float, list[np.ndarray]]:
    """Mean loss and gradient over microbatches, reduced in submission order.

    Each call gets its own tape, so the closures may run on worker threads;
    the reduction order is fixed, making the result independent of scheduling.
    """
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda f: compute_gradients(f, params), loss_fns))
    else:
        results = [compute_gradients(f, params) for f in loss_fns]
    n = len(results)
    loss = sum(r[0] for r in results) / n
    grads = [sum(r[1][i] for r in results) / n for i in range(len(params))]
    return loss, grads


@dataclass
class SubsampleStep:
    loss: float
    per_query: np.ndarray
    grads: list[np.ndarray]
    indices: np.ndarray


def decode_subset(model, inputs: Tensor, queries: Tensor, indices, input_mask=None) -> Tensor:
    """Full forward pass decoding only the query rows in ``indices``."""
    return model(inputs, ops.gather_rows(queries, indices), input_mask)


def train_step_with_query_subsampling(
    model,
    inputs: Tensor,
    queries: Tensor | Callable[[], Tensor],
    targets,
    subsample: int,
    rng: np.random.Generator,
    kind: str = "l1",
    input_mask=None,
    params: Sequence[Parameter] | None = None,
) -> SubsampleStep:
    """Loss and gradients on ``subsample`` query rows drawn without replacement.

    ``targets`` cover all ``O`` rows along axis -2 (or -1 for class ids);
    ``queries`` may be a callable so learned query tables receive gradients.
    """
    params = model.parameters() if params is None else list(params)
    probe = queries() if callable(queries) else queries
    num_queries = probe.shape[-2]
    if subsample < 1:
        raise ValueError("subsample size must be >= 1")
    if subsample > num_queries:
        raise ValueError(f"subsample size {subsample} exceeds the {num_queries} queries")
    idx = np.sort(rng.choice(num_queries, size=subsample, replace=False))
    t = np.asarray(targets)
    sub_targets = np.take(t, idx, axis=-1 if kind == "softmax_ce" else -2)
    holder = {}

    def loss_fn():
        q = queries() if callable(queries) else queries
        per = per_query_loss(decode_subset(model, inputs, q, idx, input_mask), sub_targets, kind)
        holder["per"] = per.data
        return ops.mean(per)

    loss, grads = compute_gradients(loss_fn, params)
    return SubsampleStep(loss, holder["per"], grads, idx)


# -- metrics -------------------------------------------------------------------


def accuracy(predictions, targets, ignore: int | None = IGNORE) -> float:
    """Top-1 accuracy; ``predictions`` are logits ``[..., K]`` or class ids."""
    p = np.asarray(predictions.data if isinstance(predictions, Tensor) else predictions)
    t = np.asarray(targets)
    if p.shape != t.shape:
        if p.shape[:-1] != t.shape:
            raise ValueError(f"predictions {p.shape} do not match targets {t.shape}")
        p = p.argmax(axis=-1)
    keep = np.ones(t.shape, dtype=bool) if ignore is None else t != ignore
    if not keep.any():
        raise ValueError("no targets to score")
    return float((p[keep] == t[keep]).mean())


def psnr(predictions, targets, peak: float = 1.0) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shapes differ: {p.shape} vs {t.shape}")
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def end_point_error(predicted_flow, true_flow) -> float:
    """Mean Euclidean norm of the flow error over the last (vector) axis."""
    p = np.asarray(predicted_flow, dtype=np.float64)
    t = np.asarray(true_flow, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shapes differ: {p.shape} vs {t.shape}")
    return float(np.mean(np.linalg.norm(p - t, axis=-1)))


def evaluate_metrics(predictions, targets, kind: str, **kwargs) -> float:
    fns = {"accuracy": accuracy, "psnr": psnr, "epe": end_point_error}
    if kind not in fns:
        raise ValueError(f"unknown metric {kind!r}; expected one of {sorted(fns)}")
    return fns[kind](predictions, targets, **kwargs)
