"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    richardson: bool = True,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` takes no arguments and reads ``params`` (Parameters or tensors with
    ``requires_grad``) through closure. Each probed entry contributes
    ``|a - n| / max(|a|, |n|, 1e-8)``. ``max_entries`` limits how many entries
    of each tensor are probed (chosen with ``rng``); ``None`` probes all.
    With ``richardson`` the differences at ``h`` and ``h / 2`` are combined
    to cancel the O(h^2) truncation term, which matters for parameters that
    feed a layer norm with small inputs.
    """
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: loss is not finite at the probe point")
    analytic = tape.gradient(loss, params)

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, analytic):
        base = p.data
        n = base.size
        entries = np.arange(n)
        if max_entries is not None and n > max_entries:
            entries = np.sort(rng.choice(n, size=max_entries, replace=False))
        for i in entries:
            numeric = _central(f, p, base, i, h)
            if richardson:
                numeric = (4.0 * _central(f, p, base, i, h / 2) - numeric) / 3.0
            a = g.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
        _set(p, base)
    return worst


def _central(f, p: Tensor, base: np.ndarray, i: int, h: float) -> float:
    return (_evaluate(f, p, base, i, h) - _evaluate(f, p, base, i, -h)) / (2.0 * h)


def _evaluate(f, p: Tensor, base: np.ndarray, i: int, delta: float) -> float:
    probe = base.copy()
    probe.reshape(-1)[i] += delta
    _set(p, probe)
    out = f().data
    if not np.isfinite(out).all():
        raise FloatingPointError("grad_check: loss is not finite near the probe point")
    return float(out)


def _set(p: Tensor, value: np.ndarray) -> None:
    value = np.array(value)
    value.flags.writeable = False
    p._data = value
