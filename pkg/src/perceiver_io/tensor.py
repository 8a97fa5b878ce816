"""Dense float64 tensors, parameters and the gradient tape.

Tensors are immutable wrappers around read-only numpy arrays. Operations in
:mod:`perceiver_io.ops` record themselves on the innermost active :class:`Tape`
whenever one of their inputs requires a gradient; ``Tape.gradient`` then walks
the records in reverse execution order applying the registered backward rule
of each primitive.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "perceiver_io_tape", default=None
)

# op name -> backward(node, grad_out) -> tuple of input grads (None = no grad)
BACKWARD_RULES: dict[str, Callable[["Node", np.ndarray], tuple]] = {}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def register_backward(op: str):
    def deco(fn):
        if op in BACKWARD_RULES:
            raise RuntimeError(f"backward rule for {op!r} registered twice")
        BACKWARD_RULES[op] = fn
        return fn

    return deco


def _as_array(data: Any) -> np.ndarray:
    arr = np.array(data, dtype=DTYPE)  # always a private copy
    if arr.size == 0:
        raise ShapeError(f"tensor extents must be >= 1, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable n-d array of float64 values."""

    __slots__ = ("_data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False):
        self._data = _as_array(data)
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal constructor: takes ownership of a freshly computed array.
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=DTYPE)
        if arr.size == 0:
            raise ShapeError(f"tensor extents must be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        t._data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar; semantics live in ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, _lift(other))

    def __radd__(self, other):
        from . import ops

        return ops.add(_lift(other), self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _lift(other))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(_lift(other), self)

    def __mul__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.scale(self, 1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, _lift(other))


def _lift(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Parameter(Tensor):
    """A named, trainable tensor.

    The value is replaced (never written in place) by the optimizer, so
    tensors saved on earlier tapes stay valid.
    """

    __slots__ = ("name", "grad")

    def __init__(self, name: str, data: Any):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self._data)

    def assign(self, value: np.ndarray) -> None:
        value = np.array(value, dtype=DTYPE)
        if value.shape != self.shape:
            raise ShapeError(f"cannot assign {value.shape} to parameter {self.name} {self.shape}")
        value.flags.writeable = False
        self._data = value

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self._data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: dict[str, Any] = field(default_factory=dict)


class Tape:
    """Records executed primitives for reverse-mode differentiation.

    Use as a context manager::

        with Tape() as tape:
            loss = f(params)
        grads = tape.gradient(loss, params)
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def _backprop(self, target: Tensor, seed: np.ndarray | None) -> dict[int, np.ndarray]:
        if seed is None:
            if target.data.size != 1:
                raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
            seed = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=DTYPE)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = BACKWARD_RULES[node.op](node, g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        return grads

    def gradient(
        self, target: Tensor, sources: Sequence[Tensor], seed: np.ndarray | None = None
    ) -> list[np.ndarray]:
        """Gradients of ``target`` with respect to each of ``sources``."""
        grads = self._backprop(target, seed)
        return [
            grads[id(s)] if id(s) in grads else np.zeros_like(s.data) for s in sources
        ]

    def backward(self, target: Tensor, params: Iterable[Parameter]) -> None:
        """Accumulate d(target)/d(param) into each ``param.grad``."""
        params = list(params)
        for p, g in zip(params, self.gradient(target, params)):
            p.grad = p.grad + g


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record(
    op: str, inputs: tuple[Tensor, ...], out: np.ndarray, **saved: Any
) -> Tensor:
    """Wrap ``out`` as a Tensor and record the op if any input needs a gradient."""
    if op not in BACKWARD_RULES:
        raise RuntimeError(f"no backward rule registered for {op!r}")
    needs = any(t.requires_grad for t in inputs)
    tape = _ACTIVE_TAPE.get() if needs else None
    result = Tensor._wrap(out, requires_grad=tape is not None)
    if tape is not None:
        tape.record(Node(op, inputs, result, saved))
    return result
