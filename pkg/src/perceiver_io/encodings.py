"""Input featurisation and decoder query construction.

Fourier position features, learned position tables, modality padding, and
the query builders that turn a :data:`QuerySpec` into an ``[O, E_q]`` array.
Segments are always concatenated in the order content, position, modality.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from . import ops
from .attention import ConfigError
from .layers import Module, truncated_normal
from .tensor import Parameter, Tensor

POSITION_INIT_STD = 0.02


@dataclass(frozen=True)
class FourierSpec:
    """Sine/cosine bands per dimension at linearly spaced frequencies.

    ``max_freq`` is in cycles over the input extent; ``None`` means the
    Nyquist frequency ``extent / 2``. Integers apply to every dimension,
    sequences give one value per dimension.
    """

    num_bands: int | tuple[int, ...] = 64
    max_freq: float | tuple[float, ...] | None = None
    min_freq: float = 1.0
    include_raw_position: bool = True

    def bands(self, ndim: int) -> tuple[int, ...]:
        b = _per_dim(self.num_bands, ndim, "num_bands")
        if any(k < 1 for k in b):
            raise ConfigError("num_bands must be >= 1")
        return tuple(int(k) for k in b)

    def channels_per_dim(self, ndim: int) -> tuple[int, ...]:
        raw = 1 if self.include_raw_position else 0
        return tuple(2 * k + raw for k in self.bands(ndim))

    def num_channels(self, ndim: int) -> int:
        return sum(self.channels_per_dim(ndim))


def _per_dim(value, ndim: int, what: str) -> tuple:
    if isinstance(value, (tuple, list)):
        if len(value) != ndim:
            raise ConfigError(f"{what} has {len(value)} entries for {ndim} dimensions")
        return tuple(value)
    return (value,) * ndim


def position_grid(extents: Sequence[int]) -> np.ndarray:
    """Integer coordinates of every cell of a grid, raster order, shape ``[prod, d]``."""
    idx = np.indices(tuple(extents)).reshape(len(extents), -1).T
    return idx.astype(np.float64)


def rescale_positions(positions: np.ndarray, extents: Sequence[int]) -> np.ndarray:
    """Map index coordinates ``0 .. extent-1`` onto ``[-1, 1]`` per dimension."""
    ext = np.asarray(extents, dtype=np.float64)
    span = np.where(ext > 1, ext - 1, 1.0)
    out = 2.0 * np.asarray(positions, dtype=np.float64) / span - 1.0
    return np.where(ext > 1, out, 0.0)


def fourier_features(
    positions, spec: FourierSpec, extents: Sequence[int] | None = None
) -> np.ndarray:
    """Fourier features of ``positions [n, d]``.

    With ``extents`` the positions are grid indices and are rescaled to
    ``[-1, 1]``; without, they must already lie in ``[-1, 1]`` and
    ``spec.max_freq`` must be explicit. Per dimension the layout is
    ``[sin(pi f_1 p) .. sin(pi f_K p), cos(pi f_1 p) .. cos(pi f_K p), p]``.
    """
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    d = pos.shape[1]
    bands = spec.bands(d)
    if spec.max_freq is None:
        if extents is None:
            raise ConfigError("max_freq defaults to Nyquist, which needs the input extents")
        max_freq = tuple(e / 2.0 for e in extents)
    else:
        max_freq = _per_dim(spec.max_freq, d, "max_freq")
    if extents is not None:
        if len(extents) != d:
            raise ConfigError(f"{len(extents)} extents for {d}-D positions")
        pos = rescale_positions(pos, extents)

    parts = []
    for j in range(d):
        if max_freq[j] < spec.min_freq:
            raise ConfigError(f"max_freq {max_freq[j]} is below min_freq {spec.min_freq}")
        freqs = np.linspace(spec.min_freq, max_freq[j], bands[j])
        phase = np.pi * pos[:, j : j + 1] * freqs[None, :]
        parts += [np.sin(phase), np.cos(phase)]
        if spec.include_raw_position:
            parts.append(pos[:, j : j + 1])
    return np.concatenate(parts, axis=1)


def fourier_position_encoding(extents: Sequence[int], spec: FourierSpec) -> np.ndarray:
    """Features for every cell of a grid with the given extents."""
    return fourier_features(position_grid(extents), spec, extents)


def learned_position_table(
    name: str, num_positions: int, channels: int, rng: np.random.Generator
) -> Parameter:
    """Position embeddings drawn from a normal truncated at two std (std 0.02)."""
    if num_positions < 1 or channels < 1:
        raise ConfigError("position table sizes must be positive")
    return Parameter(name, truncated_normal(rng, (num_positions, channels), POSITION_INIT_STD))


def tile_rows(vector: Tensor, n: int) -> Tensor:
    """Repeat a ``[c]`` vector into ``[n, c]`` rows (differentiable)."""
    row = ops.reshape(vector, (1, vector.shape[0]))
    return ops.gather_rows(row, np.zeros(n, dtype=np.int64))


def build_input_array(
    content: Tensor,
    position: Tensor | np.ndarray | None = None,
    modality_pad: Tensor | None = None,
    expected_channels: int | None = None,
) -> Tensor:
    """Concatenate ``content ‖ position ‖ modality`` along channels.

    ``modality_pad`` may be a ``[w]`` vector (tiled to every row) or an
    already tiled array. Batched content ``[B, n, c]`` gets batch copies of
    the position and modality segments.
    """
    content = ops.constant(content)
    n = content.shape[-2]
    segments = [("content", content)]
    if position is not None:
        segments.append(("position", ops.constant(position)))
    if modality_pad is not None:
        pad = modality_pad if modality_pad.ndim > 1 else tile_rows(modality_pad, n)
        segments.append(("modality", pad))
    if content.ndim == 3:
        segments = [
            (k, v if v.ndim == 3 else ops.repeat_batch(v, content.shape[0])) for k, v in segments
        ]
    for k, v in segments:
        if v.shape[-2] != n:
            raise ValueError(f"{k} segment has {v.shape[-2]} rows, content has {n}")
    if expected_channels is not None:
        widths = {k: v.shape[-1] for k, v in segments}
        if sum(widths.values()) != expected_channels:
            raise ValueError(f"segment widths {widths} do not sum to {expected_channels}")
    if len(segments) == 1:
        return content
    return ops.concat([v for _, v in segments], axis=-1)


@dataclass(frozen=True)
class ModalitySpec:
    """One input modality serialised into a shared channel width."""

    name: str
    content_channels: int
    position_channels: int = 0

    def pad_width(self, common_width: int) -> int:
        w = common_width - self.content_channels - self.position_channels
        if w < 1:
            raise ConfigError(
                f"modality {self.name!r}: content {self.content_channels} + position "
                f"{self.position_channels} leaves no room for a modality pad in width {common_width}"
            )
        return w


class ModalityEmbedding(Module):
    """Learned per-modality pad vectors that bring every modality to one width."""

    def __init__(self, name: str, specs: Sequence[ModalitySpec], common_width: int, rng: np.random.Generator):
        self.common_width = common_width
        self.specs = {s.name: s for s in specs}
        self.pads = {
            s.name: Parameter(f"{name}.{s.name}", truncated_normal(rng, (s.pad_width(common_width),), POSITION_INIT_STD))
            for s in specs
        }

    def __call__(self, modality: str, content, position=None) -> Tensor:
        return build_input_array(content, position, self.pads[modality], expected_channels=self.common_width)


# -- decoder queries ----------------------------------------------------------


@dataclass(frozen=True)
class LearnedQueries:
    num_queries: int
    channels: int


@dataclass(frozen=True)
class PositionalQueries:
    fourier: FourierSpec
    extents: tuple[int, ...]


@dataclass(frozen=True)
class PerTaskQueries:
    num_tasks: int
    channels: int


@dataclass(frozen=True)
class InputFeatureQueries:
    """Per-output-point input features, optionally followed by Fourier positions."""

    feature_channels: int
    fourier: FourierSpec | None = None
    extents: tuple[int, ...] | None = None


@dataclass(frozen=True)
class ModalityQueries:
    """Queries for one modality; ``queries=None`` means the pad alone forms the query."""

    name: str
    num_queries: int
    queries: "QuerySpec | None" = None


@dataclass(frozen=True)
class MultimodalQueries:
    modalities: tuple[ModalityQueries, ...]
    width: int


QuerySpec = Union[LearnedQueries, PositionalQueries, PerTaskQueries, InputFeatureQueries, MultimodalQueries]


def query_width(spec: QuerySpec) -> int:
    if isinstance(spec, (LearnedQueries, PerTaskQueries)):
        return spec.channels
    if isinstance(spec, PositionalQueries):
        return spec.fourier.num_channels(len(spec.extents))
    if isinstance(spec, InputFeatureQueries):
        pos = spec.fourier.num_channels(len(spec.extents)) if spec.fourier else 0
        return spec.feature_channels + pos
    if isinstance(spec, MultimodalQueries):
        return spec.width
    raise TypeError(f"unknown query spec {spec!r}")


def query_count(spec: QuerySpec) -> int | None:
    """Number of query rows, or None when it depends on the input (input-feature queries)."""
    if isinstance(spec, LearnedQueries):
        return spec.num_queries
    if isinstance(spec, PerTaskQueries):
        return spec.num_tasks
    if isinstance(spec, PositionalQueries):
        return int(np.prod(spec.extents))
    if isinstance(spec, MultimodalQueries):
        return sum(m.num_queries for m in spec.modalities)
    return None


class QueryBuilder(Module):
    """Builds the decoder query array described by a :data:`QuerySpec`.

    ``context`` supplies data-dependent parts: ``context["features"]`` for
    input-feature queries, ``context[modality_name]`` for the features of
    input-feature sub-queries of a multimodal spec.
    """

    def __init__(self, spec: QuerySpec, rng: np.random.Generator, name: str = "queries"):
        self.spec = spec
        self.width = query_width(spec)
        self.table = None
        self.position = None
        self.children: dict[str, QueryBuilder] = {}
        self.pads: dict[str, Parameter] = {}
        self.ranges: dict[str, tuple[int, int]] = {}

        if isinstance(spec, (LearnedQueries, PerTaskQueries)):
            rows = spec.num_queries if isinstance(spec, LearnedQueries) else spec.num_tasks
            self.table = learned_position_table(f"{name}.table", rows, spec.channels, rng)
            if isinstance(spec, PerTaskQueries) and rows > 1:
                if len(np.unique(self.table.data, axis=0)) != rows:
                    raise ConfigError("per-task queries must be initialised to distinct rows")
        elif isinstance(spec, PositionalQueries):
            self.position = fourier_position_encoding(spec.extents, spec.fourier)
        elif isinstance(spec, InputFeatureQueries):
            if spec.fourier is not None:
                if spec.extents is None:
                    raise ConfigError("input-feature queries with Fourier positions need extents")
                self.position = fourier_position_encoding(spec.extents, spec.fourier)
        elif isinstance(spec, MultimodalQueries):
            start = 0
            for m in spec.modalities:
                sub_width = 0
                if m.queries is not None:
                    child = QueryBuilder(m.queries, rng, f"{name}.{m.name}")
                    sub_width = child.width
                    n = query_count(m.queries)
                    if n is not None and n != m.num_queries:
                        raise ConfigError(f"modality {m.name!r}: sub-spec builds {n} queries, expected {m.num_queries}")
                    self.children[m.name] = child
                pad = spec.width - sub_width
                if pad < 1:
                    raise ConfigError(
                        f"modality {m.name!r}: query width {sub_width} cannot be padded to {spec.width}"
                    )
                self.pads[m.name] = Parameter(
                    f"{name}.{m.name}.modality", truncated_normal(rng, (pad,), POSITION_INIT_STD)
                )
                self.ranges[m.name] = (start, start + m.num_queries)
                start += m.num_queries
        else:
            raise TypeError(f"unknown query spec {spec!r}")

    def __call__(self, context: Mapping | None = None) -> Tensor:
        spec = self.spec
        context = context or {}
        if self.table is not None:
            return self.table
        if isinstance(spec, PositionalQueries):
            return Tensor(self.position)
        if isinstance(spec, InputFeatureQueries):
            feats = ops.constant(context["features"])
            if feats.shape[-1] != spec.feature_channels:
                raise ValueError(f"query features have {feats.shape[-1]} channels, spec says {spec.feature_channels}")
            return build_input_array(feats, self.position)
        parts = []
        batch = _batch_of(context)
        for m in spec.modalities:
            n = m.num_queries
            child = self.children.get(m.name)
            if child is None:
                q = tile_rows(self.pads[m.name], n)
            else:
                sub_ctx = {"features": context[m.name]} if m.name in context else None
                q = build_input_array(child(sub_ctx), None, self.pads[m.name])
            if batch is not None and q.ndim == 2:
                q = ops.repeat_batch(q, batch)
            parts.append(q)
        return ops.concat(parts, axis=-2)


def _batch_of(context: Mapping) -> int | None:
    for v in context.values():
        if np.ndim(v.data if isinstance(v, Tensor) else v) == 3:
            return np.shape(v.data if isinstance(v, Tensor) else v)[0]
    return None
