"""Task-side input builders.

Byte-level masked language modelling, optical-flow patch extraction,
video/audio patching and multimodal serialisation. Everything here works on
plain numpy arrays except the (de)serialisation helpers, which accept
tensors so gradients flow through them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops
from .tensor import Tensor

IGNORE = -1
WHITESPACE = frozenset(b" \t\n\r\x0b\x0c")


class ByteVocab:
    """UTF-8 bytes plus four special tokens after them."""

    NUM_BYTES = 256
    PAD = 256
    MASK = 257
    CLS = 258
    SEP = 259
    SIZE = 260

    @classmethod
    def encode(cls, text: str | bytes) -> np.ndarray:
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    @classmethod
    def decode(cls, ids: Iterable[int]) -> bytes:
        return bytes(int(i) for i in ids if 0 <= i < cls.NUM_BYTES)

    @classmethod
    def is_special(cls, token: int) -> bool:
        return cls.NUM_BYTES <= token < cls.SIZE


@dataclass(frozen=True)
class MaskedBatch:
    """``ids`` are model inputs, ``targets`` hold the original byte where
    ``mask`` is set and ``IGNORE`` elsewhere."""

    ids: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())


def word_spans(ids: np.ndarray) -> list[tuple[int, int]]:
    """Half-open ``[start, stop)`` spans of maximal non-whitespace runs."""
    ids = np.asarray(ids)
    is_word = ~np.isin(ids, list(WHITESPACE))
    edges = np.diff(np.concatenate([[0], is_word.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return list(zip(starts.tolist(), stops.tolist()))


def mask_words(
    text: str | bytes | np.ndarray,
    mask_prob: float = 0.15,
    rng: np.random.Generator | int | None = None,
    length: int | None = None,
) -> MaskedBatch:
    """Mask whole whitespace-delimited words independently with ``mask_prob``.

    Every byte of a selected word becomes MASK. With ``length`` the sequence
    is truncated or right-padded with PAD to that many ids.
    """
    if not 0.0 <= mask_prob <= 1.0:
        raise ValueError(f"mask_prob must lie in [0, 1], got {mask_prob}")
    rng = np.random.default_rng(rng)
    ids = text.astype(np.int64) if isinstance(text, np.ndarray) else ByteVocab.encode(text)
    if length is not None:
        ids = ids[:length]
    spans = word_spans(ids)
    chosen = rng.random(len(spans)) < mask_prob
    mask = np.zeros(ids.shape, dtype=bool)
    for (start, stop), c in zip(spans, chosen):
        if c:
            mask[start:stop] = True
    inputs = np.where(mask, ByteVocab.MASK, ids)
    targets = np.where(mask, ids, IGNORE)
    if length is not None and len(ids) < length:
        pad = length - len(ids)
        inputs = np.concatenate([inputs, np.full(pad, ByteVocab.PAD)])
        targets = np.concatenate([targets, np.full(pad, IGNORE)])
        mask = np.concatenate([mask, np.zeros(pad, dtype=bool)])
    return MaskedBatch(inputs.astype(np.int64), targets.astype(np.int64), mask)


def split_documents(text: str | bytes) -> list[bytes]:
    """Documents are separated by one or more blank lines."""
    raw = text.encode("utf-8") if isinstance(text, str) else text
    docs, current = [], []
    for line in raw.splitlines():
        if line.strip():
            current.append(line)
        elif current:
            docs.append(b"\n".join(current))
            current = []
    if current:
        docs.append(b"\n".join(current))
    return docs


def group_documents(docs: Sequence[bytes], group_size: int = 10, separator: bytes = b" ") -> list[bytes]:
    """Concatenate consecutive runs of ``group_size`` documents."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    return [separator.join(docs[i : i + group_size]) for i in range(0, len(docs), group_size)]


def random_crop(ids: np.ndarray, length: int, rng: np.random.Generator, starts: np.ndarray | None = None) -> np.ndarray:
    """A crop of at most ``length`` ids; ``starts`` restricts the allowed offsets."""
    ids = np.asarray(ids)
    if len(ids) <= length:
        return ids.copy()
    if starts is None:
        start = int(rng.integers(0, len(ids) - length + 1))
    else:
        allowed = starts[starts <= len(ids) - length]
        start = int(rng.choice(allowed)) if len(allowed) else 0
    return ids[start : start + length].copy()


def mlm_batch(
    sources: Sequence[np.ndarray],
    batch_size: int,
    length: int,
    rng: np.random.Generator,
    mask_prob: float = 0.15,
    crop_starts: Sequence[np.ndarray] | None = None,
    require_mask: bool = True,
) -> MaskedBatch:
    """Stack ``batch_size`` masked crops drawn from random sources.

    With ``require_mask`` a crop that happens to have no masked word is
    redrawn (a few times) so every row contributes to the loss.
    """
    rows = []
    for _ in range(batch_size):
        for _attempt in range(16):
            k = int(rng.integers(len(sources)))
            starts = None if crop_starts is None else np.asarray(crop_starts[k])
            crop = random_crop(sources[k], length, rng, starts)
            m = mask_words(crop, mask_prob, rng, length=length)
            if m.num_masked or not require_mask:
                break
        rows.append(m)
    return MaskedBatch(
        np.stack([r.ids for r in rows]),
        np.stack([r.targets for r in rows]),
        np.stack([r.mask for r in rows]),
    )


# -- optical flow --------------------------------------------------------------


def extract_flow_patches(
    frame1: np.ndarray, frame2: np.ndarray, patch: int = 3, concat_frames: bool = True
):
    """Per-pixel ``patch x patch`` neighbourhoods of two frames, replicate-padded at edges.

    Concat mode returns ``[H*W, 2*patch*patch*C]`` rows laid out as
    ``frame1 patch ‖ frame2 patch``, each patch flattened (dy, dx, channel).
    Separate mode returns ``(rows [2*H*W, patch*patch*C], time [2*H*W])``
    with all frame-1 pixels first and time index 0 / 1.
    """
    f1 = np.asarray(frame1, dtype=np.float64)
    f2 = np.asarray(frame2, dtype=np.float64)
    if f1.shape != f2.shape:
        raise ValueError(f"frame shapes differ: {f1.shape} vs {f2.shape}")
    if f1.ndim != 3 or f1.shape[0] < 1 or f1.shape[1] < 1:
        raise ValueError(f"frames must be H x W x C with H, W >= 1, got {f1.shape}")
    if patch < 1 or patch % 2 == 0:
        raise ValueError("patch size must be a positive odd number")
    p1, p2 = _pixel_patches(f1, patch), _pixel_patches(f2, patch)
    if concat_frames:
        return np.concatenate([p1, p2], axis=1)
    n = p1.shape[0]
    time = np.concatenate([np.zeros(n), np.ones(n)])
    return np.concatenate([p1, p2], axis=0), time


def _pixel_patches(frame: np.ndarray, patch: int) -> np.ndarray:
    h, w, c = frame.shape
    r = patch // 2
    padded = np.pad(frame, ((r, r), (r, r), (0, 0)), mode="edge")
    win = sliding_window_view(padded, (patch, patch), axis=(0, 1))  # [H, W, C, p, p]
    return win.transpose(0, 1, 3, 4, 2).reshape(h * w, patch * patch * c)


def synthetic_flow_pair(
    rng: np.random.Generator,
    height: int,
    width: int,
    max_shift: int,
    density: float = 0.3,
    channels: int = 3,
):
    """Random-dot frame pair related by one global integer displacement.

    Returns ``frame1, frame2, flow`` with ``frame2[y + dy, x + dx] ==
    frame1[y, x]`` wherever both are inside the image and ``flow`` the
    constant ``[H, W, 2]`` field of ``(dx, dy)``.
    """
    s = max_shift
    canvas = (rng.random((height + 2 * s, width + 2 * s, channels)) < density).astype(np.float64)
    dx, dy = (int(v) for v in rng.integers(-s, s + 1, size=2))
    frame1 = canvas[s : s + height, s : s + width]
    frame2 = canvas[s - dy : s - dy + height, s - dx : s - dx + width]
    flow = np.broadcast_to(np.array([dx, dy], dtype=np.float64), (height, width, 2)).copy()
    return frame1.copy(), frame2.copy(), flow


# -- video / audio patching -------------------------------------------------


@dataclass(frozen=True)
class PatchGrid:
    source_shape: tuple[int, ...]  # data extents followed by channels
    patch: tuple[int, ...]  # patch extents over the data axes

    @property
    def channels(self) -> int:
        return self.source_shape[-1]

    @property
    def grid(self) -> tuple[int, ...]:
        return tuple(-(-s // p) for s, p in zip(self.source_shape[:-1], self.patch))

    @property
    def padded_shape(self) -> tuple[int, ...]:
        return tuple(g * p for g, p in zip(self.grid, self.patch)) + (self.channels,)

    @property
    def num_patches(self) -> int:
        return int(np.prod(self.grid))

    @property
    def patch_channels(self) -> int:
        return int(np.prod(self.patch)) * self.channels


def _patchify(x: np.ndarray, grid: PatchGrid) -> np.ndarray:
    k = len(grid.patch)
    shape = []
    for g, p in zip(grid.grid, grid.patch):
        shape += [g, p]
    y = x.reshape(*shape, grid.channels)
    order = [2 * i for i in range(k)] + [2 * i + 1 for i in range(k)] + [2 * k]
    return y.transpose(order).reshape(grid.num_patches, grid.patch_channels)


def _unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    k = len(grid.patch)
    y = np.asarray(patches).reshape(*grid.grid, *grid.patch, grid.channels)
    order = []
    for i in range(k):
        order += [i, k + i]
    y = y.transpose(order + [2 * k]).reshape(grid.padded_shape)
    return y[tuple(slice(0, s) for s in grid.source_shape[:-1])]


def patch_array(x: np.ndarray, patch: Sequence[int]):
    """Split ``x [d_1..d_k, C]`` into raster-ordered patches.

    Remainders are zero-padded; returns ``(patches, valid, grid)`` where
    ``valid`` is True exactly on entries copied from ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    grid = PatchGrid(tuple(x.shape), tuple(int(p) for p in patch))
    if len(grid.patch) != x.ndim - 1 or any(p < 1 for p in grid.patch):
        raise ValueError(f"patch {patch} does not fit data of shape {x.shape}")
    pad = [(0, P - s) for P, s in zip(grid.padded_shape[:-1], x.shape[:-1])] + [(0, 0)]
    values = _patchify(np.pad(x, pad), grid)
    valid = _patchify(np.pad(np.ones(x.shape, dtype=bool), pad), grid)
    return values, valid, grid


def patch_video(video: np.ndarray, patch: tuple[int, int, int] = (1, 4, 4)):
    """``video [T, H, W, C]`` to ``[n, pt*ph*pw*C]`` patches (see :func:`patch_array`)."""
    if np.ndim(video) != 4:
        raise ValueError("video must be T x H x W x C")
    return patch_array(video, patch)


def unpatch_video(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    return _unpatchify(patches, grid)


def patch_audio(samples: np.ndarray, patch: int = 16):
    """``samples [S]`` (or ``[S, C]``) to ``[ceil(S/k), k*C]`` patches."""
    s = np.asarray(samples, dtype=np.float64)
    mono = s.ndim == 1
    values, valid, grid = patch_array(s[:, None] if mono else s, (patch,))
    return values, valid, grid


def unpatch_audio(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    out = _unpatchify(patches, grid)
    return out[:, 0] if grid.channels == 1 else out


# -- multimodal serialisation ---------------------------------------------


def serialize_multimodal(modalities: Mapping[str, Tensor | np.ndarray]):
    """Concatenate featurised modalities along the index axis.

    Returns ``(array, ranges)`` with ``ranges[name] = (start, stop)``; the
    ranges partition ``[0, total)`` in insertion order.
    """
    if not modalities:
        raise ValueError("no modalities to serialise")
    parts = {k: ops.constant(v) for k, v in modalities.items()}
    widths = {k: v.shape[-1] for k, v in parts.items()}
    if len(set(widths.values())) != 1:
        raise ValueError(f"modality widths differ: {widths}")
    ranges, start = {}, 0
    for k, v in parts.items():
        ranges[k] = (start, start + v.shape[-2])
        start += v.shape[-2]
    return ops.concat(list(parts.values()), axis=-2), ranges


def deserialize_multimodal(array: Tensor | np.ndarray, ranges: Mapping[str, tuple[int, int]]) -> dict[str, Tensor]:
    array = ops.constant(array)
    axis = array.ndim - 2
    return {k: ops.slice_(array, axis, a, b) for k, (a, b) in ranges.items()}


def mask_labels(onehot: np.ndarray, rng: np.random.Generator, prob: float = 0.5):
    """Zero the label content of each example with probability ``prob``.

    ``onehot`` is ``[B, K]`` or ``[K]``; returns ``(masked, was_masked)``.
    """
    onehot = np.asarray(onehot, dtype=np.float64)
    batched = onehot.reshape(-1, onehot.shape[-1])
    hide = rng.random(batched.shape[0]) < prob
    out = np.where(hide[:, None], 0.0, batched)
    return out.reshape(onehot.shape), hide if onehot.ndim > 1 else bool(hide[0])
