"""Synthetic bouncing-sprite sequence generation, a self-describing binary
dataset format, and a loader for externally prepared frame grids.

The generator follows the classic bouncing-digits protocol: glyphs placed
uniformly at random, moving at a fixed per-sequence speed along random
directions, reflecting elastically off the canvas walls, composited by
elementwise max.  Glyphs default to ten procedurally drawn binary shapes so
the package needs no downloads; any ``[n_glyphs, gh, gw]`` float array in
[0, 1] can be supplied instead.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

__all__ = [
    "SequenceDataset",
    "default_glyphs",
    "generate_moving_sprites",
    "save_dataset",
    "load_dataset",
    "LayoutSpec",
    "load_external_grid",
]

MAGIC = b"VMRN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHB5Q")
_DTYPE_BY_CODE = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_CODE_BY_DTYPE = {v: k for k, v in _DTYPE_BY_CODE.items()}


@dataclass
class SequenceDataset:
    """Frame sequences ``[n_sequences, seq_len, H, W, C]`` with values in [0, 1]."""

    frames: np.ndarray
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        if self.frames.ndim != 5:
            raise ConfigError(f"frames must be 5D, got shape {self.frames.shape}")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < 0.0 or hi > 1.0:
            raise ConfigError(f"frame values must lie in [0, 1], got [{lo}, {hi}]")

    @property
    def n_sequences(self) -> int:
        return self.frames.shape[0]

    @property
    def seq_len(self) -> int:
        return self.frames.shape[1]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[2:])

    def subset(self, index) -> "SequenceDataset":
        return SequenceDataset(self.frames[index], self.split, self.provenance)


def default_glyphs(size: int = 12) -> np.ndarray:
    """Ten distinct binary shapes drawn on a ``size x size`` canvas."""
    if size < 5:
        raise ConfigError(f"glyph size must be >= 5, got {size}")
    s = size
    yy, xx = np.mgrid[0:s, 0:s]
    cy = cx = (s - 1) / 2
    r = s / 2 - 0.5
    shapes = []

    filled = np.ones((s, s))
    shapes.append(filled)

    hollow = np.zeros((s, s))
    t = max(1, s // 5)
    hollow[:t, :] = hollow[-t:, :] = hollow[:, :t] = hollow[:, -t:] = 1
    shapes.append(hollow)

    disc = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(float)
    shapes.append(disc)

    ring = disc - (((yy - cy) ** 2 + (xx - cx) ** 2) <= (r - t) ** 2)
    shapes.append(np.clip(ring, 0, 1))

    cross = np.zeros((s, s))
    mid = s // 2
    cross[mid - t // 2 : mid + (t + 1) // 2, :] = 1
    cross[:, mid - t // 2 : mid + (t + 1) // 2] = 1
    shapes.append(cross)

    diag = (np.abs(yy - xx) < t).astype(float) + (np.abs(yy + xx - (s - 1)) < t)
    shapes.append(np.clip(diag, 0, 1))

    tri = (yy >= xx).astype(float)
    shapes.append(tri)

    stripes_h = ((yy // max(1, t)) % 2 == 0).astype(float)
    shapes.append(stripes_h)

    stripes_v = ((xx // max(1, t)) % 2 == 0).astype(float)
    shapes.append(stripes_v)

    diamond = (np.abs(yy - cy) + np.abs(xx - cx) <= r).astype(float)
    shapes.append(diamond)

    return np.stack(shapes).astype(np.float32)


def _reflect(pos: float, vel: float, upper: float) -> tuple[float, float]:
    """Advance one axis with elastic reflection at 0 and ``upper``."""
    pos += vel
    while pos < 0.0 or pos > upper:
        if pos < 0.0:
            pos = -pos
            vel = -vel
        else:
            pos = 2 * upper - pos
            vel = -vel
    return pos, vel


def generate_moving_sprites(
    seed: int,
    n_sequences: int,
    seq_len: int,
    canvas: tuple[int, int] = (32, 32),
    n_sprites: int = 2,
    glyph_source: np.ndarray | None = None,
    speed_range: tuple[float, float] = (2.0, 4.0),
    channels: int = 1,
    split: str = "train",
) -> SequenceDataset:
    """Deterministic bouncing-sprite sequences, fully determined by ``seed``."""
    if n_sprites < 1:
        raise ConfigError(f"n_sprites must be >= 1, got {n_sprites}")
    h, w = canvas
    glyphs = default_glyphs() if glyph_source is None else np.asarray(glyph_source, dtype=np.float32)
    if glyphs.ndim != 3:
        raise ConfigError(f"glyph source must be [n_glyphs, gh, gw], got {glyphs.shape}")
    gh, gw = glyphs.shape[1:]
    if gh > h or gw > w:
        raise ConfigError(f"glyph {gh}x{gw} does not fit canvas {h}x{w}")

    rng = np.random.default_rng(seed)
    frames = np.zeros((n_sequences, seq_len, h, w, channels), dtype=np.float32)
    for si in range(n_sequences):
        for ch in range(channels):
            speed = rng.uniform(*speed_range)
            idx = rng.integers(0, len(glyphs), size=n_sprites)
            ys = rng.uniform(0, h - gh, size=n_sprites)
            xs = rng.uniform(0, w - gw, size=n_sprites)
            angles = rng.uniform(0, 2 * math.pi, size=n_sprites)
            vys = speed * np.sin(angles)
            vxs = speed * np.cos(angles)
            for t in range(seq_len):
                canvas_t = frames[si, t, :, :, ch]
                for k in range(n_sprites):
                    y0, x0 = int(round(ys[k])), int(round(xs[k]))
                    region = canvas_t[y0 : y0 + gh, x0 : x0 + gw]
                    np.maximum(region, glyphs[idx[k]], out=region)
                for k in range(n_sprites):
                    ys[k], vys[k] = _reflect(ys[k], vys[k], h - gh)
                    xs[k], vxs[k] = _reflect(xs[k], vxs[k], w - gw)
    return SequenceDataset(frames, split=split, provenance=f"sprites:seed={seed}")


def save_dataset(ds: SequenceDataset, path) -> Path:
    """Write ``magic | version u16 | dtype u8 | dims 5x u64 | raw row-major``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(ds.frames)
    dtype = arr.dtype.newbyteorder("<")
    code = _CODE_BY_DTYPE.get(dtype)
    if code is None:
        raise DataFormatError(f"unsupported dtype {arr.dtype}")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, code, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(dtype, copy=False).tobytes(order="C"))
    return path


def load_dataset(path, split: str = "train") -> SequenceDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, code, *dims = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    dtype = _DTYPE_BY_CODE.get(code)
    if dtype is None:
        raise DataFormatError(f"{path}: unknown dtype code {code}")
    count = int(np.prod(dims))
    expected = _HEADER.size + count * dtype.itemsize
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: payload is {len(raw) - _HEADER.size} bytes, dims {tuple(dims)} require {expected - _HEADER.size}"
        )
    frames = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(dims).copy()
    digest = hashlib.sha256(raw).hexdigest()
    return SequenceDataset(frames, split=split, provenance=f"sha256:{digest}")


@dataclass(frozen=True)
class LayoutSpec:
    """Declarative description of an external raw frame series.

    ``dims`` are the stored array dimensions, time first.  ``channel_order``
    says whether channels are stored last ("HWC") or right after time
    ("CHW").  ``bounds`` are the declared physical min/max used for min-max
    normalization; values outside them are rejected.  ``window`` is the clip
    length (observe + horizon) cut with stride ``stride``.
    """

    dims: tuple[int, ...]
    dtype: str = "<f4"
    bounds: tuple[float, float] = (0.0, 1.0)
    channel_order: str = "HWC"
    window: int = 8
    stride: int = 1

    def __post_init__(self):
        if len(self.dims) != 4:
            raise ConfigError(f"dims must be (T, ...) of length 4, got {self.dims}")
        if self.channel_order not in ("HWC", "CHW"):
            raise ConfigError(f"channel_order must be 'HWC' or 'CHW', got {self.channel_order!r}")
        if self.bounds[1] <= self.bounds[0]:
            raise ConfigError(f"bounds must satisfy lo < hi, got {self.bounds}")
        if self.window < 1 or self.stride < 1:
            raise ConfigError(f"window and stride must be >= 1, got {self.window}, {self.stride}")


def load_external_grid(path, layout: LayoutSpec, split: str = "test") -> SequenceDataset:
    """Load a raw frame series, normalize by declared bounds, cut clips."""
    path = Path(path)
    raw = path.read_bytes()
    dtype = np.dtype(layout.dtype)
    count = int(np.prod(layout.dims))
    if len(raw) != count * dtype.itemsize:
        raise DataFormatError(
            f"{path}: {len(raw)} bytes do not match layout dims {layout.dims} ({count * dtype.itemsize} expected)"
        )
    series = np.frombuffer(raw, dtype=dtype).reshape(layout.dims).astype(np.float64)
    if layout.channel_order == "CHW":
        series = series.transpose(0, 2, 3, 1)
    lo, hi = layout.bounds
    if series.min() < lo or series.max() > hi:
        raise DataFormatError(
            f"{path}: values [{series.min()}, {series.max()}] fall outside declared bounds [{lo}, {hi}]"
        )
    series = ((series - lo) / (hi - lo)).astype(np.float32)
    t_total = series.shape[0]
    if t_total < layout.window:
        raise ConfigError(f"series has {t_total} frames, window needs {layout.window}")
    starts = range(0, t_total - layout.window + 1, layout.stride)
    clips = np.stack([series[s : s + layout.window] for s in starts])
    digest = hashlib.sha256(raw).hexdigest()
    return SequenceDataset(clips, split=split, provenance=f"sha256:{digest}")
