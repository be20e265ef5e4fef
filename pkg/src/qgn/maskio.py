"""Segmentation masks: the QMR1 raster format, padding, synthetic data and flips.

QMR1 layout (little-endian)::

    b"QMR1" | u32 width | u32 height | u32 num_classes | width*height x u16

Cells are row-major with the origin at the top-left. Class ids run 1..k;
0 is reserved for the composite class and never appears in a mask.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ClassRangeError, FormatError, IoError

MASK_MAGIC = b"QMR1"
_HEADER = struct.Struct("<4sIII")


@dataclass(eq=False)
class Mask:
    """Dense grid of class ids, stored as a (height, width) uint16 array."""

    width: int
    height: int
    num_classes: int
    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.uint16)
        if self.data.shape != (self.height, self.width):
            raise FormatError(
                f"data shape {self.data.shape} does not match {self.height}x{self.width}"
            )
        if self.data.size and (self.data.min() < 1 or self.data.max() > self.num_classes):
            raise ClassRangeError(
                f"class ids must lie in 1..{self.num_classes}, "
                f"found {int(self.data.min())}..{int(self.data.max())}"
            )

    @classmethod
    def from_array(cls, arr, num_classes: int | None = None) -> Mask:
        arr = np.asarray(arr)
        k = int(arr.max()) if num_classes is None else num_classes
        return cls(arr.shape[1], arr.shape[0], k, arr)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.num_classes == other.num_classes
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self) -> str:
        return f"Mask({self.width}x{self.height}, k={self.num_classes})"


def mask_to_bytes(mask: Mask) -> bytes:
    header = _HEADER.pack(MASK_MAGIC, mask.width, mask.height, mask.num_classes)
    return header + mask.data.astype("<u2").tobytes()


def mask_from_bytes(buf: bytes) -> Mask:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated QMR1 header")
    magic, width, height, k = _HEADER.unpack_from(buf)
    if magic != MASK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MASK_MAGIC!r}")
    expected = _HEADER.size + 2 * width * height
    if len(buf) != expected:
        raise FormatError(f"QMR1 payload is {len(buf)} bytes, expected {expected}")
    cells = np.frombuffer(buf, dtype="<u2", offset=_HEADER.size).reshape(height, width)
    return Mask(width, height, k, cells.astype(np.uint16))


def read_mask(path) -> Mask:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return mask_from_bytes(buf)


def write_mask(mask: Mask, path) -> None:
    try:
        Path(path).write_bytes(mask_to_bytes(mask))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def pad_to_multiple(mask: Mask, m: int) -> Mask:
    """Grow the mask to multiples of ``m`` by replicating the nearest edge label.

    Replication keeps the label set closed: no void class is introduced.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    new_h = -(-mask.height // m) * m
    new_w = -(-mask.width // m) * m
    if (new_h, new_w) == (mask.height, mask.width):
        return mask
    data = np.pad(mask.data, ((0, new_h - mask.height), (0, new_w - mask.width)), mode="edge")
    return Mask(new_w, new_h, mask.num_classes, data)


def hflip(mask: Mask) -> Mask:
    return Mask(mask.width, mask.height, mask.num_classes, mask.data[:, ::-1])


def gen_synthetic(width: int, height: int, k: int, n_shapes: int, seed: int) -> Mask:
    """Background of class 1 with ``n_shapes`` rectangles painted on top.

    The generator draws from ``numpy.random.default_rng(seed)`` in a fixed
    order so the output can be reproduced independently. For each shape:

    1. ``cls = integers(2, k + 1)``
    2. ``w = integers(lo_w, hi_w + 1)`` with ``lo_w = max(2, width // 8)``,
       ``hi_w = max(lo_w, width // 2)``; same for ``h`` using ``height``
    3. ``x0 = integers(0, width - w + 1)``, ``y0 = integers(0, height - h + 1)``

    and the rectangle ``[y0:y0+h, x0:x0+w]`` is overwritten with ``cls``.
    Later shapes paint over earlier ones.
    """
    if k < 2:
        raise ValueError("need k >= 2")
    if width < 8 or height < 8:
        raise ValueError("dims must be >= 8")
    rng = np.random.default_rng(seed)
    data = np.ones((height, width), dtype=np.uint16)
    lo_w, lo_h = max(2, width // 8), max(2, height // 8)
    hi_w, hi_h = max(lo_w, width // 2), max(lo_h, height // 2)
    for _ in range(n_shapes):
        cls = rng.integers(2, k + 1)
        w = rng.integers(lo_w, hi_w + 1)
        h = rng.integers(lo_h, hi_h + 1)
        x0 = rng.integers(0, width - w + 1)
        y0 = rng.integers(0, height - h + 1)
        data[y0 : y0 + h, x0 : x0 + w] = cls
    return Mask(width, height, k, data)


def halves_mask(width: int, height: int) -> Mask:
    """Two-class mask: class 1 on the left half, class 2 on the right."""
    data = np.ones((height, width), dtype=np.uint16)
    data[:, width // 2 :] = 2
    return Mask(width, height, 2, data)


def class_palette(k: int, channels: int = 3) -> np.ndarray:
    """Fixed colours for classes 0..k; row 0 is unused (composite)."""
    rng = np.random.default_rng(20190101)
    return rng.uniform(-1.0, 1.0, size=(k + 1, channels))


def render_image(mask: Mask, noise: float = 0.1, seed: int = 0, channels: int = 3) -> np.ndarray:
    """Turn a mask into an (H, W, channels) float32 image: class colour plus noise."""
    palette = class_palette(mask.num_classes, channels)
    img = palette[mask.data.astype(np.intp)]
    if noise > 0:
        rng = np.random.default_rng(seed)
        img = img + noise * rng.standard_normal(img.shape)
    return img.astype(np.float32)
