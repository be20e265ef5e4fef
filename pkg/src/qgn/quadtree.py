"""T-pyramids, lossless quadtree coding and sparsity statistics.

A T-pyramid stores a label at every cell of every level; level ``l`` has
``(H >> l, W >> l)`` cells and is obtained from level ``l - 1`` by merging
disjoint 2x2 patches (uniform patch -> that class, otherwise composite 0).

A quadtree keeps only the leaves: non-composite cells whose parent is
composite (or that sit at the top level). Records are ``(level, x, y, v)``.

QTR1 layout (little-endian)::

    b"QTR1" | u32 W | u32 H | u32 k | u8 L | u32 count | count x (u8 l, u32 x, u32 y, u16 v)

Records are written sorted by (level descending, y, x).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BoundsError, FormatError, InputError, IoError, ShapeError, StructureError
from .maskio import Mask

COMPOSITE = 0
DEFAULT_LEVELS = 5

QT_MAGIC = b"QTR1"
_QT_HEADER = struct.Struct("<4sIIIBI")
RECORD_DTYPE = np.dtype([("l", "u1"), ("x", "<u4"), ("y", "<u4"), ("v", "<u2")])


def merge_patch(patch) -> int:
    a, b, c, d = np.asarray(patch).ravel()
    return int(a) if a == b == c == d else COMPOSITE


def merge_level(grid: np.ndarray) -> np.ndarray:
    """Apply the 2x2 merge operator to every disjoint patch of ``grid``."""
    h, w = grid.shape
    blocks = grid.reshape(h // 2, 2, w // 2, 2)
    first = blocks[:, :1, :, :1]
    uniform = (blocks == first).all(axis=(1, 3))
    return np.where(uniform, first[:, 0, :, 0], COMPOSITE).astype(grid.dtype)


def upsample_grid(grid: np.ndarray, times: int = 1) -> np.ndarray:
    f = 1 << times
    return np.repeat(np.repeat(grid, f, axis=0), f, axis=1)


@dataclass(eq=False)
class TPyramid:
    levels: list  # levels[l] is an (H >> l, W >> l) uint16 grid
    num_classes: int

    @property
    def max_level(self) -> int:
        return len(self.levels) - 1

    @property
    def width(self) -> int:
        return self.levels[0].shape[1]

    @property
    def height(self) -> int:
        return self.levels[0].shape[0]

    def composite(self, level: int) -> np.ndarray:
        return self.levels[level] == COMPOSITE


def build_t_pyramid(mask: Mask, levels: int = DEFAULT_LEVELS) -> TPyramid:
    f = 1 << levels
    if mask.width % f or mask.height % f:
        raise ShapeError(f"{mask.width}x{mask.height} is not divisible by 2^{levels}")
    grids = [mask.data.copy()]
    for _ in range(levels):
        grids.append(merge_level(grids[-1]))
    return TPyramid(grids, mask.num_classes)


def query(tp: TPyramid, level: int, x: int, y: int) -> int:
    if not 0 <= level <= tp.max_level:
        raise BoundsError(f"level {level} outside 0..{tp.max_level}")
    grid = tp.levels[level]
    if not (0 <= x < grid.shape[1] and 0 <= y < grid.shape[0]):
        raise BoundsError(f"({x}, {y}) outside level {level} grid {grid.shape[1]}x{grid.shape[0]}")
    return int(grid[y, x])


@dataclass(eq=False)
class Quadtree:
    width: int
    height: int
    num_classes: int
    max_level: int
    records: np.ndarray  # structured array of RECORD_DTYPE

    def __len__(self) -> int:
        return len(self.records)

    def count_at(self, level: int) -> int:
        return int(np.count_nonzero(self.records["l"] == level))

    def as_tuples(self) -> list:
        return [(int(r["l"]), int(r["x"]), int(r["y"]), int(r["v"])) for r in self.records]

    @classmethod
    def from_tuples(cls, records, width, height, num_classes, max_level) -> Quadtree:
        arr = np.array([tuple(r) for r in records], dtype=RECORD_DTYPE)
        return cls(width, height, num_classes, max_level, canonical_order(arr))


def canonical_order(records: np.ndarray) -> np.ndarray:
    order = np.lexsort((records["x"], records["y"], -records["l"].astype(np.int64)))
    return records[order]


def quadtree_encode(tp: TPyramid) -> Quadtree:
    top = tp.max_level
    parts = []
    for level in range(top, -1, -1):
        grid = tp.levels[level]
        keep = grid != COMPOSITE
        if level < top:
            keep &= upsample_grid(tp.levels[level + 1]) == COMPOSITE
        ys, xs = np.nonzero(keep)  # row-major, so already (y, x) sorted
        rec = np.empty(len(xs), dtype=RECORD_DTYPE)
        rec["l"], rec["x"], rec["y"], rec["v"] = level, xs, ys, grid[ys, xs]
        parts.append(rec)
    records = np.concatenate(parts) if parts else np.empty(0, RECORD_DTYPE)
    return Quadtree(tp.width, tp.height, tp.num_classes, top, records)


def quadtree_decode(qt: Quadtree, width: int | None = None, height: int | None = None) -> Mask:
    width = qt.width if width is None else width
    height = qt.height if height is None else height
    rec = qt.records
    if len(rec) and (rec["v"].min() == COMPOSITE or rec["v"].max() > qt.num_classes):
        raise StructureError("record value outside 1..k")
    coverage = np.zeros((height, width), dtype=np.int64)
    out = np.zeros((height, width), dtype=np.uint16)
    for level in np.unique(rec["l"]):
        level = int(level)
        if level > qt.max_level:
            raise StructureError(f"record level {level} exceeds max level {qt.max_level}")
        sel = rec[rec["l"] == level]
        gh, gw = height >> level, width >> level
        if (gh << level) != height or (gw << level) != width:
            raise StructureError(f"grid {width}x{height} not divisible at level {level}")
        xs, ys = sel["x"].astype(np.intp), sel["y"].astype(np.intp)
        if len(xs) and (xs.max() >= gw or ys.max() >= gh):
            raise StructureError(f"record outside the level-{level} grid")
        cov = np.zeros((gh, gw), dtype=np.int64)
        np.add.at(cov, (ys, xs), 1)
        vals = np.zeros((gh, gw), dtype=np.uint16)
        vals[ys, xs] = sel["v"]
        coverage += upsample_grid(cov, level)
        out += upsample_grid(vals, level)
    if (coverage > 1).any():
        raise StructureError("quadtree records overlap")
    if (coverage == 0).any():
        raise StructureError("quadtree records leave gaps")
    return Mask(width, height, qt.num_classes, out)


def quadtree_to_bytes(qt: Quadtree) -> bytes:
    rec = canonical_order(qt.records).astype(RECORD_DTYPE)
    header = _QT_HEADER.pack(QT_MAGIC, qt.width, qt.height, qt.num_classes, qt.max_level, len(rec))
    return header + rec.tobytes()


def quadtree_from_bytes(buf: bytes) -> Quadtree:
    if len(buf) < _QT_HEADER.size:
        raise FormatError("truncated QTR1 header")
    magic, w, h, k, levels, count = _QT_HEADER.unpack_from(buf)
    if magic != QT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {QT_MAGIC!r}")
    if len(buf) != _QT_HEADER.size + count * RECORD_DTYPE.itemsize:
        raise FormatError("QTR1 record payload has the wrong length")
    rec = np.frombuffer(buf, dtype=RECORD_DTYPE, offset=_QT_HEADER.size).copy()
    return Quadtree(w, h, k, levels, rec)


def write_quadtree(qt: Quadtree, path) -> None:
    try:
        Path(path).write_bytes(quadtree_to_bytes(qt))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_quadtree(path) -> Quadtree:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return quadtree_from_bytes(buf)


@dataclass
class SparsityStats:
    pixel_fraction: list  # percent of pixels resolved at each level, index = level
    ratio: float  # quadtree records per pixel, percent


def sparsity_stats(qt: Quadtree, width: int | None = None, height: int | None = None) -> SparsityStats:
    width = qt.width if width is None else width
    height = qt.height if height is None else height
    n_pix = width * height
    fractions = [100.0 * (4**level) * qt.count_at(level) / n_pix for level in range(qt.max_level + 1)]
    return SparsityStats(fractions, 100.0 * len(qt) / n_pix)


def ratio_from_fractions(fractions) -> float:
    """Storage ratio (percent) from per-level pixel percentages indexed by level."""
    return float(sum(p / 4**level for level, p in enumerate(fractions)))


def ratio_from_table_row(percentages, tolerance: float = 0.5) -> float:
    """Ratio for a row listed coarse-to-fine (Q_L, ..., Q_0), as published tables do.

    Published rows are rounded, so the sum only needs to be within
    ``tolerance`` of 100.
    """
    values = [float(p) for p in percentages]
    if any(v < 0 for v in values):
        raise InputError("percentages must be non-negative")
    total = sum(values)
    if abs(total - 100.0) > tolerance:
        raise InputError(f"percentages sum to {total:.4f}, expected ~100")
    return ratio_from_fractions(values[::-1])
