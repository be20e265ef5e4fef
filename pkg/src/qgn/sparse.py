"""Hash-table activations and the layers that run on them.

A :class:`SparseActivation` holds a vector for every *active site* of a
level grid. Sites are kept sorted by ``(y, x)`` (key ``y * width + x``) so
every reduction runs in a fixed order and results are reproducible.

Submanifold convolutions use a rulebook: for each kernel offset, the list of
``(input row, output row)`` pairs whose source site is active. Inactive
neighbours never appear in a rulebook, so they contribute nothing and are
never read. Dense tensors are plain ``(H, W, C)`` arrays.

Every forward op has a matching ``*_bwd`` that returns the input gradient
and accumulates parameter gradients into :class:`ConvParams`.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


class SiteSet:
    """Sorted, immutable set of active sites on one level grid."""

    def __init__(self, level: int, width: int, height: int, keys):
        self.level = level
        self.width = width
        self.height = height
        self.keys = np.asarray(keys, dtype=np.int64)
        self._rulebooks = {}
        self._index = None

    @classmethod
    def full(cls, level: int, width: int, height: int) -> SiteSet:
        return cls(level, width, height, np.arange(width * height, dtype=np.int64))

    @classmethod
    def empty(cls, level: int, width: int, height: int) -> SiteSet:
        return cls(level, width, height, np.empty(0, dtype=np.int64))

    @classmethod
    def from_coords(cls, level, width, height, xs, ys) -> SiteSet:
        xs, ys = np.asarray(xs, dtype=np.int64), np.asarray(ys, dtype=np.int64)
        if len(xs) and (xs.min() < 0 or ys.min() < 0 or xs.max() >= width or ys.max() >= height):
            raise ShapeError("site outside the grid")
        return cls(level, width, height, np.unique(ys * width + xs))

    @classmethod
    def from_mask(cls, level: int, grid: np.ndarray) -> SiteSet:
        h, w = grid.shape
        return cls(level, w, h, np.flatnonzero(grid.ravel()))

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def xs(self) -> np.ndarray:
        return self.keys % self.width

    @property
    def ys(self) -> np.ndarray:
        return self.keys // self.width

    def same_as(self, other: SiteSet) -> bool:
        return self is other or (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.keys, other.keys)
        )

    def to_grid(self) -> np.ndarray:
        grid = np.zeros(self.width * self.height, dtype=bool)
        grid[self.keys] = True
        return grid.reshape(self.height, self.width)

    def rows_of(self, keys) -> np.ndarray:
        """Row index of each key; every key must be active."""
        keys = np.asarray(keys, dtype=np.int64)
        rows = np.searchsorted(self.keys, keys)
        ok = rows < len(self.keys)
        ok[ok] = self.keys[rows[ok]] == keys[ok]
        if not ok.all():
            raise ShapeError("requested sites are not active")
        return rows

    def index(self) -> dict:
        """Hash table ``(x, y) -> row``."""
        if self._index is None:
            self._index = {(int(x), int(y)): i for i, (x, y) in enumerate(zip(self.xs, self.ys))}
        return self._index

    def rulebook(self, kh: int, kw: int) -> list:
        """``[(dy, dx, in_rows, out_rows), ...]`` for a same-padded kh x kw kernel."""
        key = (kh, kw)
        if key not in self._rulebooks:
            self._rulebooks[key] = self._build_rulebook(kh, kw)
        return self._rulebooks[key]

    def _build_rulebook(self, kh, kw):
        xs, ys = self.xs, self.ys
        out_rows = np.arange(len(self.keys))
        book = []
        for dy in range(kh):
            for dx in range(kw):
                sx, sy = xs + dx - kw // 2, ys + dy - kh // 2
                inside = (sx >= 0) & (sx < self.width) & (sy >= 0) & (sy < self.height)
                src = sy[inside] * self.width + sx[inside]
                rows = np.searchsorted(self.keys, src)
                rows[rows == len(self.keys)] = 0
                hit = self.keys[rows] == src if len(self.keys) else np.zeros(0, bool)
                book.append((dy, dx, rows[hit], out_rows[inside][hit]))
        return book


@dataclass(eq=False)
class SparseActivation:
    sites: SiteSet
    values: np.ndarray  # (len(sites), C)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != len(self.sites):
            raise ShapeError(f"values {self.values.shape} do not match {len(self.sites)} sites")

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def level(self) -> int:
        return self.sites.level

    def __len__(self) -> int:
        return len(self.sites)

    def __getitem__(self, xy) -> np.ndarray:
        return self.values[self.sites.index()[tuple(xy)]]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.sites.height * self.sites.width, self.channels), self.values.dtype)
        out[self.sites.keys] = self.values
        return out.reshape(self.sites.height, self.sites.width, self.channels)

    @classmethod
    def from_dense(cls, dense: np.ndarray, sites: SiteSet) -> SparseActivation:
        h, w, c = dense.shape
        if (h, w) != (sites.height, sites.width):
            raise ShapeError(f"dense grid {w}x{h} does not match sites {sites.width}x{sites.height}")
        return cls(sites, dense.reshape(h * w, c)[sites.keys].copy())


@dataclass(eq=False)
class ConvParams:
    weight: np.ndarray  # (C_out, C_in, kh, kw)
    bias: np.ndarray  # (C_out,)
    grad_weight: np.ndarray = field(default=None)
    grad_bias: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad_weight is None:
            self.grad_weight = np.zeros_like(self.weight)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)

    @property
    def shape(self):
        return self.weight.shape

    def zero_grad(self):
        self.grad_weight[...] = 0
        self.grad_bias[...] = 0

    def astype(self, dtype) -> ConvParams:
        return ConvParams(self.weight.astype(dtype), self.bias.astype(dtype))

    @classmethod
    def zeros(cls, c_out, c_in, kh=1, kw=1, dtype=np.float32) -> ConvParams:
        return cls(np.zeros((c_out, c_in, kh, kw), dtype), np.zeros(c_out, dtype))


class TouchCounter:
    """Per-layer instrumentation: stored output scalars, vector reads, multiply-adds."""

    def __init__(self):
        self.layers = defaultdict(lambda: {"scalars": 0, "reads": 0, "macs": 0})
        self.order = []

    def record(self, name, scalars=0, reads=0, macs=0):
        if name not in self.layers:
            self.order.append(name)
        entry = self.layers[name]
        entry["scalars"] += int(scalars)
        entry["reads"] += int(reads)
        entry["macs"] += int(macs)

    def as_dict(self) -> dict:
        return {name: dict(self.layers[name]) for name in self.order}


def _record(counter, name, **kw):
    if counter is not None:
        counter.record(name, **kw)


# -- submanifold sparse convolution -------------------------------------------------


def sparse_conv_fwd(inp: SparseActivation, p: ConvParams, counter=None, name="conv") -> SparseActivation:
    c_out, c_in, kh, kw = p.weight.shape
    if inp.channels != c_in:
        raise ShapeError(f"input has {inp.channels} channels, kernel expects {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("submanifold kernels must be odd-sized")
    out = np.empty((len(inp), c_out), dtype=np.result_type(inp.values, p.weight))
    out[...] = p.bias
    pairs = 0
    for dy, dx, src, dst in inp.sites.rulebook(kh, kw):
        if len(src):
            out[dst] += inp.values[src] @ p.weight[:, :, dy, dx].T
            pairs += len(src)
    _record(counter, name, scalars=out.size, reads=pairs, macs=pairs * c_in * c_out)
    return SparseActivation(inp.sites, out)


def sparse_conv_bwd(inp: SparseActivation, p: ConvParams, upstream: SparseActivation) -> SparseActivation:
    if not upstream.sites.same_as(inp.sites):
        raise ShapeError("upstream gradient sites differ from the forward sites")
    _, _, kh, kw = p.weight.shape
    g = upstream.values
    grad_in = np.zeros_like(inp.values)
    for dy, dx, src, dst in inp.sites.rulebook(kh, kw):
        if len(src):
            w = p.weight[:, :, dy, dx]
            grad_in[src] += g[dst] @ w
            p.grad_weight[:, :, dy, dx] += g[dst].T @ inp.values[src]
    p.grad_bias += g.sum(axis=0)
    return SparseActivation(inp.sites, grad_in)


# -- dense convolution ----------------------------------------------------------------


def _out_size(n, k, stride):
    return (n + 2 * (k // 2) - k) // stride + 1


def dense_conv_fwd(x: np.ndarray, p: ConvParams, stride: int = 1, counter=None, name="conv") -> np.ndarray:
    """Cross-correlation with zero padding ``k // 2``: same size, or halved at stride 2."""
    c_out, c_in, kh, kw = p.weight.shape
    if x.ndim != 3 or x.shape[2] != c_in:
        raise ShapeError(f"input {x.shape} does not have {c_in} channels")
    h, w, _ = x.shape
    ho, wo = _out_size(h, kh, stride), _out_size(w, kw, stride)
    xp = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    out = np.empty((ho, wo, c_out), dtype=np.result_type(x, p.weight))
    out[...] = p.bias
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[dy : dy + stride * (ho - 1) + 1 : stride, dx : dx + stride * (wo - 1) + 1 : stride]
            out += patch @ p.weight[:, :, dy, dx].T
    _record(counter, name, scalars=out.size, reads=ho * wo * kh * kw, macs=ho * wo * kh * kw * c_in * c_out)
    return out


def dense_conv_bwd(x: np.ndarray, p: ConvParams, upstream: np.ndarray, stride: int = 1) -> np.ndarray:
    c_out, c_in, kh, kw = p.weight.shape
    h, w, _ = x.shape
    ho, wo = _out_size(h, kh, stride), _out_size(w, kw, stride)
    if upstream.shape != (ho, wo, c_out):
        raise ShapeError(f"upstream {upstream.shape} != expected {(ho, wo, c_out)}")
    xp = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    gxp = np.zeros_like(xp)
    g2 = upstream.reshape(-1, c_out)
    for dy in range(kh):
        for dx in range(kw):
            ys = slice(dy, dy + stride * (ho - 1) + 1, stride)
            xs = slice(dx, dx + stride * (wo - 1) + 1, stride)
            w_o = p.weight[:, :, dy, dx]
            gxp[ys, xs] += upstream @ w_o
            p.grad_weight[:, :, dy, dx] += g2.T @ xp[ys, xs].reshape(-1, c_in)
    p.grad_bias += g2.sum(axis=0)
    return gxp[kh // 2 : kh // 2 + h, kw // 2 : kw // 2 + w]


def relu_dense_fwd(x: np.ndarray, counter=None, name="relu") -> np.ndarray:
    _record(counter, name, scalars=x.size)
    return np.maximum(x, 0)


def relu_dense_bwd(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


# -- upsampling, selection and skips --------------------------------------------------


def children_of(sites: SiteSet) -> SiteSet:
    """Sites one level finer covering the 2x2 children of each site."""
    xs, ys = sites.xs, sites.ys
    cx = (2 * xs[:, None] + np.array([0, 1, 0, 1])).ravel()
    cy = (2 * ys[:, None] + np.array([0, 0, 1, 1])).ravel()
    w2 = 2 * sites.width
    return SiteSet(sites.level - 1, w2, 2 * sites.height, np.sort(cy * w2 + cx))


def _parent_rows(parent: SiteSet, child: SiteSet) -> np.ndarray:
    keys = (child.ys // 2) * parent.width + child.xs // 2
    return parent.rows_of(keys)


def upsample2x_fwd(inp: SparseActivation, counter=None, name="upsample") -> SparseActivation:
    """Nearest-neighbour 2x: every site spawns four children carrying a copy of its vector."""
    child = children_of(inp.sites)
    rows = _parent_rows(inp.sites, child)
    _record(counter, name, scalars=len(child) * inp.channels, reads=len(child))
    return SparseActivation(child, inp.values[rows])


def upsample2x_bwd(inp: SparseActivation, upstream: SparseActivation) -> SparseActivation:
    rows = _parent_rows(inp.sites, upstream.sites)
    grad = np.zeros_like(inp.values)
    np.add.at(grad, rows, upstream.values)
    return SparseActivation(inp.sites, grad)


def restrict_fwd(inp: SparseActivation, sites: SiteSet, counter=None, name="select") -> SparseActivation:
    """Keep only ``sites`` (a subset of the active sites)."""
    rows = inp.sites.rows_of(sites.keys)
    _record(counter, name, reads=len(rows))
    return SparseActivation(sites, inp.values[rows])


def restrict_bwd(inp: SparseActivation, upstream: SparseActivation) -> SparseActivation:
    grad = np.zeros_like(inp.values)
    grad[inp.sites.rows_of(upstream.sites.keys)] = upstream.values
    return SparseActivation(inp.sites, grad)


def gather_skip_fwd(enc: np.ndarray, sites: SiteSet, p: ConvParams, counter=None, name="skip") -> SparseActivation:
    """1x1 projection of dense encoder features, evaluated only at ``sites``."""
    c_out, c_in, kh, kw = p.weight.shape
    if (kh, kw) != (1, 1):
        raise ShapeError("skip connections use 1x1 kernels")
    if enc.shape[:2] != (sites.height, sites.width) or enc.shape[2] != c_in:
        raise ShapeError(
            f"encoder feature {enc.shape} does not match {sites.height}x{sites.width}x{c_in}"
        )
    feats = enc.reshape(-1, c_in)[sites.keys]
    out = feats @ p.weight[:, :, 0, 0].T + p.bias
    _record(counter, name, scalars=out.size, reads=len(sites), macs=len(sites) * c_in * c_out)
    return SparseActivation(sites, out)


def gather_skip_bwd(enc: np.ndarray, sites: SiteSet, p: ConvParams, upstream: SparseActivation) -> np.ndarray:
    c_in = enc.shape[2]
    feats = enc.reshape(-1, c_in)[sites.keys]
    g = upstream.values
    p.grad_weight[:, :, 0, 0] += g.T @ feats
    p.grad_bias += g.sum(axis=0)
    grad = np.zeros((enc.shape[0] * enc.shape[1], c_in), dtype=enc.dtype)
    grad[sites.keys] = g @ p.weight[:, :, 0, 0]
    return grad.reshape(enc.shape)


# -- pointwise ops --------------------------------------------------------------------


def relu_fwd(inp: SparseActivation, counter=None, name="relu") -> SparseActivation:
    _record(counter, name, scalars=inp.values.size, reads=len(inp))
    return SparseActivation(inp.sites, np.maximum(inp.values, 0))


def relu_bwd(inp: SparseActivation, upstream: SparseActivation) -> SparseActivation:
    if not upstream.sites.same_as(inp.sites):
        raise ShapeError("upstream gradient sites differ from the forward sites")
    return SparseActivation(inp.sites, upstream.values * (inp.values > 0))


def add_fwd(a: SparseActivation, b: SparseActivation, counter=None, name="add") -> SparseActivation:
    if not a.sites.same_as(b.sites):
        raise ShapeError("add requires identical active sites")
    if a.channels != b.channels:
        raise ShapeError(f"channel mismatch {a.channels} vs {b.channels}")
    _record(counter, name, scalars=a.values.size, reads=2 * len(a))
    return SparseActivation(a.sites, a.values + b.values)


def add_bwd(upstream: SparseActivation):
    return upstream, upstream
