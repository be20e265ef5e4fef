"""Toy quadtree generating network.

Encoder: dense 3x3 convs with ReLU. Block 0 runs at full resolution; each
later block starts with a stride-2 conv, so block ``l`` produces features at
stride ``2**l``. Block ``L`` is the bottleneck.

Decoder: the bottleneck features are projected by the level-``L`` skip and
the level-``L`` head predicts ``k + 1`` logits over the whole coarse grid.
Each decoder block ``l = L..1`` then

1. picks the parent cells to propagate (all / gt-composite / predicted-composite),
2. applies a 1x1 transition conv + ReLU on those parents,
3. upsamples them 2x into level ``l - 1``,
4. runs ``units_per_block`` residual units of two 3x3 submanifold convs,
5. adds the level ``l - 1`` skip projection of the encoder features,
6. predicts level ``l - 1`` logits with a 1x1 head.

Parameter names (and the checkpoint order) follow :func:`param_layout`.

QGN1 checkpoint (little-endian)::

    b"QGN1" | u32 L | u32 k | u32 in_channels | u32 units_per_block | i64 seed
            | (L+1) x u32 encoder_channels | (L+1) x u32 decoder_channels
            | u32 n_tensors | per tensor in layout order: weight f32 (C-order), bias f32
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sparse as sp
from .errors import ConfigError, FormatError, IoError, ShapeError, StructureError
from .maskio import Mask
from .quadtree import COMPOSITE, TPyramid
from .sparse import ConvParams, SiteSet, SparseActivation

CKPT_MAGIC = b"QGN1"


class Scheme(str, enum.Enum):
    ALL = "all"
    GTC = "gtc"
    PC = "pc"

    @classmethod
    def parse(cls, value) -> Scheme:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown propagation scheme {value!r}") from None


@dataclass
class QgnConfig:
    levels: int = 5
    num_classes: int = 4
    encoder_channels: tuple = (8, 16, 32, 64, 128, 128)
    decoder_channels: tuple = (128, 64, 32, 16, 8, 8)  # listed for levels L..0
    units_per_block: int = 2
    seed: int = 0
    in_channels: int = 3

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if self.levels < 1:
            raise ConfigError("need at least one level")
        if self.num_classes < 1:
            raise ConfigError("need at least one class")
        n = self.levels + 1
        if len(self.encoder_channels) != n or len(self.decoder_channels) != n:
            raise ConfigError(f"channel lists need {n} entries")
        if self.units_per_block < 0:
            raise ConfigError("units_per_block must be >= 0")

    def enc(self, level: int) -> int:
        return self.encoder_channels[level]

    def dec(self, level: int) -> int:
        return self.decoder_channels[self.levels - level]


def param_layout(cfg: QgnConfig) -> list:
    """``[(name, (c_out, c_in, kh, kw)), ...]`` in forward (and checkpoint) order."""
    L, n_out = cfg.levels, cfg.num_classes + 1
    layout = [
        ("enc0.conv0", (cfg.enc(0), cfg.in_channels, 3, 3)),
        ("enc0.conv1", (cfg.enc(0), cfg.enc(0), 3, 3)),
    ]
    for j in range(1, L + 1):
        layout.append((f"enc{j}.down", (cfg.enc(j), cfg.enc(j - 1), 3, 3)))
        layout.append((f"enc{j}.conv0", (cfg.enc(j), cfg.enc(j), 3, 3)))
        layout.append((f"enc{j}.conv1", (cfg.enc(j), cfg.enc(j), 3, 3)))
    layout.append((f"skip{L}", (cfg.dec(L), cfg.enc(L), 1, 1)))
    layout.append((f"head{L}", (n_out, cfg.dec(L), 1, 1)))
    for l in range(L, 0, -1):
        c = cfg.dec(l - 1)
        layout.append((f"dec{l}.trans", (c, cfg.dec(l), 1, 1)))
        for u in range(cfg.units_per_block):
            layout.append((f"dec{l}.unit{u}.conv0", (c, c, 3, 3)))
            layout.append((f"dec{l}.unit{u}.conv1", (c, c, 3, 3)))
        layout.append((f"skip{l - 1}", (c, cfg.enc(l - 1), 1, 1)))
        layout.append((f"head{l - 1}", (n_out, c, 1, 1)))
    return layout


def param_count(cfg: QgnConfig) -> int:
    return sum(co * ci * kh * kw + co for _, (co, ci, kh, kw) in param_layout(cfg))


def _is_residual_tail(name: str) -> bool:
    return ".unit" in name and name.endswith("conv1")


@dataclass(eq=False)
class QgnModel:
    config: QgnConfig
    params: dict = field(default_factory=dict)  # name -> ConvParams, layout order

    @property
    def dtype(self):
        return next(iter(self.params.values())).weight.dtype

    def astype(self, dtype) -> QgnModel:
        return QgnModel(self.config, {n: p.astype(dtype) for n, p in self.params.items()})

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def flat_params(self) -> list:
        """All parameter arrays (weights and biases) in layout order."""
        out = []
        for p in self.params.values():
            out.extend([p.weight, p.bias])
        return out

    def flat_grads(self) -> list:
        out = []
        for p in self.params.values():
            out.extend([p.grad_weight, p.grad_bias])
        return out

    def num_parameters(self) -> int:
        return sum(a.size for a in self.flat_params())

    def forward(self, image, scheme=Scheme.ALL, gt: TPyramid | None = None, tape=None, counter=None):
        return forward(self, image, scheme, gt, tape=tape, counter=counter)


def init_model(cfg: QgnConfig, dtype=np.float32) -> QgnModel:
    """Fan-in scaled uniform init drawn in layout order from ``default_rng(cfg.seed)``.

    Weights are ``U(-b, b)`` with ``b = sqrt(6 / fan_in)``; the last conv of each
    residual branch is scaled down by 10 so the stacked units start close to
    identity. Biases start at zero.
    """
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, (co, ci, kh, kw) in param_layout(cfg):
        bound = np.sqrt(6.0 / (ci * kh * kw))
        if _is_residual_tail(name):
            bound *= 0.1
        w = rng.uniform(-bound, bound, size=(co, ci, kh, kw)).astype(dtype)
        params[name] = ConvParams(w, np.zeros(co, dtype=dtype))
    return QgnModel(cfg, params)


# -- reverse-mode tape ------------------------------------------------------------------


class Tape:
    """Records backward closures during a forward pass and replays them in reverse.

    Gradients are keyed by the identity of the forward value they belong to;
    the closures keep those values alive for the lifetime of the tape.
    """

    def __init__(self):
        self._ops = []
        self._grads = {}

    def push(self, fn):
        self._ops.append(fn)

    def grad(self, value):
        return self._grads.get(id(value))

    def accumulate(self, value, g):
        key = id(value)
        if key in self._grads:
            self._grads[key] = self._grads[key] + g
        else:
            self._grads[key] = g

    def backward(self):
        for fn in reversed(self._ops):
            fn()
        self._ops.clear()
        self._grads.clear()


def _sparse_grad(tape, value):
    g = tape.grad(value)
    return None if g is None else SparseActivation(value.sites, g)


class _Builder:
    """Forward helpers that register their adjoints on an optional tape."""

    def __init__(self, model, tape, counter, trace=None):
        self.params = model.params
        self.tape = tape
        self.counter = counter
        self.trace = trace

    def dense_conv(self, name, x, stride=1):
        p = self.params[name]
        y = sp.dense_conv_fwd(x, p, stride, self.counter, name)
        if self.tape is not None:
            tape = self.tape

            def back():
                g = tape.grad(y)
                if g is not None:
                    tape.accumulate(x, sp.dense_conv_bwd(x, p, g, stride))

            tape.push(back)
        return y

    def dense_relu(self, name, x):
        if self.trace is not None:
            self.trace.append(x > 0)
        y = sp.relu_dense_fwd(x, self.counter, name)
        if self.tape is not None:
            tape = self.tape

            def back():
                g = tape.grad(y)
                if g is not None:
                    tape.accumulate(x, sp.relu_dense_bwd(x, g))

            tape.push(back)
        return y

    def sparse_conv(self, name, x):
        p = self.params[name]
        y = sp.sparse_conv_fwd(x, p, self.counter, name)
        if self.tape is not None:
            tape = self.tape

            def back():
                g = _sparse_grad(tape, y)
                if g is not None:
                    tape.accumulate(x, sp.sparse_conv_bwd(x, p, g).values)

            tape.push(back)
        return y

    def relu(self, name, x):
        if self.trace is not None:
            self.trace.append(x.values > 0)
        y = sp.relu_fwd(x, self.counter, name)
        if self.tape is not None:
            tape = self.tape

            def back():
                g = _sparse_grad(tape, y)
                if g is not None:
                    tape.accumulate(x, sp.relu_bwd(x, g).values)

            tape.push(back)
        return y

    def add(self, name, a, b):
        y = sp.add_fwd(a, b, self.counter, name)
        if self.tape is not None:
            tape = self.tape

            def back():
                g = tape.grad(y)
                if g is not None:
                    tape.accumulate(a, g)
                    tape.accumulate(b, g)

            tape.push(back)
        return y

    def restrict(self, name, x, sites):
        y = sp.restrict_fwd(x, sites, self.counter, name)
        if self.tape is not None:
            tape = self.tape

            def back():
                g = _sparse_grad(tape, y)
                if g is not None:
                    tape.accumulate(x, sp.restrict_bwd(x, g).values)

            tape.push(back)
        return y

    def upsample(self, name, x):
        y = sp.upsample2x_fwd(x, self.counter, name)
        if self.tape is not None:
            tape = self.tape

            def back():
                g = _sparse_grad(tape, y)
                if g is not None:
                    tape.accumulate(x, sp.upsample2x_bwd(x, g).values)

            tape.push(back)
        return y

    def skip(self, name, enc, sites):
        p = self.params[name]
        y = sp.gather_skip_fwd(enc, sites, p, self.counter, name)
        if self.tape is not None:
            tape = self.tape

            def back():
                g = _sparse_grad(tape, y)
                if g is not None:
                    tape.accumulate(enc, sp.gather_skip_bwd(enc, sites, p, g))

            tape.push(back)
        return y


# -- forward pass -------------------------------------------------------------------


@dataclass(eq=False)
class PredictionQuadtree:
    """Per-level logits plus the cells that were propagated to the next level."""

    logits: dict  # level -> SparseActivation with k + 1 channels
    propagated: dict  # level -> SiteSet of cells whose children were activated
    width: int
    height: int
    max_level: int
    num_classes: int
    scheme: Scheme = Scheme.ALL

    def leaf_rows(self, level: int) -> np.ndarray:
        act = self.logits[level]
        if level == 0 or level not in self.propagated:
            return np.arange(len(act))
        return np.flatnonzero(~np.isin(act.sites.keys, self.propagated[level].keys))

    def predicted_composite(self, level: int) -> np.ndarray:
        """Boolean grid of active cells whose argmax is the composite class."""
        act = self.logits[level]
        grid = np.zeros(act.sites.width * act.sites.height, dtype=bool)
        if len(act):
            grid[act.sites.keys] = np.argmax(act.values, axis=1) == COMPOSITE
        return grid.reshape(act.sites.height, act.sites.width)


def select_parents(scheme: Scheme, level: int, logits: SparseActivation, gt: TPyramid | None) -> SiteSet:
    sites = logits.sites
    if scheme is Scheme.ALL:
        keep = np.ones(len(sites), dtype=bool)
    elif scheme is Scheme.GTC:
        keep = gt.levels[level].ravel()[sites.keys] == COMPOSITE
    else:
        # ties go to the lowest index, i.e. towards composite
        keep = np.argmax(logits.values, axis=1) == COMPOSITE if len(sites) else np.zeros(0, bool)
    return SiteSet(level, sites.width, sites.height, sites.keys[keep])


def check_input(cfg: QgnConfig, image: np.ndarray, scheme: Scheme, gt: TPyramid | None):
    if image.ndim != 3 or image.shape[2] != cfg.in_channels:
        raise ShapeError(f"image must be (H, W, {cfg.in_channels}), got {image.shape}")
    h, w = image.shape[:2]
    f = 1 << cfg.levels
    if h % f or w % f:
        raise ShapeError(f"image {w}x{h} is not divisible by 2^{cfg.levels}")
    if scheme is Scheme.GTC:
        if gt is None:
            raise ConfigError("the GTC scheme needs a ground-truth T-pyramid")
        if gt.max_level < cfg.levels or (gt.height, gt.width) != (h, w):
            raise ShapeError("ground-truth pyramid does not match the image")


def forward(model: QgnModel, image, scheme=Scheme.ALL, gt=None, tape=None, counter=None,
            trace=None) -> PredictionQuadtree:
    """Run the network. ``trace``, if a list, receives every ReLU's active-input mask."""
    cfg = model.config
    scheme = Scheme.parse(scheme)
    image = np.asarray(image)
    check_input(cfg, image, scheme, gt)
    b = _Builder(model, tape, counter, trace)
    L = cfg.levels
    h, w = image.shape[:2]

    x = image.astype(model.dtype)
    x = b.dense_relu("enc0.relu0", b.dense_conv("enc0.conv0", x))
    x = b.dense_relu("enc0.relu1", b.dense_conv("enc0.conv1", x))
    feats = [x]
    for j in range(1, L + 1):
        x = b.dense_relu(f"enc{j}.relu_down", b.dense_conv(f"enc{j}.down", x, stride=2))
        x = b.dense_relu(f"enc{j}.relu0", b.dense_conv(f"enc{j}.conv0", x))
        x = b.dense_relu(f"enc{j}.relu1", b.dense_conv(f"enc{j}.conv1", x))
        feats.append(x)

    a = b.skip(f"skip{L}", feats[L], SiteSet.full(L, w >> L, h >> L))
    logits = {L: b.sparse_conv(f"head{L}", a)}
    propagated = {}
    for l in range(L, 0, -1):
        parents = select_parents(scheme, l, logits[l], gt)
        propagated[l] = parents
        t = b.restrict(f"dec{l}.select", a, parents)
        t = b.relu(f"dec{l}.trans_relu", b.sparse_conv(f"dec{l}.trans", t))
        u = b.upsample(f"dec{l}.upsample", t)
        for k in range(cfg.units_per_block):
            pre = f"dec{l}.unit{k}"
            r = b.relu(f"{pre}.relu0", b.sparse_conv(f"{pre}.conv0", u))
            r = b.sparse_conv(f"{pre}.conv1", r)
            u = b.relu(f"{pre}.relu1", b.add(f"{pre}.add", u, r))
        s = b.skip(f"skip{l - 1}", feats[l - 1], u.sites)
        a = b.add(f"dec{l}.skip_add", u, s)
        logits[l - 1] = b.sparse_conv(f"head{l - 1}", a)
    return PredictionQuadtree(logits, propagated, w, h, L, cfg.num_classes, scheme)


def leaf_labels(values: np.ndarray) -> np.ndarray:
    """Argmax over k + 1 logits; a composite winner falls back to the best real class.

    Ties resolve to the lowest class index.
    """
    if not len(values):
        return np.zeros(0, dtype=np.uint16)
    best = np.argmax(values, axis=1)
    fallback = np.argmax(values[:, 1:], axis=1) + 1
    return np.where(best == COMPOSITE, fallback, best).astype(np.uint16)


def assemble(pred: PredictionQuadtree, width: int | None = None, height: int | None = None) -> Mask:
    width = pred.width if width is None else width
    height = pred.height if height is None else height
    out = np.zeros((height, width), dtype=np.uint16)
    coverage = np.zeros((height, width), dtype=np.int64)
    for level, act in pred.logits.items():
        rows = pred.leaf_rows(level)
        if not len(rows):
            continue
        f = 1 << level
        labels = leaf_labels(act.values[rows])
        gw = act.sites.width
        grid = np.zeros((height // f) * (width // f), dtype=np.uint16)
        cov = np.zeros_like(grid, dtype=np.int64)
        if act.sites.width != width // f or act.sites.height != height // f:
            raise StructureError(f"level-{level} prediction does not match {width}x{height}")
        keys = act.sites.keys[rows]
        grid[keys] = labels
        cov[keys] = 1
        shape = (height // f, gw)
        out += np.repeat(np.repeat(grid.reshape(shape), f, 0), f, 1)
        coverage += np.repeat(np.repeat(cov.reshape(shape), f, 0), f, 1)
    if (coverage != 1).any():
        raise StructureError("predicted leaves do not partition the image")
    return Mask(width, height, pred.num_classes, out)


def predict(model: QgnModel, image, scheme=Scheme.ALL, gt=None, counter=None):
    pred = forward(model, image, scheme, gt, counter=counter)
    return assemble(pred), pred


# -- checkpoints --------------------------------------------------------------------


def config_to_bytes(cfg: QgnConfig) -> bytes:
    n = cfg.levels + 1
    return struct.pack(
        f"<IIIIq{n}I{n}I",
        cfg.levels,
        cfg.num_classes,
        cfg.in_channels,
        cfg.units_per_block,
        cfg.seed,
        *cfg.encoder_channels,
        *cfg.decoder_channels,
    )


def checkpoint_bytes(model: QgnModel) -> bytes:
    parts = [CKPT_MAGIC, config_to_bytes(model.config), struct.pack("<I", len(model.params))]
    for p in model.params.values():
        parts.append(p.weight.astype("<f4").tobytes())
        parts.append(p.bias.astype("<f4").tobytes())
    return b"".join(parts)


def model_from_bytes(buf: bytes) -> QgnModel:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}")
    try:
        levels, k, in_ch, units, seed = struct.unpack_from("<IIIIq", buf, 4)
        n = levels + 1
        off = 4 + struct.calcsize("<IIIIq")
        chans = struct.unpack_from(f"<{2 * n}I", buf, off)
        off += 8 * n
        (n_tensors,) = struct.unpack_from("<I", buf, off)
        off += 4
    except struct.error as exc:
        raise FormatError(f"truncated QGN1 header: {exc}") from exc
    cfg = QgnConfig(levels, k, chans[:n], chans[n:], units, seed, in_ch)
    layout = param_layout(cfg)
    if n_tensors != len(layout):
        raise FormatError(f"checkpoint has {n_tensors} tensors, config implies {len(layout)}")
    params = {}
    for name, shape in layout:
        nw = int(np.prod(shape))
        need = 4 * (nw + shape[0])
        if off + need > len(buf):
            raise FormatError("truncated QGN1 parameter payload")
        w = np.frombuffer(buf, "<f4", nw, off).reshape(shape).astype(np.float32)
        bias = np.frombuffer(buf, "<f4", shape[0], off + 4 * nw).astype(np.float32)
        params[name] = ConvParams(w, bias)
        off += need
    if off != len(buf):
        raise FormatError("trailing bytes after QGN1 parameters")
    return QgnModel(cfg, params)


def save_checkpoint(model: QgnModel, path) -> None:
    try:
        Path(path).write_bytes(checkpoint_bytes(model))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_checkpoint(path) -> QgnModel:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return model_from_bytes(buf)
