"""Closed-form activation accounting for the toy network.

Counts are derived from boolean occupancy grids only, without running the
network or building rulebooks, so they can be checked against the touch
counters recorded by an instrumented forward pass.

Per layer: ``scalars`` stored output values, ``reads`` input-vector reads,
``macs`` multiply-adds. Sparse convs only count pairs whose source is active.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .model import QgnConfig, Scheme
from .quadtree import TPyramid, upsample_grid

BYTES_PER_SCALAR = 4


def neighbour_pairs(grid: np.ndarray, kh: int = 3, kw: int = 3) -> int:
    """Number of (active output, active source) pairs for a same-padded kernel."""
    h, w = grid.shape
    padded = np.pad(grid, ((kh // 2, kh // 2), (kw // 2, kw // 2)))
    total = 0
    for dy in range(kh):
        for dx in range(kw):
            total += int(np.count_nonzero(grid & padded[dy : dy + h, dx : dx + w]))
    return total


def active_grids(cfg: QgnConfig, width: int, height: int, scheme, gt=None, pred_composite=None) -> dict:
    """Occupancy grid per level for a propagation scheme.

    ``pred_composite`` maps level -> boolean grid of cells predicted composite
    (needed for PC); ``gt`` is the ground-truth pyramid (needed for GTC).
    """
    scheme = Scheme.parse(scheme)
    L = cfg.levels
    if scheme is Scheme.GTC and gt is None:
        raise ConfigError("GTC accounting needs the ground-truth pyramid")
    if scheme is Scheme.PC and pred_composite is None:
        raise ConfigError("PC accounting needs predicted composite maps")
    active = {L: np.ones((height >> L, width >> L), dtype=bool)}
    for l in range(L, 0, -1):
        if scheme is Scheme.ALL:
            comp = np.ones_like(active[l])
        elif scheme is Scheme.GTC:
            comp = gt.levels[l] == 0
        else:
            comp = np.asarray(pred_composite[l], dtype=bool)
        if comp.shape != active[l].shape:
            raise ShapeError(f"level-{l} composite map has shape {comp.shape}, expected {active[l].shape}")
        active[l - 1] = upsample_grid(active[l] & comp)
    return active


@dataclass
class ActivationReport:
    layers: dict  # name -> {"scalars", "reads", "macs"}

    def total(self, prefix_filter=None, key="scalars") -> int:
        return sum(v[key] for n, v in self.layers.items() if prefix_filter is None or prefix_filter(n))

    @property
    def encoder_scalars(self) -> int:
        return self.total(is_encoder_layer)

    @property
    def decoder_scalars(self) -> int:
        return self.total(lambda n: not is_encoder_layer(n))

    @property
    def encoder_macs(self) -> int:
        return self.total(is_encoder_layer, "macs")

    @property
    def decoder_macs(self) -> int:
        return self.total(lambda n: not is_encoder_layer(n), "macs")

    def summary(self) -> dict:
        return {
            "encoder_scalars": self.encoder_scalars,
            "decoder_scalars": self.decoder_scalars,
            "encoder_macs": self.encoder_macs,
            "decoder_macs": self.decoder_macs,
            "total_bytes": BYTES_PER_SCALAR * (self.encoder_scalars + self.decoder_scalars),
        }


def is_encoder_layer(name: str) -> bool:
    return name.startswith("enc")


def count_activations(cfg: QgnConfig, width: int, height: int, scheme, gt: TPyramid | None = None,
                      pred_composite=None) -> ActivationReport:
    L, n_out = cfg.levels, cfg.num_classes + 1
    f = 1 << L
    if width % f or height % f:
        raise ShapeError(f"{width}x{height} is not divisible by 2^{L}")
    layers = {}

    def put(name, scalars=0, reads=0, macs=0):
        layers[name] = {"scalars": int(scalars), "reads": int(reads), "macs": int(macs)}

    def dense(name, h, w, c_in, c_out):
        put(name, h * w * c_out, h * w * 9, h * w * 9 * c_in * c_out)
        return h * w * c_out

    c_prev = cfg.in_channels
    for j in range(L + 1):
        h, w = height >> j, width >> j
        c = cfg.enc(j)
        if j == 0:
            put("enc0.relu0", dense("enc0.conv0", h, w, c_prev, c))
        else:
            put(f"enc{j}.relu_down", dense(f"enc{j}.down", h, w, c_prev, c))
            put(f"enc{j}.relu0", dense(f"enc{j}.conv0", h, w, c, c))
        put(f"enc{j}.relu1", dense(f"enc{j}.conv1", h, w, c, c))
        c_prev = c

    active = active_grids(cfg, width, height, scheme, gt, pred_composite)
    n_top = int(active[L].sum())
    put(f"skip{L}", n_top * cfg.dec(L), n_top, n_top * cfg.enc(L) * cfg.dec(L))
    put(f"head{L}", n_top * n_out, n_top, n_top * cfg.dec(L) * n_out)
    for l in range(L, 0, -1):
        n_par = int(active[l - 1].sum()) // 4
        child = active[l - 1]
        n = int(child.sum())
        c_in, c = cfg.dec(l), cfg.dec(l - 1)
        put(f"dec{l}.select", 0, n_par)
        put(f"dec{l}.trans", n_par * c, n_par, n_par * c_in * c)
        put(f"dec{l}.trans_relu", n_par * c, n_par)
        put(f"dec{l}.upsample", n * c, n)
        pairs = neighbour_pairs(child)
        for k in range(cfg.units_per_block):
            pre = f"dec{l}.unit{k}"
            put(f"{pre}.conv0", n * c, pairs, pairs * c * c)
            put(f"{pre}.relu0", n * c, n)
            put(f"{pre}.conv1", n * c, pairs, pairs * c * c)
            put(f"{pre}.add", n * c, 2 * n)
            put(f"{pre}.relu1", n * c, n)
        put(f"skip{l - 1}", n * c, n, n * cfg.enc(l - 1) * c)
        put(f"dec{l}.skip_add", n * c, 2 * n)
        put(f"head{l - 1}", n * n_out, n, n * c * n_out)
    return ActivationReport(layers)


def report_from_counter(counter) -> ActivationReport:
    return ActivationReport(counter.as_dict())
