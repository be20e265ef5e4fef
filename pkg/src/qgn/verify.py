"""Self-check suites: codec round trips, sparse vs masked-dense convolution,
and central finite-difference gradient checks.

Every suite returns a :class:`SuiteResult`; failing cases carry enough
parameters (seed, sizes) to replay them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sparse as sp
from .maskio import gen_synthetic, render_image
from .model import QgnConfig, Scheme, forward, init_model
from .quadtree import build_t_pyramid, quadtree_decode, quadtree_encode
from .sparse import ConvParams, SiteSet, SparseActivation
from .train import LossWeights, level_loss, loss_and_backward, total_loss


@dataclass
class SuiteResult:
    name: str
    kind: str = ""
    dtype: str = "float32"
    cases: int = 0
    failures: list = field(default_factory=list)
    worst: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: {self.cases} cases, {len(self.failures)} failures, worst {self.worst:.3g}"


def rel_error(a, b) -> float:
    """Max abs difference scaled by the magnitude of the reference ``b``."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.size == 0:
        return 0.0
    scale = max(float(np.abs(b).max()), float(np.abs(a).max()), 1e-12)
    return float(np.abs(a - b).max() / scale)


def close(a, b) -> float:
    """Max abs difference over ``max(1, |reference|)``; 0 means identical."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.size == 0:
        return 0.0
    return float(np.abs(a - b).max() / max(1.0, float(np.abs(b).max())))


# -- random instances ---------------------------------------------------------------


def random_sites(rng, level=0, max_side=12, density=None) -> SiteSet:
    h, w = int(rng.integers(1, max_side + 1)), int(rng.integers(1, max_side + 1))
    d = rng.random() if density is None else density
    grid = rng.random((h, w)) < d
    return SiteSet.from_mask(level, grid)


def random_activation(rng, sites, channels, dtype) -> SparseActivation:
    return SparseActivation(sites, rng.uniform(-1, 1, (len(sites), channels)).astype(dtype))


def random_params(rng, c_out, c_in, k, dtype) -> ConvParams:
    return ConvParams(
        rng.uniform(-1, 1, (c_out, c_in, k, k)).astype(dtype),
        rng.uniform(-1, 1, c_out).astype(dtype),
    )


# -- suites -------------------------------------------------------------------------


def codec_suite(n: int = 100, seed: int = 0, max_side: int = 512) -> SuiteResult:
    res = SuiteResult("codec round trip", "codec")
    rng = np.random.default_rng(seed)
    for i in range(n):
        w = 32 * int(rng.integers(1, max_side // 32 + 1))
        h = 32 * int(rng.integers(1, max_side // 32 + 1))
        k = int(rng.integers(2, 151))
        shapes = int(rng.integers(0, 12))
        case_seed = int(rng.integers(2**31))
        m = gen_synthetic(w, h, k, shapes, case_seed)
        qt = quadtree_encode(build_t_pyramid(m, 5))
        covered = int(sum(4 ** int(l) for l in qt.records["l"]))
        ok = covered == w * h and quadtree_decode(qt, w, h) == m
        res.cases += 1
        if not ok:
            res.failures.append({"case": i, "width": w, "height": h, "k": k, "n_shapes": shapes, "seed": case_seed})
    return res


def oracle_case(rng, dtype, conv_fwd=None, conv_bwd=None, density=None):
    """One sparse-vs-masked-dense comparison; returns (error, params).

    The sparse kernels default to whatever :mod:`qgn.sparse` exports at call time.
    """
    conv_fwd = conv_fwd or sp.sparse_conv_fwd
    conv_bwd = conv_bwd or sp.sparse_conv_bwd
    k = int(rng.choice([1, 3, 5]))
    c_in, c_out = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    sites = random_sites(rng, density=density)
    x = random_activation(rng, sites, c_in, dtype)
    p = random_params(rng, c_out, c_in, k, dtype)
    up = random_activation(rng, sites, c_out, dtype)

    y = conv_fwd(x, p)
    mask = sites.to_grid()
    ref = sp.dense_conv_fwd(x.to_dense(), p)
    err = close(y.to_dense()[mask], ref[mask])

    q = ConvParams(p.weight.copy(), p.bias.copy())
    gx = conv_bwd(x, p, up)
    ref_gx = sp.dense_conv_bwd(x.to_dense(), q, up.to_dense())
    err = max(
        err,
        close(gx.to_dense()[mask], ref_gx[mask]),
        close(p.grad_weight, q.grad_weight),
        close(p.grad_bias, q.grad_bias),
    )
    info = {"kernel": k, "c_in": c_in, "c_out": c_out, "height": sites.height, "width": sites.width,
            "active": len(sites)}
    return err, info


def oracle_suite(n: int = 500, seed: int = 0, dtype=np.float32, tol: float = 1e-6,
                 conv_fwd=None, conv_bwd=None) -> SuiteResult:
    res = SuiteResult(f"sparse vs masked dense ({np.dtype(dtype).name})", "oracle", np.dtype(dtype).name)
    rng = np.random.default_rng(seed)
    for i in range(n):
        # sweep densities from empty to full
        density = i / max(n - 1, 1)
        case_seed = int(rng.integers(2**31))
        err, info = oracle_case(np.random.default_rng(case_seed), dtype, conv_fwd, conv_bwd, density)
        res.cases += 1
        res.worst = max(res.worst, err)
        if not err <= tol:
            res.failures.append({"case": i, "seed": case_seed, "density": density, "error": err, **info})
    return res


def fd_gradient(f, arr: np.ndarray, index, h: float) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``arr[index]``, using the exact
    representable step so f32 rounding of the perturbation does not bias it."""
    old = arr[index].copy()
    arr[index] = old + h
    hi_val, f_hi = arr[index].astype(np.float64), f()
    arr[index] = old - h
    lo_val, f_lo = arr[index].astype(np.float64), f()
    arr[index] = old
    return (f_hi - f_lo) / (hi_val - lo_val)


def _projected(y, r):
    return float(np.sum(np.asarray(y, np.float64) * r))


def _op_checks(rng, dtype):
    """Yield (name, analytic, numeric) pairs for every primitive's backward."""
    h = 1e-3 if dtype == np.float32 else 1e-6
    sites = random_sites(rng, max_side=6, density=0.6)
    c_in, c_out = 3, 2
    x = random_activation(rng, sites, c_in, dtype)

    # sparse conv: input and weight gradients
    p = random_params(rng, c_out, c_in, 3, dtype)
    r = rng.uniform(-1, 1, (len(sites), c_out))
    up = SparseActivation(sites, r.astype(dtype))
    gx = sp.sparse_conv_bwd(x, p, up).values
    f = lambda: _projected(sp.sparse_conv_fwd(x, p).values, r)
    for idx in np.ndindex(x.values.shape):
        yield "sparse_conv.input", gx[idx], fd_gradient(f, x.values, idx, h)
    for idx in list(np.ndindex(p.weight.shape))[::3]:
        yield "sparse_conv.weight", p.grad_weight[idx], fd_gradient(f, p.weight, idx, h)
    for idx in np.ndindex(p.bias.shape):
        yield "sparse_conv.bias", p.grad_bias[idx], fd_gradient(f, p.bias, idx, h)

    # dense conv, stride 1 and 2
    for stride in (1, 2):
        xd = rng.uniform(-1, 1, (6, 4, c_in)).astype(dtype)
        pd = random_params(rng, c_out, c_in, 3, dtype)
        out_shape = sp.dense_conv_fwd(xd, pd, stride).shape
        rd = rng.uniform(-1, 1, out_shape)
        gxd = sp.dense_conv_bwd(xd, pd, rd.astype(dtype), stride)
        fd = lambda: _projected(sp.dense_conv_fwd(xd, pd, stride), rd)
        for idx in list(np.ndindex(xd.shape))[::2]:
            yield f"dense_conv.s{stride}.input", gxd[idx], fd_gradient(fd, xd, idx, h)
        for idx in list(np.ndindex(pd.weight.shape))[::3]:
            yield f"dense_conv.s{stride}.weight", pd.grad_weight[idx], fd_gradient(fd, pd.weight, idx, h)

    # upsample
    ru = rng.uniform(-1, 1, (4 * len(sites), c_in))
    gu = sp.upsample2x_bwd(x, SparseActivation(sp.children_of(sites), ru.astype(dtype))).values
    fu = lambda: _projected(sp.upsample2x_fwd(x).values, ru)
    for idx in np.ndindex(x.values.shape):
        yield "upsample.input", gu[idx], fd_gradient(fu, x.values, idx, h)

    # skip gather
    enc = rng.uniform(-1, 1, (sites.height, sites.width, c_in)).astype(dtype)
    ps = random_params(rng, c_out, c_in, 1, dtype)
    gs = sp.gather_skip_bwd(enc, sites, ps, up)
    fs = lambda: _projected(sp.gather_skip_fwd(enc, sites, ps).values, r)
    for idx in np.ndindex(enc.shape):
        yield "skip.encoder", gs[idx], fd_gradient(fs, enc, idx, h)
    for idx in np.ndindex(ps.weight.shape):
        yield "skip.weight", ps.grad_weight[idx], fd_gradient(fs, ps.weight, idx, h)

    # relu, away from the kink
    rr = rng.uniform(-1, 1, x.values.shape)
    gr = sp.relu_bwd(x, SparseActivation(sites, rr.astype(dtype))).values
    fr = lambda: _projected(sp.relu_fwd(x).values, rr)
    for idx in np.ndindex(x.values.shape):
        if abs(float(x.values[idx])) > 10 * h:
            yield "relu.input", gr[idx], fd_gradient(fr, x.values, idx, h)

    # add
    x2 = random_activation(rng, sites, c_in, dtype)
    ga, _ = sp.add_bwd(SparseActivation(sites, rr.astype(dtype)))
    fa = lambda: _projected(sp.add_fwd(x, x2).values, rr)
    for idx in list(np.ndindex(x.values.shape))[::2]:
        yield "add.input", ga.values[idx], fd_gradient(fa, x.values, idx, h)


def _gradient_pairs_by_op(pairs):
    groups = {}
    for name, a, n in pairs:
        groups.setdefault(name, ([], []))
        groups[name][0].append(float(a))
        groups[name][1].append(float(n))
    return groups


def op_gradient_suite(dtype=np.float32, seed: int = 0, tol: float | None = None) -> SuiteResult:
    tol = (1e-3 if dtype == np.float32 else 1e-7) if tol is None else tol
    res = SuiteResult(f"op finite differences ({np.dtype(dtype).name})", "op", np.dtype(dtype).name)
    rng = np.random.default_rng(seed)
    for name, (a, n) in _gradient_pairs_by_op(_op_checks(rng, dtype)).items():
        err = rel_error(a, n)
        res.cases += 1
        res.worst = max(res.worst, err)
        if not err < tol:
            res.failures.append({"op": name, "seed": seed, "error": err})
    return res


def end_to_end_gradient_check(dtype=np.float64, seed: int = 0, n_params: int = 10, scheme=Scheme.ALL,
                              size: int = 32, k: int = 3, levels: int = 5):
    """FD check of the total loss w.r.t. ``n_params`` sampled parameters.

    Samples are drawn among parameters whose analytic gradient is at least 10% of
    the largest gradient: below that, f32 rounding dominates the difference
    quotient. A sample is rejected when some ReLU input changes sign between the
    two evaluation points, since the loss is not differentiable across that step.
    Returns ``(max relative error, rows, rejected)`` with rows
    ``(name, index, analytic, numeric)``.
    """
    cfg = QgnConfig(levels=levels, num_classes=k, seed=seed)
    model = init_model(cfg, dtype=dtype)
    mask = gen_synthetic(size, size, k, 3, seed + 1)
    image = render_image(mask, seed=seed).astype(dtype)
    gt = build_t_pyramid(mask, levels)
    lw = LossWeights.fixed(levels, 0.75)

    model.zero_grad()
    loss_and_backward(model, image, gt, scheme, lw)
    grads = {n: (p.grad_weight.copy(), p.grad_bias.copy()) for n, p in model.params.items()}

    patterns = []

    def loss():
        trace = []
        pred = forward(model, image, scheme, gt, trace=trace)
        patterns.append(trace)
        return total_loss({l: level_loss(a, gt) for l, a in pred.logits.items()}, lw)

    gmax = max(max(np.abs(gw).max(), np.abs(gb).max()) for gw, gb in grads.values())
    candidates = []
    for name, p in model.params.items():
        gw, gb = grads[name]
        for which, g in (("weight", gw), ("bias", gb)):
            for idx in zip(*np.nonzero(np.abs(g) >= 0.1 * gmax)):
                candidates.append((name, which, idx))
    rng = np.random.default_rng(seed)
    h = 3e-4 if dtype == np.float32 else 1e-6
    rows, rejected, worst = [], 0, 0.0
    for i in rng.permutation(len(candidates)):
        if len(rows) == n_params:
            break
        name, which, idx = candidates[i]
        p = model.params[name]
        arr = p.weight if which == "weight" else p.bias
        analytic = float(grads[name][0 if which == "weight" else 1][idx])
        patterns.clear()
        numeric = fd_gradient(loss, arr, idx, h * max(1.0, abs(float(arr[idx]))))
        hi, lo = patterns
        if len(hi) != len(lo) or any(not np.array_equal(a, b) for a, b in zip(hi, lo)):
            rejected += 1
            continue
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, err)
        rows.append((f"{name}.{which}", tuple(int(j) for j in idx), analytic, numeric))
    return worst, rows, rejected


def model_gradient_suite(dtype=np.float32, seed: int = 0, tol: float | None = None) -> SuiteResult:
    tol = (1e-2 if dtype == np.float32 else 1e-7) if tol is None else tol
    res = SuiteResult(f"end-to-end finite differences ({np.dtype(dtype).name})", "model", np.dtype(dtype).name)
    for scheme in (Scheme.ALL, Scheme.GTC):
        worst, rows, _ = end_to_end_gradient_check(dtype, seed, scheme=scheme)
        res.cases += len(rows)
        res.worst = max(res.worst, worst)
        if not worst < tol:
            res.failures.append({"scheme": scheme.value, "seed": seed, "error": worst, "rows": rows})
    return res


def run_all(f64: bool = False, seed: int = 0, quick: bool = False) -> list:
    dtype = np.float64 if f64 else np.float32
    n_oracle = 100 if quick else 500
    return [
        codec_suite(20 if quick else 100, seed, max_side=256 if quick else 512),
        oracle_suite(n_oracle, seed, dtype, tol=1e-6 if dtype == np.float32 else 1e-12),
        op_gradient_suite(dtype, seed),
        model_gradient_suite(dtype, seed),
    ]


def replay(kind: str, case: dict, dtype: str = "float32") -> float:
    """Re-run one recorded failure. Returns its error (0 or 1 for codec cases)."""
    dt = np.dtype(dtype).type
    if kind == "codec":
        m = gen_synthetic(case["width"], case["height"], case["k"], case["n_shapes"], case["seed"])
        qt = quadtree_encode(build_t_pyramid(m, 5))
        return 0.0 if quadtree_decode(qt, m.width, m.height) == m else 1.0
    if kind == "oracle":
        return oracle_case(np.random.default_rng(case["seed"]), dt, density=case["density"])[0]
    if kind == "op":
        pairs = _gradient_pairs_by_op(_op_checks(np.random.default_rng(case["seed"]), dt))
        return rel_error(*pairs[case["op"]])
    if kind == "model":
        return end_to_end_gradient_check(dt, case["seed"], scheme=Scheme.parse(case["scheme"]))[0]
    raise ValueError(f"unknown suite kind {kind!r}")
