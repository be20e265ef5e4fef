"""Level-wise losses, loss/class weighting, SGD with polynomial decay, and metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, ConfigError, ModeError, ShapeError
from .maskio import Mask, hflip, render_image
from .model import QgnModel, Scheme, Tape, assemble, forward
from .quadtree import TPyramid, build_t_pyramid

log = logging.getLogger(__name__)


# -- loss ---------------------------------------------------------------------------


@dataclass
class ClassWeights:
    w: np.ndarray  # length k + 1; index 0 is the composite class and stays at 1

    @classmethod
    def uniform(cls, k: int) -> ClassWeights:
        return cls(np.ones(k + 1))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def level_targets(logits, gt: TPyramid) -> np.ndarray:
    level = logits.sites.level
    if level > gt.max_level:
        raise ShapeError(f"ground truth has no level {level}")
    grid = gt.levels[level]
    if grid.shape != (logits.sites.height, logits.sites.width):
        raise ShapeError(f"level-{level} ground truth does not match the prediction grid")
    return grid.ravel()[logits.sites.keys].astype(np.intp)


def level_loss(logits, gt: TPyramid, cw: ClassWeights | None = None, with_grad: bool = False):
    """Mean class-weighted cross-entropy over the active cells of one level.

    With ``with_grad`` returns ``(loss, dloss/dlogits)``.
    """
    n = len(logits)
    if logits.channels != gt.num_classes + 1:
        raise ShapeError(f"logits have {logits.channels} channels, expected {gt.num_classes + 1}")
    if n == 0:
        return (0.0, np.zeros_like(logits.values)) if with_grad else 0.0
    t = level_targets(logits, gt)
    x = logits.values.astype(np.float64)
    logp = _log_softmax(x)
    w = np.ones(n) if cw is None else np.asarray(cw.w, dtype=np.float64)[t]
    rows = np.arange(n)
    loss = float(-(w * logp[rows, t]).sum() / n)
    if not with_grad:
        return loss
    g = np.exp(logp)
    g[rows, t] -= 1.0
    g *= (w / n)[:, None]
    return loss, g.astype(logits.values.dtype)


@dataclass
class LossWeights:
    mode: str = "fixed"  # "fixed" or "adaptive"
    gamma: float = 1.0
    delta: float = 0.99
    beta: np.ndarray = None
    iteration: int = 0

    @classmethod
    def fixed(cls, levels: int, gamma: float = 1.0) -> LossWeights:
        return cls("fixed", gamma=gamma, beta=gamma ** np.arange(levels + 1, dtype=np.float64))

    @classmethod
    def adaptive(cls, levels: int, delta: float = 0.99) -> LossWeights:
        return cls("adaptive", delta=delta, beta=np.ones(levels + 1))

    def copy(self) -> LossWeights:
        return LossWeights(self.mode, self.gamma, self.delta, self.beta.copy(), self.iteration)


def total_loss(level_losses: dict, lw: LossWeights) -> float:
    return float(sum(lw.beta[l] * v for l, v in level_losses.items()))


def update_adaptive(lw: LossWeights, level_losses: dict) -> LossWeights:
    """Running average of each level's loss; the weights carry no gradient."""
    if lw.mode != "adaptive":
        raise ModeError("update_adaptive needs adaptive loss weights")
    beta = lw.beta.copy()
    for l, v in level_losses.items():
        beta[l] = lw.delta * beta[l] + (1.0 - lw.delta) * v
    return LossWeights(lw.mode, lw.gamma, lw.delta, beta, lw.iteration + 1)


# -- optimisation -------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr0: float = 0.02
    power: float = 0.9
    max_iter: int = 2000
    reweight_interval: int = 500
    eval_interval: int = 100
    batch_size: int = 1
    momentum: float = 0.0
    weighting: str = "fixed"
    gamma: float = 1.0
    delta: float = 0.99
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or self.power <= 0 or self.max_iter < 1:
            raise ConfigError("need lr0 > 0, power > 0 and max_iter >= 1")


def lr_at(cfg: TrainConfig, i: int) -> float:
    if not 0 <= i <= cfg.max_iter:
        raise BoundsError(f"iteration {i} outside 0..{cfg.max_iter}")
    return cfg.lr0 * (1.0 - i / cfg.max_iter) ** cfg.power


def update_class_weights(ious) -> ClassWeights:
    """Double the weight of classes whose IoU is strictly below the (lower) median."""
    ious = np.nan_to_num(np.asarray(ious, dtype=np.float64), nan=0.0)
    ordered = np.sort(ious)
    median = ordered[(len(ordered) - 1) // 2]
    w = np.ones(len(ious) + 1)
    w[1:][ious < median] = 2.0
    return ClassWeights(w)


def loss_and_backward(model: QgnModel, image, gt: TPyramid, scheme, lw: LossWeights,
                      cw: ClassWeights | None = None, scale: float = 1.0, counter=None):
    """One forward/backward; parameter grads accumulate ``scale * dL/dtheta``."""
    tape = Tape()
    pred = forward(model, image, scheme, gt, tape=tape, counter=counter)
    losses = {}
    for level, logits in pred.logits.items():
        value, g = level_loss(logits, gt, cw, with_grad=True)
        losses[level] = value
        tape.accumulate(logits, (scale * lw.beta[level]) * g)
    tape.backward()
    return total_loss(losses, lw), losses, pred


@dataclass
class StepResult:
    loss: float
    level_losses: dict
    lr: float


def train_step(model: QgnModel, batch, scheme, lw: LossWeights, cw: ClassWeights | None,
               cfg: TrainConfig, i: int, velocity: dict | None = None, counter=None):
    """Forward/backward on ``batch`` of (image, pyramid) pairs, then one SGD update.

    Returns ``(StepResult, new_loss_weights)``; the model is updated in place.
    """
    scheme = Scheme.parse(scheme)
    if scheme is Scheme.PC:
        raise ConfigError("PC propagation is inference-only: it is unreliable for training from scratch")
    model.zero_grad()
    total, level_sum = 0.0, {}
    scale = 1.0 / len(batch)
    for image, gt in batch:
        loss, levels, _ = loss_and_backward(model, image, gt, scheme, lw, cw, scale, counter)
        total += scale * loss
        for l, v in levels.items():
            level_sum[l] = level_sum.get(l, 0.0) + scale * v
    lr = lr_at(cfg, i)
    for name, p in model.params.items():
        for arr, grad, tag in ((p.weight, p.grad_weight, "w"), (p.bias, p.grad_bias, "b")):
            if cfg.momentum and velocity is not None:
                v = velocity.setdefault((name, tag), np.zeros_like(arr))
                v *= cfg.momentum
                v += grad
                grad = v
            arr -= (lr * grad).astype(arr.dtype)
    new_lw = update_adaptive(lw, level_sum) if lw.mode == "adaptive" else lw
    return StepResult(total, level_sum, lr), new_lw


# -- metrics ------------------------------------------------------------------------


class ConfusionMatrix:
    """Counts over true (rows) x predicted (cols) labels ``first..last``."""

    def __init__(self, num_classes: int, include_composite: bool = False):
        self.first = 0 if include_composite else 1
        self.num_classes = num_classes
        n = num_classes + 1 - self.first
        self.counts = np.zeros((n, n), dtype=np.int64)

    def add(self, pred, gt):
        pred, gt = np.asarray(pred).ravel().astype(np.int64), np.asarray(gt).ravel().astype(np.int64)
        if pred.shape != gt.shape:
            raise ShapeError("prediction and ground truth differ in size")
        n = self.counts.shape[0]
        idx = (gt - self.first) * n + (pred - self.first)
        self.counts += np.bincount(idx, minlength=n * n).reshape(n, n)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / max(self.total, 1))

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both prediction and truth."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def miou(self) -> float:
        iou = self.iou()
        present = ~np.isnan(iou)
        return float(iou[present].mean()) if present.any() else float("nan")


@dataclass
class Metrics:
    accuracy: float
    iou: np.ndarray  # index c - 1 for class c
    miou: float


def metrics(pred: Mask, gt: Mask) -> Metrics:
    if (pred.width, pred.height) != (gt.width, gt.height):
        raise ShapeError("prediction and ground truth differ in size")
    cm = ConfusionMatrix(max(pred.num_classes, gt.num_classes))
    cm.add(pred.data, gt.data)
    return Metrics(cm.accuracy(), cm.iou(), cm.miou())


# -- datasets and the training loop -------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray
    mask: Mask
    pyramid: TPyramid


def make_sample(mask: Mask, levels: int, noise: float = 0.1, seed: int = 0) -> Sample:
    return Sample(render_image(mask, noise, seed), mask, build_t_pyramid(mask, levels))


def flipped(sample: Sample, levels: int) -> Sample:
    m = hflip(sample.mask)
    return Sample(np.ascontiguousarray(sample.image[:, ::-1]), m, build_t_pyramid(m, levels))


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    decoder_scalars: int
    per_image: list = field(default_factory=list)

    @property
    def miou(self) -> float:
        return self.confusion.miou()

    @property
    def accuracy(self) -> float:
        return self.confusion.accuracy()


def evaluate(model: QgnModel, samples, scheme) -> EvalResult:
    from .memory import report_from_counter
    from .sparse import TouchCounter

    scheme = Scheme.parse(scheme)
    cm = ConfusionMatrix(model.config.num_classes)
    dec = 0
    per_image = []
    for s in samples:
        counter = TouchCounter()
        pred = forward(model, s.image, scheme, s.pyramid, counter=counter)
        mask = assemble(pred)
        cm.add(mask.data, s.mask.data)
        scalars = report_from_counter(counter).decoder_scalars
        dec += scalars
        per_image.append((mask, scalars))
    return EvalResult(cm, dec, per_image)


def train(model: QgnModel, train_set: list, cfg: TrainConfig, scheme, val_set=None, log_file=None):
    """Run ``cfg.max_iter`` SGD steps. Returns the final loss weights and class weights.

    ``log_file`` receives one tab-separated line per eval interval:
    iter, lr, total loss, per-level losses, per-level beta, mIoU, accuracy,
    decoder activation scalars.
    """
    from .memory import report_from_counter
    from .sparse import TouchCounter

    scheme = Scheme.parse(scheme)
    if scheme is Scheme.PC:
        raise ConfigError("PC propagation is inference-only: it is unreliable for training from scratch")
    L = model.config.levels
    k = model.config.num_classes
    if cfg.weighting == "adaptive":
        lw = LossWeights.adaptive(L, cfg.delta)
    else:
        lw = LossWeights.fixed(L, cfg.gamma)
    cw = ClassWeights.uniform(k)
    rng = np.random.default_rng(cfg.seed)
    variants = [(s, flipped(s, L)) for s in train_set]
    val_set = val_set if val_set is not None else train_set
    velocity = {}
    order = []
    for i in range(cfg.max_iter):
        batch = []
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(variants)))
            plain, flip = variants[order.pop()]
            s = flip if (cfg.flip and rng.random() < 0.5) else plain
            batch.append((s.image, s.pyramid))
        counter = TouchCounter()
        step, lw = train_step(model, batch, scheme, lw, cw, cfg, i, velocity, counter)
        if not np.isfinite(step.loss):
            raise FloatingPointError(f"loss diverged at iteration {i}")
        last = i + 1 == cfg.max_iter
        if cfg.reweight_interval and (i + 1) % cfg.reweight_interval == 0 and not last:
            ev = evaluate(model, val_set, scheme)
            cw = update_class_weights(ev.confusion.iou())
        if log_file is not None and ((i + 1) % cfg.eval_interval == 0 or last):
            ev = evaluate(model, val_set, scheme)
            dec = report_from_counter(counter).decoder_scalars
            fields = [str(i + 1), f"{step.lr:.6g}", f"{step.loss:.6f}"]
            fields += [f"{step.level_losses.get(l, 0.0):.6f}" for l in range(L, -1, -1)]
            fields += [f"{lw.beta[l]:.6f}" for l in range(L, -1, -1)]
            fields += [f"{ev.miou:.6f}", f"{ev.accuracy:.6f}", str(dec)]
            log_file.write("\t".join(fields) + "\n")
        log.debug("iter %d loss %.4f", i, step.loss)
    return lw, cw


def log_header(levels: int) -> str:
    cols = ["iter", "lr", "total_loss"]
    cols += [f"loss{l}" for l in range(levels, -1, -1)]
    cols += [f"beta{l}" for l in range(levels, -1, -1)]
    cols += ["miou", "acc", "decoder_scalars"]
    return "#" + "\t".join(cols) + "\n"
