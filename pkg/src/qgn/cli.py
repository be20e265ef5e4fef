"""``qgn`` command line.

Exit codes: 0 ok, 1 format/io, 2 shape/bounds, 3 structure, 4 config/mode
(including bad command-line usage), 5 verification failure, 6 bad input numbers.
Data goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import verify
from .config import RunConfig
from .errors import ConfigError, InputError, IoError, QgnError, VerificationError
from .maskio import gen_synthetic, halves_mask, pad_to_multiple, read_mask, render_image, write_mask
from .memory import report_from_counter
from .model import Scheme, assemble, forward, init_model, load_checkpoint, save_checkpoint
from .quadtree import (
    build_t_pyramid,
    quadtree_decode,
    quadtree_encode,
    ratio_from_table_row,
    read_quadtree,
    sparsity_stats,
    write_quadtree,
)
from .sparse import TouchCounter
from .train import ConfusionMatrix, log_header, make_sample, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def _common(p, scheme=True):
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--out", help="output path")
    p.add_argument("--report", choices=["text", "csv"])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    if scheme:
        p.add_argument("--scheme", choices=[s.value for s in Scheme])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qgn", description="Quadtree segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("encode", help="QMR1 mask -> QTR1 quadtree, prints sparsity stats")
    p.add_argument("input")
    p.add_argument("--auto-pad", action="store_true", help="edge-pad the mask to a multiple of 2^L")
    _common(p, scheme=False)

    p = sub.add_parser("decode", help="QTR1 quadtree -> QMR1 mask")
    p.add_argument("input")
    _common(p, scheme=False)

    p = sub.add_parser("stats", help="compression ratio from per-level pixel percentages")
    p.add_argument("percentages", nargs="*", help="p_L .. p_0, comma or space separated")
    p.add_argument("--quadtree", help="read the percentages off a QTR1 file instead")
    _common(p, scheme=False)

    p = sub.add_parser("train", help="train on a synthetic task, write a QGN1 checkpoint and log")
    p.add_argument("--iters", type=int, help="shorthand for --set train.max_iter=N")
    p.add_argument("--log", help="training log path (default: <out>.log)")
    _common(p)

    p = sub.add_parser("infer", help="predict a mask with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("input", help="QMR1 mask (rendered to an image) or .npy image (H, W, C)")
    p.add_argument("--gt", help="ground-truth QMR1 mask (defaults to the input mask)")
    p.add_argument("--dump-logits", help="write per-level logits to this .npz")
    _common(p)

    p = sub.add_parser("verify", help="run the self-check suites")
    p.add_argument("--f64", action="store_true", help="check gradients in float64")
    p.add_argument("--quick", action="store_true", help="smaller codec and oracle suites")
    p.add_argument("--replay", help="re-run the cases of a failure file")
    _common(p, scheme=False)
    return parser


def run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.apply(key.strip(), value.strip())
    cfg.subcommand = args.command
    if args.seed is not None:
        cfg.seed = args.seed
    if args.levels is not None:
        cfg.model.levels = args.levels
        n = args.levels + 1
        if len(cfg.model.encoder_channels) != n:
            cfg.model.encoder_channels = _resize(cfg.model.encoder_channels, n)
            cfg.model.decoder_channels = tuple(reversed(_resize(tuple(reversed(cfg.model.decoder_channels)), n)))
    if getattr(args, "scheme", None):
        cfg.scheme = args.scheme
    if args.report:
        cfg.report = args.report
    if args.out:
        cfg.output = args.out
    if getattr(args, "iters", None) is not None:
        cfg.train.max_iter = args.iters
    if getattr(args, "input", None):
        cfg.input = args.input
    if getattr(args, "gt", None):
        cfg.gt = args.gt
    return cfg.validate()


def _resize(channels: tuple, n: int) -> tuple:
    """Truncate a per-level channel list, or extend it by repeating the last entry."""
    return tuple(channels[:n]) + (channels[-1],) * max(0, n - len(channels))


def _emit(rows: list, fmt: str, out=None):
    out = out or sys.stdout
    if fmt == "csv":
        w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    else:
        for r in rows:
            out.write("\t".join(f"{k}={v}" for k, v in r.items()) + "\n")


def _stats_rows(fractions, ratio) -> list:
    rows = [{"level": l, "pixel_percent": f"{p:.6g}"} for l, p in reversed(list(enumerate(fractions)))]
    rows.append({"level": "ratio", "pixel_percent": f"{ratio:.10g}%"})
    return rows


def cmd_encode(args) -> int:
    cfg = run_config(args)
    L = cfg.model.levels
    mask = read_mask(cfg.input)
    if args.auto_pad:
        mask = pad_to_multiple(mask, 1 << L)
    qt = quadtree_encode(build_t_pyramid(mask, L))
    out = cfg.output or str(Path(cfg.input).with_suffix(".qtr"))
    write_quadtree(qt, out)
    stats = sparsity_stats(qt)
    print(f"records={len(qt)}\twidth={qt.width}\theight={qt.height}", file=sys.stderr)
    _emit(_stats_rows(stats.pixel_fraction, stats.ratio), cfg.report)
    return 0


def cmd_decode(args) -> int:
    cfg = run_config(args)
    qt = read_quadtree(cfg.input)
    mask = quadtree_decode(qt)
    out = cfg.output or str(Path(cfg.input).with_suffix(".qmr"))
    write_mask(mask, out)
    print(f"wrote {out} ({mask.width}x{mask.height}, k={mask.num_classes})", file=sys.stderr)
    return 0


def cmd_stats(args) -> int:
    cfg = run_config(args)
    if args.quadtree:
        stats = sparsity_stats(read_quadtree(args.quadtree))
        _emit(_stats_rows(stats.pixel_fraction, stats.ratio), cfg.report)
        return 0
    values = [v for item in args.percentages for v in item.replace(",", " ").split()]
    try:
        row = [float(v) for v in values]
    except ValueError:
        raise InputError(f"percentages must be numbers: {values}") from None
    ratio = ratio_from_table_row(row)
    _emit(_stats_rows(list(reversed(row)), ratio), cfg.report)
    return 0


def training_data(cfg: RunConfig):
    d, L, k = cfg.data, cfg.model.levels, cfg.model.num_classes
    base = cfg.seed * 100_000
    if d.task == "halves":
        s = make_sample(halves_mask(d.width, d.height), L, d.noise, base)
        return [s], [s]
    if d.task == "files":
        paths = sorted(Path(d.dir).glob("*.qmr")) if d.dir else []
        if not paths:
            raise IoError(f"no .qmr masks in data.dir={d.dir!r}")
        masks = [pad_to_multiple(read_mask(p), 1 << L) for p in paths]
        if any(m.num_classes != k for m in masks):
            raise ConfigError(f"every training mask must have model.num_classes={k} classes")
        samples = [make_sample(m, L, d.noise, base + i) for i, m in enumerate(masks)]
        val = samples[-d.n_val :] if len(samples) > d.n_val else samples
        return samples, val
    train_set = [
        make_sample(gen_synthetic(d.width, d.height, k, d.n_shapes, base + i), L, d.noise, base + i)
        for i in range(d.n_train)
    ]
    val_set = [
        make_sample(gen_synthetic(d.width, d.height, k, d.n_shapes, base + 1000 + i), L, d.noise, base + 1000 + i)
        for i in range(d.n_val)
    ]
    return train_set, val_set


def cmd_train(args) -> int:
    cfg = run_config(args)
    scheme = Scheme.parse(cfg.scheme)
    if scheme is Scheme.PC:
        raise ConfigError("cannot train with the PC scheme: predicted structure is meaningless "
                          "before training, use all or gtc")
    train_set, val_set = training_data(cfg)
    model = init_model(cfg.model)
    out = Path(cfg.output or "qgn.ckpt")
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log")
    with open(log_path, "w") as log:
        log.write(log_header(cfg.model.levels))
        train(model, train_set, cfg.train, scheme, val_set, log_file=log)
    save_checkpoint(model, out)
    cfg.save(out.with_name(out.name + ".cfg"))
    rows = []
    for s in (Scheme.ALL, Scheme.GTC, Scheme.PC):
        rows.append(_scheme_row(model, val_set, s))
    _emit(rows, cfg.report)
    print(f"wrote {out} and {log_path}", file=sys.stderr)
    return 0


def _scheme_row(model, samples, scheme) -> dict:
    cm = ConfusionMatrix(model.config.num_classes)
    enc = dec = macs = 0
    for s in samples:
        counter = TouchCounter()
        pred = forward(model, s.image, scheme, s.pyramid, counter=counter)
        if s.mask is not None:
            cm.add(assemble(pred).data, s.mask.data)
        rep = report_from_counter(counter)
        enc, dec, macs = enc + rep.encoder_scalars, dec + rep.decoder_scalars, macs + rep.decoder_macs
    row = {"scheme": scheme.value, "encoder_scalars": enc, "decoder_scalars": dec, "decoder_macs": macs}
    if cm.total:
        row["accuracy"] = f"{cm.accuracy():.6f}"
        row["miou"] = f"{cm.miou():.6f}"
    return row


class _Input:
    def __init__(self, image, mask, pyramid):
        self.image, self.mask, self.pyramid = image, mask, pyramid


def cmd_infer(args) -> int:
    cfg = run_config(args)
    model = load_checkpoint(args.checkpoint)
    L = model.config.levels
    scheme = Scheme.parse(cfg.scheme)
    path = Path(cfg.input)
    gt = read_mask(cfg.gt) if cfg.gt else None
    if path.suffix == ".npy":
        try:
            image = np.load(path)
        except (OSError, ValueError) as e:
            raise IoError(f"cannot read image {path}: {e}") from e
    else:
        mask = read_mask(path)
        image = render_image(mask, cfg.data.noise, cfg.seed, model.config.in_channels)
        gt = gt if gt is not None else mask
    if gt is None and scheme is Scheme.GTC:
        raise ConfigError("GTC inference needs ground truth (--gt); it is an upper-bound mode")
    sample = _Input(image, gt, build_t_pyramid(gt, L) if gt is not None else None)

    pred = forward(model, image, scheme, sample.pyramid)
    mask_out = assemble(pred)
    out = cfg.output or str(path.with_name(path.stem + f".pred-{scheme.value}.qmr"))
    write_mask(mask_out, out)
    if args.dump_logits:
        arrays = {"width": pred.width, "height": pred.height}
        for l, act in pred.logits.items():
            arrays[f"logits{l}"] = act.values
            arrays[f"keys{l}"] = act.sites.keys
            if l in pred.propagated:
                arrays[f"propagated{l}"] = pred.propagated[l].keys
        np.savez(args.dump_logits, **arrays)

    schemes = [Scheme.ALL, Scheme.PC] + ([Scheme.GTC] if gt is not None else [])
    rows = [_scheme_row(model, [sample], s) for s in schemes]
    _emit(rows, cfg.report)
    print(f"wrote {out} (scheme {scheme.value})", file=sys.stderr)
    return 0


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, (tuple, list)):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    return x


def cmd_verify(args) -> int:
    cfg = run_config(args)
    if args.replay:
        try:
            record = json.loads(Path(args.replay).read_text())
        except (OSError, ValueError) as e:
            raise IoError(f"cannot read failure file {args.replay}: {e}") from e
        for suite in record["suites"]:
            for case in suite["failures"]:
                err = verify.replay(suite["kind"], case, suite["dtype"])
                print(f"{suite['kind']}\t{json.dumps(case)[:120]}\terror={err:.3g}")
        return 0
    results = verify.run_all(f64=args.f64, seed=cfg.seed, quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        out = cfg.output or "qgn-verify-failure.json"
        record = {"seed": cfg.seed, "f64": args.f64,
                  "suites": [{"name": r.name, "kind": r.kind, "dtype": r.dtype, "failures": r.failures}
                             for r in failed]}
        Path(out).write_text(json.dumps(_jsonable(record), indent=1) + "\n")
        raise VerificationError(f"{len(failed)} suite(s) failed; cases written to {out} "
                                f"(replay with: qgn verify --replay {out})")
    return 0


COMMANDS = {
    "encode": cmd_encode,
    "decode": cmd_decode,
    "stats": cmd_stats,
    "train": cmd_train,
    "infer": cmd_infer,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except QgnError as e:
        print(f"qgn {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
