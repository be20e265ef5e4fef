import json
import struct

import numpy as np
import pytest

from qgn import sparse as sp
from qgn.cli import main
from qgn.config import RunConfig
from qgn.errors import ConfigError
from qgn.maskio import Mask, gen_synthetic, read_mask, render_image, write_mask
from qgn.model import load_checkpoint
from qgn.quadtree import Quadtree, quadtree_to_bytes


def _rows(text):
    return [dict(kv.split("=", 1) for kv in line.split("\t")) for line in text.strip().splitlines()]


def _ratio(out):
    return float(_rows(out)[-1]["pixel_percent"].rstrip("%"))


def test_encode_uniform_mask(tmp_path, capsys):
    write_mask(Mask(32, 32, 3, np.full((32, 32), 2)), tmp_path / "u.qmr")
    assert main(["encode", str(tmp_path / "u.qmr"), "--out", str(tmp_path / "u.qtr")]) == 0
    assert _ratio(capsys.readouterr().out) == 0.09765625
    assert (tmp_path / "u.qtr").stat().st_size == 21 + 11


def test_encode_decode_round_trip(tmp_path, capsys):
    m = gen_synthetic(96, 64, 7, 5, 3)
    write_mask(m, tmp_path / "m.qmr")
    assert main(["encode", str(tmp_path / "m.qmr"), "--report", "csv"]) == 0
    assert capsys.readouterr().out.startswith("level,pixel_percent\n")
    assert main(["decode", str(tmp_path / "m.qtr"), "--out", str(tmp_path / "back.qmr")]) == 0
    assert (tmp_path / "back.qmr").read_bytes() == (tmp_path / "m.qmr").read_bytes()


def test_encode_errors_map_to_exit_codes(tmp_path, capsys):
    write_mask(gen_synthetic(40, 24, 3, 2, 0), tmp_path / "odd.qmr")
    assert main(["encode", str(tmp_path / "odd.qmr")]) == 2
    assert main(["encode", str(tmp_path / "odd.qmr"), "--auto-pad", "--out", str(tmp_path / "p.qtr")]) == 0
    assert main(["decode", str(tmp_path / "p.qtr"), "--out", str(tmp_path / "p.qmr")]) == 0
    assert read_mask(tmp_path / "p.qmr").width == 64
    (tmp_path / "bad.qmr").write_bytes(b"QMRX" + bytes(14))
    assert main(["encode", str(tmp_path / "bad.qmr")]) == 1
    (tmp_path / "zero.qmr").write_bytes(b"QMR1" + struct.pack("<IIIH", 1, 1, 2, 0))
    assert main(["encode", str(tmp_path / "zero.qmr")]) == 1
    assert main(["encode", str(tmp_path / "missing.qmr")]) == 1
    overlap = Quadtree.from_tuples([(1, 0, 0, 1), (0, 0, 0, 1)], 2, 2, 1, 1)
    (tmp_path / "o.qtr").write_bytes(quadtree_to_bytes(overlap))
    assert main(["decode", str(tmp_path / "o.qtr")]) == 3
    assert "StructureError" in capsys.readouterr().err


@pytest.mark.parametrize(
    "row,expected",
    [("66.34,14.21,9.18,5.52,3.02,1.70", 3.07), ("55.57,18.50,11.98,7.22,4.27,2.46", 4.29), ("100,0,0,0,0,0", None)],
)
def test_stats(row, expected, capsys):
    assert main(["stats", row]) == 0
    got = _ratio(capsys.readouterr().out)
    if expected is None:
        assert got == 0.09765625
    else:
        assert abs(got - expected) <= 0.03


def test_stats_bad_input(tmp_path, capsys):
    assert main(["stats", "50", "10", "0", "0", "0", "0"]) == 6
    assert main(["stats", "a,b"]) == 6
    m = gen_synthetic(64, 64, 3, 3, 1)
    write_mask(m, tmp_path / "m.qmr")
    main(["encode", str(tmp_path / "m.qmr")])
    enc = capsys.readouterr().out
    assert main(["stats", "--quadtree", str(tmp_path / "m.qtr")]) == 0
    assert capsys.readouterr().out == enc


def test_usage_errors_exit_4(capsys):
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == 4
    with pytest.raises(SystemExit) as e:
        main(["train", "--scheme", "dense"])
    assert e.value.code == 4
    assert main(["train", "--set", "train.nope=1"]) == 4


def test_config_file_round_trip_and_overrides(tmp_path):
    cfg = RunConfig()
    cfg.train.lr0 = 0.05
    cfg.model.encoder_channels = (1, 2, 3, 4, 5, 6)
    cfg.data.task = "halves"
    cfg.train.flip = False
    text = cfg.to_text()
    back = RunConfig.from_text(text)
    assert back.to_text() == text
    with pytest.raises(ConfigError):
        RunConfig.from_text("model.seed=3\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("train.max_iter=ten\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("just words\n")
    assert RunConfig.from_text("# comment\n\nseed=4  # trailing\n").seed == 4


def test_train_refuses_pc(capsys):
    assert main(["train", "--scheme", "pc"]) == 4
    assert "PC" in capsys.readouterr().err


def _train(tmp_path, name, *extra):
    out = tmp_path / f"{name}.ckpt"
    args = ["train", "--out", str(out), "--set", "data.width=32", "--set", "data.height=32",
            "--set", "data.n_train=4", "--set", "data.n_val=2", "--set", "train.eval_interval=5", *extra]
    assert main(args) == 0
    return out


def test_training_is_deterministic(tmp_path, capsys):
    a = _train(tmp_path, "a", "--iters", "10", "--seed", "3")
    b = _train(tmp_path, "b", "--iters", "10", "--seed", "3")
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.ckpt.log").read_bytes() == (tmp_path / "b.ckpt.log").read_bytes()
    c = _train(tmp_path, "c", "--iters", "10", "--seed", "4")
    assert c.read_bytes() != a.read_bytes()
    # the saved config reproduces the run
    d = tmp_path / "d.ckpt"
    assert main(["train", "--config", str(tmp_path / "a.ckpt.cfg"), "--out", str(d)]) == 0
    assert d.read_bytes() == a.read_bytes()


def test_gtc_training_touches_fewer_decoder_cells(tmp_path, capsys):
    _train(tmp_path, "all", "--iters", "5")
    _train(tmp_path, "gtc", "--iters", "5", "--scheme", "gtc")
    last = lambda p: [int(l.split("\t")[-1]) for l in p.read_text().splitlines()[1:]]
    all_counts, gtc_counts = last(tmp_path / "all.ckpt.log"), last(tmp_path / "gtc.ckpt.log")
    assert all(g < a for g, a in zip(gtc_counts, all_counts))


def test_halves_task_is_learned_quickly(tmp_path, capsys):
    out = tmp_path / "h.ckpt"
    assert main(["train", "--set", "data.task=halves", "--iters", "100", "--out", str(out)]) == 0
    rows = _rows(capsys.readouterr().out)
    assert float(rows[0]["miou"]) > 0.95
    log = (tmp_path / "h.ckpt.log").read_text().splitlines()
    assert float(log[-1].split("\t")[-3]) > 0.95


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("infer")
    out = d / "m.ckpt"
    args = ["train", "--out", str(out), "--iters", "60", "--set", "data.n_train=8", "--set", "data.n_val=2",
            "--set", "data.width=32", "--set", "data.height=32", "--set", "train.eval_interval=60"]
    assert main(args) == 0
    return out


def test_infer_all_and_pc_from_one_checkpoint(trained, tmp_path, capsys):
    capsys.readouterr()
    m = gen_synthetic(64, 64, 4, 3, 77)
    write_mask(m, tmp_path / "x.qmr")
    dump = tmp_path / "logits.npz"
    assert main(["infer", str(trained), str(tmp_path / "x.qmr"), "--out", str(tmp_path / "pa.qmr"),
                 "--dump-logits", str(dump)]) == 0
    rows = {r["scheme"]: r for r in _rows(capsys.readouterr().out)}
    assert set(rows) == {"all", "pc", "gtc"}
    assert int(rows["pc"]["decoder_scalars"]) <= int(rows["all"]["decoder_scalars"])
    assert int(rows["gtc"]["decoder_scalars"]) <= int(rows["all"]["decoder_scalars"])
    assert "miou" in rows["all"] and "accuracy" in rows["pc"]
    assert main(["infer", str(trained), str(tmp_path / "x.qmr"), "--scheme", "pc",
                 "--out", str(tmp_path / "pp.qmr")]) == 0
    assert read_mask(tmp_path / "pp.qmr").width == 64

    # recompute the All prediction offline from the dumped level-0 logits
    z = np.load(dump)
    v = z["logits0"]
    best = v.argmax(axis=1)
    labels = np.where(best == 0, v[:, 1:].argmax(axis=1) + 1, best)
    offline = np.zeros(64 * 64, dtype=np.uint16)
    offline[z["keys0"]] = labels
    assert np.array_equal(read_mask(tmp_path / "pa.qmr").data.ravel(), offline)


def test_infer_gtc_needs_gt(trained, tmp_path, capsys):
    m = gen_synthetic(32, 32, 4, 2, 5)
    np.save(tmp_path / "img.npy", render_image(m))
    write_mask(m, tmp_path / "gt.qmr")
    assert main(["infer", str(trained), str(tmp_path / "img.npy"), "--scheme", "gtc"]) == 4
    assert main(["infer", str(trained), str(tmp_path / "img.npy"), "--scheme", "gtc",
                 "--gt", str(tmp_path / "gt.qmr"), "--out", str(tmp_path / "g.qmr")]) == 0
    assert main(["infer", str(trained), str(tmp_path / "img.npy"), "--out", str(tmp_path / "n.qmr")]) == 0
    assert "miou" not in capsys.readouterr().out.splitlines()[-1]


def test_infer_rejects_corrupt_checkpoint(trained, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(trained.read_bytes()[:-7])
    write_mask(gen_synthetic(32, 32, 4, 2, 5), tmp_path / "x.qmr")
    assert main(["infer", str(bad), str(tmp_path / "x.qmr")]) == 1
    assert load_checkpoint(trained).config.num_classes == 4


def test_verify_quick_passes(tmp_path, capsys):
    assert main(["verify", "--quick", "--f64"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4 and all(l.startswith("PASS") for l in lines)


def test_verify_catches_transposed_kernel(tmp_path, capsys, monkeypatch):
    orig = sp.sparse_conv_fwd

    def transposed(x, p, *a, **kw):
        q = sp.ConvParams(np.ascontiguousarray(p.weight.transpose(0, 1, 3, 2)), p.bias)
        return orig(x, q, *a, **kw)

    monkeypatch.setattr(sp, "sparse_conv_fwd", transposed)
    out = tmp_path / "fail.json"
    assert main(["verify", "--quick", "--f64", "--out", str(out)]) == 5
    record = json.loads(out.read_text())
    oracle = [s for s in record["suites"] if s["kind"] == "oracle"]
    assert oracle and oracle[0]["failures"]
    assert "FAIL" in capsys.readouterr().out

    # the recorded cases replay against the fixed kernel
    monkeypatch.setattr(sp, "sparse_conv_fwd", orig)
    assert main(["verify", "--replay", str(out)]) == 0
    replayed = capsys.readouterr().out.splitlines()
    oracle_errors = [float(l.rsplit("error=", 1)[1]) for l in replayed if l.startswith("oracle")]
    assert oracle_errors and max(oracle_errors) < 1e-12
