import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qgn.errors import BoundsError, FormatError, InputError, ShapeError, StructureError
from qgn.maskio import Mask, gen_synthetic
from qgn.quadtree import (
    Quadtree,
    build_t_pyramid,
    merge_patch,
    quadtree_decode,
    quadtree_encode,
    quadtree_from_bytes,
    quadtree_to_bytes,
    query,
    ratio_from_fractions,
    ratio_from_table_row,
    sparsity_stats,
)


@pytest.mark.parametrize(
    "patch,expected",
    [([[3, 3], [3, 3]], 3), ([[1, 2], [1, 1]], 0), ([[0, 0], [0, 0]], 0), ([[2, 2], [2, 0]], 0)],
)
def test_merge_patch(patch, expected):
    assert merge_patch(patch) == expected


def _pyramid_by_hand(grid, levels):
    """Reference pyramid built cell by cell with merge_patch."""
    out = [np.asarray(grid)]
    for _ in range(levels):
        g = out[-1]
        h, w = g.shape
        nxt = np.zeros((h // 2, w // 2), dtype=g.dtype)
        for y in range(h // 2):
            for x in range(w // 2):
                nxt[y, x] = merge_patch(g[2 * y : 2 * y + 2, 2 * x : 2 * x + 2])
        out.append(nxt)
    return out


def test_uniform_pyramid():
    tp = build_t_pyramid(Mask(4, 4, 3, np.full((4, 4), 2)), 2)
    assert tp.levels[1].tolist() == [[2, 2], [2, 2]]
    assert tp.levels[2].tolist() == [[2]]


def test_one_deviant_pixel():
    data = np.full((4, 4), 1)
    data[2, 1] = 2
    tp = build_t_pyramid(Mask(4, 4, 2, data), 2)
    assert tp.levels[1].tolist() == [[1, 1], [0, 1]]
    assert tp.levels[2].tolist() == [[0]]


def test_pyramid_matches_cellwise_merge():
    m = gen_synthetic(64, 32, 5, 6, 3)
    tp = build_t_pyramid(m, 5)
    for a, b in zip(tp.levels, _pyramid_by_hand(m.data, 5)):
        assert np.array_equal(a, b)
    assert not (tp.levels[0] == 0).any()


def test_indivisible_dims():
    with pytest.raises(ShapeError):
        build_t_pyramid(Mask(4, 3, 2, np.ones((3, 4))), 1)


def test_uniform_encodes_to_root_leaf():
    qt = quadtree_encode(build_t_pyramid(Mask(32, 32, 4, np.full((32, 32), 3)), 5))
    assert qt.as_tuples() == [(5, 0, 0, 3)]


def test_left_right_halves():
    data = np.ones((4, 4), dtype=int)
    data[:, 2:] = 2
    qt = quadtree_encode(build_t_pyramid(Mask(4, 4, 2, data), 2))
    # root is composite, the four level-1 cells are uniform leaves
    assert sorted(qt.as_tuples()) == [(1, 0, 0, 1), (1, 0, 1, 1), (1, 1, 0, 2), (1, 1, 1, 2)]


def _encode_by_hand(tp):
    recs = []
    top = tp.max_level
    for l in range(top, -1, -1):
        g = tp.levels[l]
        for y in range(g.shape[0]):
            for x in range(g.shape[1]):
                if g[y, x] == 0:
                    continue
                if l == top or tp.levels[l + 1][y // 2, x // 2] == 0:
                    recs.append((l, x, y, int(g[y, x])))
    return recs


def test_encode_matches_emission_rule_and_is_sorted():
    tp = build_t_pyramid(gen_synthetic(64, 64, 4, 3, 7), 5)
    qt = quadtree_encode(tp)
    assert qt.as_tuples() == _encode_by_hand(tp)
    assert quadtree_decode(qt, 64, 64) == gen_synthetic(64, 64, 4, 3, 7)


def test_decode_uniform_and_errors():
    qt = Quadtree.from_tuples([(5, 0, 0, 3)], 32, 32, 3, 5)
    assert quadtree_decode(qt, 32, 32) == Mask(32, 32, 3, np.full((32, 32), 3))
    overlap = Quadtree.from_tuples([(1, 0, 0, 1), (0, 1, 1, 1), (1, 1, 0, 1), (1, 0, 1, 1), (1, 1, 1, 1)], 4, 4, 1, 2)
    with pytest.raises(StructureError):
        quadtree_decode(overlap)
    gap = Quadtree.from_tuples([(1, 0, 0, 1), (1, 1, 0, 1), (1, 0, 1, 1)], 4, 4, 1, 2)
    with pytest.raises(StructureError):
        quadtree_decode(gap)
    composite_leaf = Quadtree.from_tuples([(2, 0, 0, 0)], 4, 4, 1, 2)
    with pytest.raises(StructureError):
        quadtree_decode(composite_leaf)
    outside = Quadtree.from_tuples([(2, 1, 0, 1)], 4, 4, 1, 2)
    with pytest.raises(StructureError):
        quadtree_decode(outside)


def test_round_trip_200_synthetic_masks():
    rng = np.random.default_rng(0)
    for i in range(200):
        w, h = 32 * int(rng.integers(1, 5)), 32 * int(rng.integers(1, 5))
        k = int(rng.integers(2, 20))
        m = gen_synthetic(w, h, k, int(rng.integers(0, 8)), i)
        qt = quadtree_encode(build_t_pyramid(m, 5))
        assert quadtree_decode(qt, w, h) == m
        assert sum(4 ** int(r["l"]) for r in qt.records) == w * h
        assert not (qt.records["v"] == 0).any()


@given(seed=st.integers(0, 2**31), k=st.integers(2, 6), levels=st.integers(0, 4))
@settings(max_examples=50, deadline=None)
def test_round_trip_random_noise(seed, k, levels):
    rng = np.random.default_rng(seed)
    n = 1 << levels
    data = rng.integers(1, k + 1, size=(2 * n, 3 * n))
    # make some blocks uniform so several levels are populated
    data[:n, :n] = 1
    m = Mask(3 * n, 2 * n, k, data)
    qt = quadtree_encode(build_t_pyramid(m, levels))
    assert quadtree_decode(qt) == m
    back = quadtree_from_bytes(quadtree_to_bytes(qt))
    assert back.as_tuples() == qt.as_tuples()


def test_deviant_pixel_never_decreases_records():
    rng = np.random.default_rng(1)
    base = quadtree_encode(build_t_pyramid(Mask(64, 64, 3, np.full((64, 64), 1)), 5))
    for _ in range(30):
        data = np.full((64, 64), 1)
        data[rng.integers(64), rng.integers(64)] = 2
        qt = quadtree_encode(build_t_pyramid(Mask(64, 64, 3, data), 5))
        assert len(qt) >= len(base)


def test_query():
    m = gen_synthetic(32, 32, 4, 3, 2)
    tp = build_t_pyramid(m, 5)
    for x, y in [(0, 0), (5, 17), (31, 31)]:
        assert query(tp, 0, x, y) == m.data[y, x]
    u = build_t_pyramid(Mask(32, 32, 4, np.full((32, 32), 4)), 5)
    assert all(query(u, l, 0, 0) == 4 for l in range(6))
    with pytest.raises(BoundsError):
        query(tp, 6, 0, 0)
    with pytest.raises(BoundsError):
        query(tp, 1, 16, 0)


def test_qtr1_layout():
    qt = Quadtree.from_tuples([(5, 0, 0, 3)], 32, 32, 3, 5)
    buf = quadtree_to_bytes(qt)
    assert len(buf) == 21 + 11
    assert buf[:4] == b"QTR1"
    with pytest.raises(FormatError):
        quadtree_from_bytes(b"QTR0" + buf[4:])
    with pytest.raises(FormatError):
        quadtree_from_bytes(buf[:-1])


def test_canonical_sort_order():
    tp = build_t_pyramid(gen_synthetic(64, 64, 5, 6, 9), 5)
    t = quadtree_encode(tp).as_tuples()
    assert t == sorted(t, key=lambda r: (-r[0], r[2], r[1]))


def test_sparsity_uniform_megapixel():
    m = Mask(1024, 1024, 2, np.ones((1024, 1024)))
    stats = sparsity_stats(quadtree_encode(build_t_pyramid(m, 5)))
    assert stats.pixel_fraction[5] == 100.0
    assert stats.ratio == pytest.approx(100 / 1024)


def test_sparsity_identities():
    for seed in range(20):
        qt = quadtree_encode(build_t_pyramid(gen_synthetic(128, 64, 6, 5, seed), 5))
        s = sparsity_stats(qt)
        assert sum(s.pixel_fraction) == pytest.approx(100.0, abs=1e-9)
        assert ratio_from_fractions(s.pixel_fraction) == pytest.approx(s.ratio, abs=1e-12)


@pytest.mark.parametrize(
    "row,expected",
    [
        ((65.12, 14.44, 9.53, 5.85, 3.22, 1.81), 3.25),
        ((47.48, 21.40, 14.44, 8.68, 5.05, 2.93), 5.09),
    ],
)
def test_table_rows(row, expected):
    assert ratio_from_table_row(row) == pytest.approx(expected, abs=0.03)


def test_table_row_bad_sum():
    with pytest.raises(InputError):
        ratio_from_table_row([50, 10, 0, 0, 0, 0])
