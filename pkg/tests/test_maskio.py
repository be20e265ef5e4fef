import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qgn.errors import ClassRangeError, FormatError
from qgn.maskio import (
    Mask,
    gen_synthetic,
    hflip,
    mask_from_bytes,
    mask_to_bytes,
    pad_to_multiple,
    read_mask,
    write_mask,
)


def _raw(width, height, k, cells, magic=b"QMR1"):
    return struct.pack("<4sIII", magic, width, height, k) + struct.pack(f"<{len(cells)}H", *cells)


def test_read_small_file(tmp_path):
    path = tmp_path / "m.qmr"
    path.write_bytes(_raw(2, 2, 2, [1, 1, 2, 2]))
    m = read_mask(path)
    assert (m.width, m.height, m.num_classes) == (2, 2, 2)
    assert m.data.ravel().tolist() == [1, 1, 2, 2]


def test_zero_cell_is_rejected():
    with pytest.raises(ClassRangeError):
        mask_from_bytes(_raw(2, 1, 3, [1, 0]))


def test_cell_above_k_is_rejected():
    with pytest.raises(ClassRangeError):
        mask_from_bytes(_raw(2, 1, 3, [1, 4]))


def test_bad_magic_and_truncation():
    with pytest.raises(FormatError):
        mask_from_bytes(_raw(1, 1, 2, [1], magic=b"QMR2"))
    with pytest.raises(FormatError):
        mask_from_bytes(_raw(2, 2, 2, [1, 1, 2, 2])[:-1])
    with pytest.raises(FormatError):
        mask_from_bytes(b"QMR")


def test_single_cell_file_layout():
    # 16 header bytes (magic + three u32) plus one u16 cell
    buf = mask_to_bytes(Mask(1, 1, 3, np.array([[2]])))
    assert len(buf) == 18
    assert buf == b"QMR1" + struct.pack("<III", 1, 1, 3) + b"\x02\x00"


def test_round_trip_random_masks_byte_exact(tmp_path):
    rng = np.random.default_rng(123)
    for i in range(100):
        h, w, k = rng.integers(1, 40), rng.integers(1, 40), int(rng.integers(1, 300))
        m = Mask(w, h, k, rng.integers(1, k + 1, size=(h, w)))
        path = tmp_path / f"{i}.qmr"
        write_mask(m, path)
        assert read_mask(path) == m
        assert mask_to_bytes(read_mask(path)) == path.read_bytes()


def test_one_cell_change_touches_two_bytes():
    rng = np.random.default_rng(5)
    a = Mask(7, 5, 9, rng.integers(1, 9, size=(5, 7)))
    data = a.data.copy()
    y, x = 3, 4
    data[y, x] = 9
    b = Mask(7, 5, 9, data)
    ba, bb = mask_to_bytes(a), mask_to_bytes(b)
    diff = [i for i in range(len(ba)) if ba[i] != bb[i]]
    offset = 16 + 2 * (y * 7 + x)
    # both ids are < 256, so only the low byte of the cell can differ
    assert diff == [offset]
    assert bb[offset : offset + 2] == struct.pack("<H", 9)


def test_one_cell_change_with_both_bytes_differing():
    a = Mask(3, 2, 600, np.full((2, 3), 1))
    data = a.data.copy()
    data[1, 2] = 0x0202
    ba, bb = mask_to_bytes(a), mask_to_bytes(Mask(3, 2, 600, data))
    diff = [i for i in range(len(ba)) if ba[i] != bb[i]]
    offset = 16 + 2 * (1 * 3 + 2)
    assert diff == [offset, offset + 1]


@pytest.mark.parametrize(
    "shape,m,expected",
    [((64, 64), 32, (64, 64)), ((31, 33), 32, (32, 64)), ((5, 5), 4, (8, 8))],
)
def test_pad_dims(shape, m, expected):
    mask = Mask(shape[1], shape[0], 3, np.full(shape, 2))
    out = pad_to_multiple(mask, m)
    assert (out.height, out.width) == expected
    assert (out.data == 2).all()


@given(
    h=st.integers(1, 20), w=st.integers(1, 20), m=st.integers(1, 9), seed=st.integers(0, 10**6)
)
@settings(max_examples=60, deadline=None)
def test_pad_keeps_content_and_label_set(h, w, m, seed):
    rng = np.random.default_rng(seed)
    mask = Mask(w, h, 5, rng.integers(1, 6, size=(h, w)))
    out = pad_to_multiple(mask, m)
    assert out.height % m == 0 and out.width % m == 0
    assert out.height - h < m and out.width - w < m
    assert np.array_equal(out.data[:h, :w], mask.data)
    assert set(np.unique(out.data)) <= set(np.unique(mask.data))
    # padded cells copy the nearest edge pixel
    assert np.array_equal(out.data[h:, :w], np.broadcast_to(mask.data[-1], (out.height - h, w)))


def test_hflip_examples():
    m = Mask(2, 2, 4, np.array([[1, 2], [3, 4]]))
    assert hflip(m).data.tolist() == [[2, 1], [4, 3]]
    u = Mask(6, 3, 2, np.full((3, 6), 2))
    assert hflip(u) == u


def test_hflip_involution():
    m = gen_synthetic(48, 16, 5, 4, 3)
    assert hflip(hflip(m)) == m
    assert hflip(m) != m


def _scripted_generator(width, height, k, n_shapes, seed):
    """Loop-by-loop transcription of the generator's documented draw order."""
    rng = np.random.default_rng(seed)
    grid = [[1] * width for _ in range(height)]
    lo_w, lo_h = max(2, width // 8), max(2, height // 8)
    hi_w, hi_h = max(lo_w, width // 2), max(lo_h, height // 2)
    for _ in range(n_shapes):
        cls = int(rng.integers(2, k + 1))
        w = int(rng.integers(lo_w, hi_w + 1))
        h = int(rng.integers(lo_h, hi_h + 1))
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        for y in range(y0, y0 + h):
            for x in range(x0, x0 + w):
                grid[y][x] = cls
    counts = {}
    for row in grid:
        for v in row:
            counts[v] = counts.get(v, 0) + 1
    return counts


def test_gen_synthetic_matches_scripted_generator():
    m = gen_synthetic(64, 64, 4, 3, 7)
    values, counts = np.unique(m.data, return_counts=True)
    assert dict(zip(values.tolist(), counts.tolist())) == _scripted_generator(64, 64, 4, 3, 7)


def test_gen_synthetic_basics():
    assert (gen_synthetic(16, 16, 3, 0, 1).data == 1).all()
    assert gen_synthetic(32, 24, 6, 5, 11) == gen_synthetic(32, 24, 6, 5, 11)
    assert gen_synthetic(32, 24, 6, 5, 11) != gen_synthetic(32, 24, 6, 5, 12)
    m = gen_synthetic(40, 40, 3, 10, 2)
    assert m.data.min() >= 1 and m.data.max() <= 3
