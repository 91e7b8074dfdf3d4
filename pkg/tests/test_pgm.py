import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from bcednet.pgm import decode_pgm, encode_pgm, read_pgm, to_gray8, write_pgm


def test_header_layout():
    data = encode_pgm(np.array([[0, 255, 7]], dtype=np.uint8))
    assert data == b"P5\n3 1\n255\n\x00\xff\x07"


@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 40), st.integers(1, 40))))
def test_round_trip(pixels):
    assert np.array_equal(decode_pgm(encode_pgm(pixels)), pixels)


def test_comments_and_small_maxval():
    data = b"P5\n# made by hand\n2 2 # width height\n15\n\x00\x01\x02\x0f"
    assert decode_pgm(data).tolist() == [[0, 1], [2, 15]]


@pytest.mark.parametrize(
    "data",
    [b"P2\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00", b"P5\n1"],
)
def test_rejects_bad_files(data):
    with pytest.raises(ValueError):
        decode_pgm(data)


def test_rejects_wrong_dtype():
    with pytest.raises(ValueError):
        encode_pgm(np.zeros((2, 2), dtype=np.float64))


def test_to_gray8_rounds_half_up():
    # 0.5/255 sits exactly on the boundary between 0 and 1
    v = np.array([0.0, 0.5 / 255, 1.5 / 255, 0.49 / 255, 1.0, 1.2, -0.1])
    assert to_gray8(v).tolist() == [0, 1, 2, 0, 255, 255, 0]


def test_file_round_trip(tmp_path):
    px = np.arange(32 * 128, dtype=np.uint32).reshape(32, 128).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", px)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), px)
