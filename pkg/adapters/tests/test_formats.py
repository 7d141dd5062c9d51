import numpy as np
import pytest

from genbridge import formats


def test_png_round_trip():
    rng = np.random.default_rng(0)
    img = rng.random((24, 24, 4)).astype(np.float32)
    back = formats.png_decode(formats.png_encode(img))
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255


def test_occv_round_trip_and_header():
    rng = np.random.default_rng(1)
    vox = rng.random((16, 16, 16)) < 0.3
    data = formats.occv_encode(vox)
    assert data[:4] == b"OCCV"
    assert len(data) == 16 + 16 ** 3 // 8
    assert np.array_equal(formats.occv_decode(data), vox)


def test_occv_bit_order_u_fastest():
    vox = np.zeros((8, 8, 8), dtype=bool)
    vox[1, 0, 0] = True  # u=1 -> second bit of the first byte
    data = formats.occv_encode(vox)
    assert data[16] == 0b10


def test_slat_round_trip():
    rng = np.random.default_rng(2)
    occ = rng.random((8, 8, 8)) < 0.2
    coords = np.argwhere(occ)
    feats = rng.standard_normal((len(coords), 5)).astype(np.float32)
    data = formats.slat_encode(coords, feats, 8)
    c2, f2, r = formats.slat_decode(data)
    assert r == 8
    assert np.array_equal(c2, coords)
    assert np.array_equal(f2, feats)


def test_ply_round_trip():
    rng = np.random.default_rng(3)
    n = 11
    centers = rng.random((n, 3)).astype(np.float32)
    scales = rng.random((n, 3)).astype(np.float32)
    rot = np.zeros((n, 4), dtype=np.float32)
    rot[:, 0] = 1.0
    opac = rng.random(n).astype(np.float32)
    colors = rng.random((n, 3)).astype(np.float32)
    data = formats.ply_encode(centers, scales, rot, opac, colors)
    assert data.startswith(b"ply\nformat binary_little_endian 1.0\n")
    back = formats.ply_decode(data)
    assert np.array_equal(back["centers"], centers)
    assert np.array_equal(back["opacities"], opac)
    assert np.abs(back["colors"] - colors).max() <= 0.5 / 255


def test_frame_centers():
    frame = {"origin": [1.0, 2.0, 0.0],
             "axes": [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]}
    centers = formats.frame_centers(frame, np.array([[0, 0, 0]]), (4, 4, 4))
    assert np.allclose(centers, [[1.25, 2.25, 0.125]])


def test_bad_streams_rejected():
    with pytest.raises(formats.FormatError):
        formats.occv_decode(b"NOPE" + b"\x00" * 20)
    with pytest.raises(formats.FormatError):
        formats.slat_decode(b"NOPE" + b"\x00" * 20)
    with pytest.raises(formats.FormatError):
        formats.ply_decode(b"not a ply at all")
