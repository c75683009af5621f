import numpy as np
import pytest

from atlasforge.fileio import (ctxb_dumps, ctxb_loads, decode_png, export_buffers, png_bytes, png_size, read_ctxb,
                               read_png, write_ctxb, write_png)


@pytest.mark.parametrize("dtype", [np.int32, np.float32, np.float64, np.uint8])
def test_ctxb_round_trip(dtype, tmp_path):
    a = (np.arange(5 * 7 * 3) - 20).reshape(5, 7, 3)
    a = np.abs(a).astype(dtype) if dtype == np.uint8 else a.astype(dtype)
    p = tmp_path / "a.ctxb"
    write_ctxb(p, a)
    b = read_ctxb(p)
    assert b.dtype == np.dtype(dtype) and b.shape == a.shape
    np.testing.assert_array_equal(a, b)


def test_ctxb_header_layout():
    data = ctxb_dumps(np.zeros((2, 3), dtype=np.int32))
    assert data[:4] == b"CTXB"
    assert np.frombuffer(data[4:20], "<u4").tolist() == [3, 2, 1, 1]
    assert len(data) == 20 + 2 * 3 * 4
    assert ctxb_loads(data).shape == (2, 3)


def test_ctxb_rejects_garbage():
    with pytest.raises(ValueError):
        ctxb_loads(b"NOPE" + bytes(16))
    with pytest.raises(ValueError):
        ctxb_loads(ctxb_dumps(np.zeros((2, 2), np.float32))[:-1])


def test_png_8bit_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (9, 11, 3)) / 255.0
    p = tmp_path / "x.png"
    write_png(p, img)
    np.testing.assert_allclose(read_png(p), img, atol=1e-12)


def test_png_16bit_gray_round_trip():
    img = np.linspace(0, 1, 64 * 3).reshape(3, 64)
    out = decode_png(png_bytes(img, bits=16))
    assert np.abs(out - img).max() <= 0.5 / 65535 + 1e-12


def test_png_size_and_bool():
    data = png_bytes(np.zeros((5, 8), dtype=bool))
    assert png_size(data) == (5, 8)


def test_export_buffers(tmp_path, sphere_buffers128):
    b = sphere_buffers128[0]
    export_buffers(b, str(tmp_path / "v0"))
    np.testing.assert_array_equal(read_ctxb(tmp_path / "v0_face_index.ctxb"), b.face_index)
    depth = read_png(tmp_path / "v0_depth.png")
    assert np.abs(depth - b.depth).max() <= 1 / 65535
    assert np.array_equal(read_png(tmp_path / "v0_mask.png") > 0.5, b.object_mask)
