"""PNG export/import and the CTXB raw array format.

CTXB layout (little-endian): magic ``b"CTXB"``, uint32 width, uint32 height,
uint32 channels, uint32 dtype code, then the row-major payload.
"""

from __future__ import annotations

import io
import struct

import numpy as np
from PIL import Image

CTXB_MAGIC = b"CTXB"
_HEADER = struct.Struct("<4sIIII")
DTYPE_CODES = {1: np.dtype("<i4"), 2: np.dtype("<f4"), 3: np.dtype("<f8"), 4: np.dtype("u1")}


def _dtype_code(dtype):
    dt = np.dtype(dtype)
    if dt == np.uint8 or dt == np.bool_:
        return 4
    if dt.kind in "iu":
        return 1
    if dt == np.float32:
        return 2
    if dt.kind == "f":
        return 3
    raise ValueError(f"unsupported dtype {dt}")


def ctxb_dumps(array):
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError("CTXB holds H x W or H x W x C arrays")
    code = _dtype_code(a.dtype)
    h, w, c = a.shape
    return _HEADER.pack(CTXB_MAGIC, w, h, c, code) + np.ascontiguousarray(a, dtype=DTYPE_CODES[code]).tobytes()


def ctxb_loads(data):
    if len(data) < _HEADER.size:
        raise ValueError("truncated CTXB header")
    magic, w, h, c, code = _HEADER.unpack_from(data)
    if magic != CTXB_MAGIC:
        raise ValueError("not a CTXB file")
    if code not in DTYPE_CODES:
        raise ValueError(f"unknown CTXB dtype code {code}")
    dt = DTYPE_CODES[code]
    n = w * h * c
    payload = data[_HEADER.size:]
    if len(payload) != n * dt.itemsize:
        raise ValueError("CTXB payload size does not match header")
    a = np.frombuffer(payload, dtype=dt, count=n).reshape(h, w, c)
    return a[:, :, 0] if c == 1 else a


def write_ctxb(path, array):
    with open(path, "wb") as fh:
        fh.write(ctxb_dumps(array))


def read_ctxb(path):
    with open(path, "rb") as fh:
        return ctxb_loads(fh.read())


def to_uint8(img):
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def to_uint16(img):
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 65535).astype(np.uint16)


def png_bytes(img, bits=8):
    """Encode a float image in [0, 1] (H x W or H x W x 3) as PNG bytes.

    16-bit output is grayscale only. Booleans are written as 0/255.
    """
    a = np.asarray(img)
    if a.dtype == bool:
        a = a.astype(np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if bits == 16:
        if a.ndim != 2:
            raise ValueError("16-bit PNG export is grayscale only")
        im = Image.fromarray(to_uint16(a))
    else:
        im = Image.fromarray(to_uint8(a))
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, img, bits=8):
    data = png_bytes(img, bits)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def decode_png(data):
    """Decode PNG bytes to float64 in [0, 1]; RGB(A) → H x W x 3, gray → H x W."""
    im = Image.open(io.BytesIO(data))
    if im.mode in ("I;16", "I;16B", "I;16L", "I"):
        return np.asarray(im, dtype=np.float64) / 65535.0
    if im.mode in ("L", "1"):
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_png(path):
    with open(path, "rb") as fh:
        return decode_png(fh.read())


def png_size(data):
    """(height, width) of PNG bytes without decoding pixels."""
    w, h = Image.open(io.BytesIO(data)).size
    return h, w


def export_buffers(buffers, prefix):
    """Write depth/znormal as 16-bit PNG and face_index as a CTXB int32 sidecar."""
    write_png(f"{prefix}_depth.png", buffers.depth, bits=16)
    write_png(f"{prefix}_znormal.png", (buffers.znormal + 1) / 2, bits=16)
    write_png(f"{prefix}_mask.png", buffers.object_mask)
    write_ctxb(f"{prefix}_face_index.ctxb", buffers.face_index.astype(np.int32))
