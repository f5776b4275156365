"""Lossless-enough image persistence: 8-bit RGB PNG and binary PPM.

The PNG codec is deliberately tiny (zlib + struct from the stdlib,
truecolor 8-bit, no interlace) so the artifact carries no image-codec
dependency; PPM is the even simpler fallback. Values quantize to 8 bits
on save, so a round trip is exact to within half a quantization step.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class ImageDecodeError(ValueError):
    """Raised when an image file cannot be parsed."""


def _quantize(x):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {arr.shape}")
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _dequantize(q):
    return (q.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def _png_chunk(tag, payload):
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def _encode_png(q):
    h, w, _ = q.shape
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)  # 8-bit truecolor
    raw = b"".join(b"\x00" + q[row].tobytes() for row in range(h))
    return (_PNG_MAGIC + _png_chunk(b"IHDR", ihdr)
            + _png_chunk(b"IDAT", zlib.compress(raw, 6)) + _png_chunk(b"IEND", b""))


def _paeth(a, b, c):
    p = a.astype(np.int32) + b.astype(np.int32) - c.astype(np.int32)
    pa, pb, pc = np.abs(p - a), np.abs(p - b), np.abs(p - c)
    out = np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))
    return out.astype(np.uint8)


def _unfilter(raw, h, w):
    stride = w * 3
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    for row in range(h):
        ftype = raw[pos]
        line = np.frombuffer(raw[pos + 1:pos + 1 + stride], dtype=np.uint8).copy()
        pos += 1 + stride
        prev = out[row - 1] if row else np.zeros(stride, dtype=np.uint8)
        if ftype == 0:
            out[row] = line
        elif ftype == 2:
            out[row] = line + prev
        elif ftype in (1, 3, 4):
            cur = np.zeros(stride, dtype=np.uint8)
            for i in range(stride):
                left = cur[i - 3] if i >= 3 else np.uint8(0)
                up = prev[i]
                ul = prev[i - 3] if i >= 3 else np.uint8(0)
                if ftype == 1:
                    cur[i] = line[i] + left
                elif ftype == 3:
                    cur[i] = line[i] + np.uint8((int(left) + int(up)) // 2)
                else:
                    cur[i] = line[i] + _paeth(np.uint8(left), up, np.uint8(ul))
            out[row] = cur
        else:
            raise ImageDecodeError(f"unsupported PNG filter type {ftype}")
    return out.reshape(h, w, 3)


def _decode_png(data, path):
    if data[:8] != _PNG_MAGIC:
        raise ImageDecodeError(f"{path}: not a PNG file")
    pos = 8
    width = height = None
    idat = b""
    while pos + 8 <= len(data):
        (length,), tag = struct.unpack(">I", data[pos:pos + 4]), data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        if len(payload) != length:
            raise ImageDecodeError(f"{path}: truncated chunk {tag!r}")
        pos += 12 + length
        if tag == b"IHDR":
            width, height, depth, color, _, _, interlace = struct.unpack(">IIBBBBB", payload)
            if depth != 8 or color != 2 or interlace != 0:
                raise ImageDecodeError(
                    f"{path}: only 8-bit non-interlaced truecolor supported "
                    f"(depth={depth}, color={color})")
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if width is None or not idat:
        raise ImageDecodeError(f"{path}: missing IHDR or IDAT")
    try:
        raw = zlib.decompress(idat)
    except zlib.error as e:
        raise ImageDecodeError(f"{path}: corrupt IDAT ({e})") from e
    if len(raw) != height * (1 + width * 3):
        raise ImageDecodeError(f"{path}: IDAT size mismatch")
    return _unfilter(raw, height, width)


def _encode_ppm(q):
    h, w, _ = q.shape
    return f"P6\n{w} {h}\n255\n".encode() + q.tobytes()


def _decode_ppm(data, path):
    if not data.startswith(b"P6"):
        raise ImageDecodeError(f"{path}: not a binary PPM file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as e:
        raise ImageDecodeError(f"{path}: bad PPM header") from e
    if maxval != 255:
        raise ImageDecodeError(f"{path}: only maxval 255 supported")
    body = data[pos:pos + h * w * 3]
    if len(body) != h * w * 3:
        raise ImageDecodeError(f"{path}: truncated PPM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def save_image(x, path):
    """Write an (H, W, 3) [0,1] image as PNG (default) or PPM by extension."""
    path = Path(path)
    q = _quantize(x)
    if path.suffix.lower() == ".ppm":
        blob = _encode_ppm(q)
    else:
        blob = _encode_png(q)
    try:
        path.write_bytes(blob)
    except OSError as e:
        raise OSError(f"cannot write image {path}: {e}") from e


def load_image(path):
    """Read a PNG or PPM written by save_image back to float32 [0,1]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read image {path}: {e}") from e
    if data[:8] == _PNG_MAGIC:
        q = _decode_png(data, path)
    elif data[:2] == b"P6":
        q = _decode_ppm(data, path)
    else:
        raise ImageDecodeError(f"{path}: unrecognized image format")
    return _dequantize(q)
