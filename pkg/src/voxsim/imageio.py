"""Image file output: binary PPM by default, PNG on request.

Both formats are written with the standard library only.  PPM is the
zero-dependency interchange default; PNG (8-bit RGB, zlib-compressed)
exists for viewers that cannot open PPM.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from voxsim.errors import DataError, ShapeError


def _as_rgb_u8(image):
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError("image must be [H, W, 3]")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0),
                      0, 255).astype(np.uint8)
    return arr


def write_ppm(path, image):
    """Write an RGB image as binary PPM (P6).

    uint8 data is written as-is; float data is treated as [0, 1] and
    quantized.
    """
    arr = _as_rgb_u8(image)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path):
    """Read a binary PPM back into a uint8 [H, W, 3] array."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
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
    if fields[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise DataError(f"{path}: unsupported max value {maxval}")
    pos += 1  # single whitespace byte after the header
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()


def write_png(path, image):
    """Write an RGB image as an 8-bit PNG."""
    arr = _as_rgb_u8(image)
    h, w = arr.shape[:2]
    raw = b"".join(b"\x00" + arr[y].tobytes() for y in range(h))

    def chunk(tag, payload):
        body = tag + payload
        return (struct.pack(">I", len(payload)) + body
                + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF))

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(chunk(b"IHDR", header))
        fh.write(chunk(b"IDAT", zlib.compress(raw, 9)))
        fh.write(chunk(b"IEND", b""))


def write_image(path, image):
    """Dispatch on extension: .png -> PNG, anything else -> PPM."""
    if str(path).lower().endswith(".png"):
        write_png(path, image)
    else:
        write_ppm(path, image)
