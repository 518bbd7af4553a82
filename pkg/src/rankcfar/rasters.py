"""Raster file formats: binary PGM (8/16-bit) and raw little-endian float32 with a text sidecar.

The sidecar for ``image.raw`` is ``image.raw.hdr``::

    width 640
    height 480
    dtype f32
    endian little
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class RasterFormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    return Path(str(path) + ".hdr")


def _pgm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise RasterFormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM; sample values are returned as-is, no normalization."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(data, 4)
    if magic != b"P5":
        raise RasterFormatError(f"{path}: not a binary PGM (magic {magic!r})")
    width, height, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise RasterFormatError(f"{path}: bad maxval {maxval}")
    pos += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    payload = data[pos : pos + expected]
    if len(payload) != expected:
        raise RasterFormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    img = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    if img.max(initial=0) > maxval:
        raise RasterFormatError(f"{path}: sample exceeds maxval {maxval}")
    return img.astype(np.float64)


def write_pgm(path, image, maxval: int | None = None) -> None:
    img = np.asarray(image)
    if maxval is None:
        maxval = 255 if img.max(initial=0) <= 255 else 65535
    if img.min(initial=0) < 0 or img.max(initial=0) > maxval:
        raise ValueError(f"samples must lie in [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    height, width = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        fh.write(np.round(img).astype(dtype).tobytes())


def read_raw_f32(path) -> np.ndarray:
    hdr = sidecar_path(path)
    if not hdr.exists():
        raise RasterFormatError(f"{path}: missing sidecar header {hdr}")
    fields = {}
    for line in hdr.read_text().splitlines():
        parts = line.split()
        if len(parts) == 2:
            fields[parts[0]] = parts[1]
    try:
        width, height = int(fields["width"]), int(fields["height"])
    except (KeyError, ValueError) as exc:
        raise RasterFormatError(f"{hdr}: needs integer width and height") from exc
    if fields.get("dtype", "f32") != "f32" or fields.get("endian", "little") != "little":
        raise RasterFormatError(f"{hdr}: only 'dtype f32' and 'endian little' are supported")
    payload = Path(path).read_bytes()
    if len(payload) != 4 * width * height:
        raise RasterFormatError(f"{path}: payload is {len(payload)} bytes, expected {4 * width * height}")
    return np.frombuffer(payload, dtype="<f4").reshape(height, width).astype(np.float64)


def write_raw_f32(path, image) -> None:
    img = np.asarray(image)
    height, width = img.shape
    Path(path).write_bytes(img.astype("<f4").tobytes())
    sidecar_path(path).write_text(f"width {width}\nheight {height}\ndtype f32\nendian little\n")


def read_raster(path) -> np.ndarray:
    """Load a raster, choosing the format from the file's magic bytes or sidecar."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{path}: no such file")
    with open(p, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P5":
        img = read_pgm(p)
    elif sidecar_path(p).exists():
        img = read_raw_f32(p)
    else:
        raise RasterFormatError(f"{path}: neither a binary PGM nor a raw f32 file with a .hdr sidecar")
    if not np.all(np.isfinite(img)) or img.min(initial=0) < 0:
        raise RasterFormatError(f"{path}: samples must be finite and nonnegative")
    return img
