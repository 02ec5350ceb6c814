"""Binary PGM (P5) reading and writing, 8- and 16-bit.

16-bit samples are stored most significant byte first, as the Netpbm format
requires.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["PGMFormatError", "read_pgm", "read_pgm_header", "write_pgm"]


class PGMFormatError(ValueError):
    """Raised when a file is not a well-formed binary PGM."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{path}: {reason}")


def write_pgm(path, image, maxval=65535, comments=()):
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    if not 0 < maxval <= 65535:
        raise ValueError("maxval must lie in 1..65535")
    if img.size and (img.min() < 0 or img.max() > maxval):
        raise ValueError("pixel values outside 0..maxval")
    height, width = img.shape
    header = b"P5\n"
    for line in comments:
        header += b"# " + str(line).encode("ascii") + b"\n"
    header += f"{width} {height}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(img, dtype=dtype).tobytes())


def _tokens(buf, path):
    """Yield (token, end offset) for the four header fields, skipping comments."""
    pos, n = 0, len(buf)
    found = 0
    while found < 4:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMFormatError(path, "truncated header")
        found += 1
        yield buf[start:pos], pos


def _parse_header(buf, path):
    toks = []
    end = 0
    for tok, end in _tokens(buf, path):
        toks.append(tok)
    if toks[0] != b"P5":
        raise PGMFormatError(path, f"bad magic {toks[0]!r}, expected b'P5'")
    try:
        width, height, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise PGMFormatError(path, "non-integer header field") from None
    if width <= 0 or height <= 0 or not 0 < maxval <= 65535:
        raise PGMFormatError(path, f"invalid header values {width}x{height} maxval={maxval}")
    # exactly one whitespace byte separates maxval from the raster
    if end >= len(buf) or not buf[end : end + 1].isspace():
        raise PGMFormatError(path, "missing separator before raster")
    return width, height, maxval, end + 1


def read_pgm_header(path):
    """Return ``(width, height, maxval)`` without reading the raster."""
    with open(path, "rb") as fh:
        buf = fh.read(1024)
    width, height, maxval, _ = _parse_header(buf, path)
    return width, height, maxval


def read_pgm(path) -> np.ndarray:
    """Read a P5 image into a ``uint16`` (maxval > 255) or ``uint8`` array."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    width, height, maxval, offset = _parse_header(buf, path)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    raster = buf[offset : offset + expected]
    if len(raster) != expected:
        raise PGMFormatError(path, f"raster has {len(raster)} bytes, expected {expected}")
    img = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return img.astype(np.uint16 if maxval > 255 else np.uint8)
