"""Reader and writer for grayscale PFM (portable float map) images.

The format is the usual one: an ASCII header of three lines
(``Pf``, ``<width> <height>``, ``<scale>``) followed by a binary raster
of 32-bit floats, rows ordered bottom to top.  A negative scale marks
little-endian data; this module always writes little-endian.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def write_pfm(path, image: np.ndarray) -> None:
    """Write a 2-D array as a grayscale little-endian PFM file."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ValidationError(f"PFM writer expects a 2-D image, got shape {img.shape}")
    height, width = img.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{width} {height}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        # PFM rasters run bottom-to-top.
        fh.write(np.flipud(img).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM file into a float64 array of shape (V, U)."""
    with open(path, "rb") as fh:
        magic = _read_token(fh, path)
        if magic != b"Pf":
            raise ValidationError(f"{path}: not a grayscale PFM file (magic {magic!r})")
        try:
            width = int(_read_token(fh, path))
            height = int(_read_token(fh, path))
            scale = float(_read_token(fh, path))
        except ValueError as exc:
            raise ValidationError(f"{path}: malformed PFM header: {exc}") from exc
        if width < 1 or height < 1:
            raise ValidationError(f"{path}: bad PFM dimensions {width}x{height}")
        dtype = "<f4" if scale < 0 else ">f4"
        data = fh.read(4 * width * height)
    if len(data) != 4 * width * height:
        raise ValidationError(f"{path}: truncated PFM raster")
    img = np.frombuffer(data, dtype=dtype).reshape(height, width)
    return np.flipud(img).astype(np.float64)


def _read_token(fh, path) -> bytes:
    # Tokens are whitespace-delimited; comments are not part of the PFM spec.
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise ValidationError(f"{path}: unexpected end of PFM header")
        if ch.isspace():
            if token:
                return token
            continue
        token += ch
