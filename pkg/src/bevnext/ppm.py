"""Binary PPM (P6) image serialization.

Images are uint8 arrays of shape [H, W, 3]. The writer emits a minimal
``P6`` header with maxval 255; the reader tolerates header comments and
arbitrary whitespace between header tokens, and rejects anything that is
not an 8-bit P6 raster.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError

_MAXVAL = 255


def save_ppm(path, image: np.ndarray) -> None:
    """Write ``image`` ([H, W, 3] uint8) to ``path`` as binary PPM."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"ppm image must have shape [H, W, 3], got {arr.shape}")
    if arr.dtype != np.uint8:
        raise FormatError(f"ppm image must be uint8, got {arr.dtype}")
    h, w = arr.shape[:2]
    header = f"P6\n{w} {h}\n{_MAXVAL}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("ppm header truncated")
    return data[start:pos], pos


def load_ppm(path) -> np.ndarray:
    """Read a binary PPM from ``path``; returns [H, W, 3] uint8."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, pos = _read_token(data, 0)
    if magic != b"P6":
        raise FormatError(f"not a binary ppm: magic {magic!r}")
    fields = []
    for _ in range(3):
        token, pos = _read_token(data, pos)
        try:
            fields.append(int(token))
        except ValueError as exc:
            raise FormatError(f"bad ppm header token {token!r}") from exc
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"bad ppm dimensions {width}x{height}")
    if maxval != _MAXVAL:
        raise FormatError(f"ppm maxval must be {_MAXVAL}, got {maxval}")
    # Exactly one whitespace byte separates the header from the raster.
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("ppm header truncated")
    pos += 1
    raster = data[pos:]
    expected = width * height * 3
    if len(raster) < expected:
        raise FormatError(
            f"ppm raster truncated: expected {expected} bytes, got {len(raster)}"
        )
    if len(raster) > expected:
        raise FormatError(
            f"ppm raster has trailing bytes: expected {expected}, got {len(raster)}"
        )
    arr = np.frombuffer(raster, dtype=np.uint8, count=expected)
    return arr.reshape(height, width, 3).copy()
