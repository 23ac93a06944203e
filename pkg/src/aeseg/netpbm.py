"""Binary netpbm (P5 greyscale / P6 colour) reading and writing, 8 bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _header(magic: bytes, width: int, height: int) -> bytes:
    return magic + b"\n%d %d\n255\n" % (width, height)


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Float ``[0, 1]`` to bytes via ``round(255 * v)``."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, plane: np.ndarray) -> None:
    """Write an ``H x W`` plane. Integer planes are written verbatim (0..255),
    float planes are treated as ``[0, 1]`` intensities."""
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise ValueError(f"P5 needs a 2-D plane, got shape {plane.shape}")
    if plane.dtype.kind == "f":
        data = to_uint8(plane)
    else:
        if plane.min(initial=0) < 0 or plane.max(initial=0) > 255:
            raise ValueError("integer plane must lie in 0..255")
        data = plane.astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(_header(b"P5", w, h) + data.tobytes())


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"P6 needs an H x W x 3 image, got shape {image.shape}")
    data = to_uint8(image) if image.dtype.kind == "f" else image.astype(np.uint8)
    h, w, _ = data.shape
    Path(path).write_bytes(_header(b"P6", w, h) + data.tobytes())


def _parse(raw: bytes) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset)."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        tokens.append(raw[start:pos])
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit netpbm files are supported (maxval {maxval})")
    return magic, width, height, maxval, pos + 1


def read_pgm_bytes(path: str | Path) -> np.ndarray:
    """Raw ``uint8`` plane of a P5 file."""
    raw = Path(path).read_bytes()
    magic, w, h, _, off = _parse(raw)
    if magic != b"P5":
        raise ValueError(f"{path}: expected P5, found {magic!r}")
    return np.frombuffer(raw, np.uint8, count=w * h, offset=off).reshape(h, w).copy()


def read_pgm(path: str | Path) -> np.ndarray:
    return read_pgm_bytes(path)


def read_ppm(path: str | Path) -> np.ndarray:
    """P6 file as ``H x W x 3`` floats in ``[0, 1]``."""
    raw = Path(path).read_bytes()
    magic, w, h, _, off = _parse(raw)
    if magic != b"P6":
        raise ValueError(f"{path}: expected P6, found {magic!r}")
    data = np.frombuffer(raw, np.uint8, count=w * h * 3, offset=off).reshape(h, w, 3)
    return data.astype(np.float64) / 255.0
