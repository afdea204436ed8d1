"""Binary PGM (P5) and PPM (P6) reading and writing."""

from __future__ import annotations

import os
import re

import numpy as np

_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                     rb"(?:#[^\n]*\n\s*)*(\d+)\s")


class NetpbmError(ValueError):
    pass


def _parse(data: bytes, magic: bytes, channels: int, path) -> np.ndarray:
    m = _HEADER.match(data)
    if m is None or m.group(1) != magic:
        raise NetpbmError(f"{path}: not a binary {magic.decode()} file")
    width, height, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval not in (255, 65535):
        raise NetpbmError(f"{path}: unsupported maxval {maxval}")
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype(np.uint8)
    expected = width * height * channels * dtype.itemsize
    payload = data[m.end():]
    if len(payload) < expected:
        raise NetpbmError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    arr = np.frombuffer(payload[:expected], dtype=dtype)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return arr.reshape(shape).astype(np.uint16 if maxval == 65535 else np.uint8)


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit (uint8) or 16-bit big-endian (uint16) P5 raster."""
    with open(path, "rb") as f:
        return _parse(f.read(), b"P5", 1, path)


def write_pgm(path, raster: np.ndarray, maxval: int | None = None) -> None:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ValueError(f"PGM raster must be 2-D, got shape {raster.shape}")
    if maxval is None:
        maxval = 255 if raster.dtype == np.uint8 or raster.max(initial=0) <= 255 else 65535
    if maxval not in (255, 65535):
        raise ValueError(f"unsupported maxval {maxval}")
    if raster.min(initial=0) < 0 or raster.max(initial=0) > maxval:
        raise ValueError(f"raster values outside [0, {maxval}]")
    dtype = np.dtype(np.uint8) if maxval == 255 else np.dtype(">u2")
    height, width = raster.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n%d\n" % (width, height, maxval))
        f.write(raster.astype(dtype).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return _parse(f.read(), b"P6", 3, path)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM raster must be HxWx3, got shape {rgb.shape}")
    height, width, _ = rgb.shape
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (width, height))
        f.write(rgb.astype(np.uint8).tobytes())
