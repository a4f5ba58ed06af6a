"""Binary PPM (P6) and PGM (P5) files, 8-bit only.

Images in memory are float arrays of shape (3, H, W) with values in [0, 1].
"""
from __future__ import annotations

import os
import re

import numpy as np

_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def _read(path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    m = _HEADER.match(raw)
    if not m or m.group(1) != magic:
        raise ValueError(f"{path}: not a binary {magic.decode()} file")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    body = raw[m.end():m.end() + w * h * channels]
    if len(body) != w * h * channels:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6").transpose(2, 0, 1).astype(np.float64) / 255.0


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    arr = to_bytes(img).transpose(1, 2, 0)
    if arr.shape[2] != 3:
        raise ValueError(f"expected 3 channels, got shape {img.shape}")
    h, w, _ = arr.shape
    _write(path, b"P6 %d %d 255\n" % (w, h) + arr.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    arr = to_bytes(gray)
    h, w = arr.shape
    _write(path, b"P5 %d %d 255\n" % (w, h) + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    return _read(path, b"P5")[..., 0].astype(np.float64) / 255.0


def _write(path, payload: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
