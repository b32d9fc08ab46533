"""Netpbm readers and writers (binary P6 colour, P5 greyscale)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] linearly onto 0..255."""
    return np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(data: np.ndarray) -> np.ndarray:
    return data.astype(np.float64) / 127.5 - 1.0


def write_ppm(path, image: np.ndarray) -> None:
    data = to_uint8(image)
    h, w, c = data.shape
    if c != 3:
        raise ValueError(f"PPM needs 3 channels, got {c}")
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    """Boolean masks become 0/255; float masks in [0, 1] are scaled to 0..255."""
    mask = np.asarray(mask)
    if mask.dtype == bool:
        data = mask.astype(np.uint8) * 255
    else:
        data = np.clip(np.rint(mask * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def _read_netpbm(path, magic: bytes):
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} header, got {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    return raw[pos + 1:], h, w


def read_ppm(path) -> np.ndarray:
    payload, h, w = _read_netpbm(path, b"P6")
    return from_uint8(np.frombuffer(payload, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3))


def read_pgm(path) -> np.ndarray:
    """Raw 0..255 values as uint8."""
    payload, h, w = _read_netpbm(path, b"P5")
    return np.frombuffer(payload, dtype=np.uint8, count=h * w).reshape(h, w).copy()
