"""Binary PPM/PGM images and raw float32 blobs with JSON sidecars."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def to_u8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img) -> None:
    """RGB image in [0, 1] as binary P6, maxval 255."""
    arr = to_u8(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    h, w = arr.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def write_pgm(path, img) -> None:
    """Grayscale image in [0, 1] as binary P5, maxval 255."""
    arr = to_u8(img)
    if arr.ndim != 2:
        raise ValueError("PGM needs an (H, W) image")
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def _read_netpbm(path, magic: bytes):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} got {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    return raw[pos + 1:], w, h


def _pixels(path, data: bytes, n: int) -> np.ndarray:
    if len(data) < n:
        raise ValueError(f"{path}: expected {n} bytes of pixel data, found {len(data)}")
    return np.frombuffer(data[:n], dtype=np.uint8)


def read_ppm(path) -> np.ndarray:
    data, w, h = _read_netpbm(path, b"P6")
    return _pixels(path, data, w * h * 3).reshape(h, w, 3) / 255.0


def read_pgm(path) -> np.ndarray:
    data, w, h = _read_netpbm(path, b"P5")
    return _pixels(path, data, w * h).reshape(h, w) / 255.0


def write_f32(path, arr) -> None:
    """Raw little-endian float32 blob plus ``<path>.json`` holding the shape."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    Path(path).write_bytes(arr.tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"dtype": "<f4", "shape": list(arr.shape)}))


def read_f32(path) -> np.ndarray:
    meta = json.loads(Path(str(path) + ".json").read_text())
    arr = np.frombuffer(Path(path).read_bytes(), dtype=meta["dtype"])
    return arr.reshape(meta["shape"]).astype(np.float64)
