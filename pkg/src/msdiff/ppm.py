"""Binary PPM (P6) and PGM (P5) image files.

Images travel as float64 arrays in [0, 1]. Writing quantizes to the 8-bit
grid; arrays already snapped to that grid survive a write/read round trip
bit for bit.
"""
from __future__ import annotations

import numpy as np

from .errors import ParseError, RenderError


def snap_to_byte_grid(image: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and round onto the representable 8-bit levels."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def _encode(image: np.ndarray, channels: int, magic: bytes) -> bytes:
    arr = np.asarray(image, dtype=np.float64)
    if channels == 3 and (arr.ndim != 3 or arr.shape[2] != 3):
        raise RenderError(f"color image must be (H, W, 3), got {arr.shape}")
    if channels == 1 and arr.ndim != 2:
        raise RenderError(f"gray image must be (H, W), got {arr.shape}")
    if arr.size == 0:
        raise RenderError("cannot write an empty image")
    h, w = arr.shape[:2]
    payload = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + payload.tobytes()


def write_ppm(path: str, image: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(_encode(image, 3, b"P6"))


def write_pgm(path: str, image: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(_encode(image, 1, b"P5"))


def _parse_header(blob: bytes, path: str) -> tuple[bytes, int, int, int]:
    fields: list[bytes] = []
    pos = 2  # past the magic
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated header")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(x) for x in fields)
    except ValueError:
        raise ParseError(f"{path}: non-numeric header field") from None
    if w < 1 or h < 1:
        raise ParseError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 is supported, got {maxval}")
    return blob[pos:], w, h, maxval


def _read(path: str, magic: bytes, channels: int) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise ParseError(f"{path}: {e.strerror}") from e
    if blob[:2] != magic:
        raise ParseError(f"{path}: expected {magic.decode()} file, "
                         f"got magic {blob[:2]!r}")
    body, w, h, _ = _parse_header(blob, path)
    need = w * h * channels
    if len(body) < need:
        raise ParseError(f"{path}: payload holds {len(body)} bytes, need {need}")
    pixels = np.frombuffer(body[:need], dtype=np.uint8).astype(np.float64) / 255.0
    shape = (h, w, 3) if channels == 3 else (h, w)
    return pixels.reshape(shape)


def read_ppm(path: str) -> np.ndarray:
    return _read(path, b"P6", 3)


def read_pgm(path: str) -> np.ndarray:
    return _read(path, b"P5", 1)


def resize_nearest(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize; keeps values on whatever grid they were on."""
    if out_h < 1 or out_w < 1:
        raise RenderError(f"target size must be positive, got {out_h}x{out_w}")
    arr = np.asarray(image)
    h, w = arr.shape[:2]
    ys = np.minimum((np.floor((np.arange(out_h) + 0.5) * h / out_h)).astype(int), h - 1)
    xs = np.minimum((np.floor((np.arange(out_w) + 0.5) * w / out_w)).astype(int), w - 1)
    return arr[np.ix_(ys, xs)]
