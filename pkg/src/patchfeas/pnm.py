"""Binary PPM (P6) and PGM (P5) images, 8-bit only."""
from __future__ import annotations

import numpy as np


class PNMError(ValueError):
    pass


def _read_header(data: bytes):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PNMError("truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode(data: bytes) -> np.ndarray:
    tokens, offset = _read_header(data)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PNMError("malformed header") from None
    if not 0 < maxval < 256:
        raise PNMError("only 8-bit images are supported")
    channels = 3 if magic == b"P6" else 1
    count = width * height * channels
    raster = np.frombuffer(data, dtype=np.uint8, count=count, offset=offset) if len(data) - offset >= count else None
    if raster is None:
        raise PNMError("truncated raster")
    img = raster.reshape(height, width, channels) if channels == 3 else raster.reshape(height, width)
    return img.copy()


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise PNMError("expected uint8 pixels")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise PNMError(f"cannot encode array of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def read(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode(f.read())


def write(path, img) -> None:
    with open(path, "wb") as f:
        f.write(encode(img))


def to_uint8(chw: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) bytes."""
    return np.round(np.clip(chw, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(hwc: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (hwc.astype(dtype) / 255).transpose(2, 0, 1).copy()
