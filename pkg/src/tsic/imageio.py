"""PNG read/write without external deps, plus a Pillow-backed JPEG path.

The native PNG writer emits byte-identical files for identical inputs
(fixed filter choice and zlib level), which keeps emitted artifacts
reproducible. The reader handles 8-bit grayscale/RGB/RGBA, non-interlaced,
with all five standard row filters.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

__all__ = ["read_png", "write_png", "load_image", "save_image", "ImageDecodeError"]

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


class ImageDecodeError(ValueError):
    pass


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(
        ">I", zlib.crc32(tag + payload) & 0xFFFFFFFF
    )


def write_png(path, array: np.ndarray) -> Path:
    """Write uint8 image data as PNG. Accepts [H,W] gray or [3,H,W] RGB."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("write_png expects uint8 data")
    if arr.ndim == 2:
        color_type, planes = 0, arr[None]
    elif arr.ndim == 3 and arr.shape[0] == 3:
        color_type, planes = 2, arr
    else:
        raise ValueError(f"unsupported array shape for PNG: {arr.shape}")
    _, h, w = planes.shape
    rows = planes.transpose(1, 2, 0).reshape(h, w * planes.shape[0])
    raw = b"".join(b"\x00" + rows[i].tobytes() for i in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    payload = _PNG_SIG + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b"")
    path = Path(path)
    path.write_bytes(payload)
    return path


def _unfilter(raw: bytes, h: int, w: int, channels: int) -> np.ndarray:
    stride = w * channels
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(h):
        ftype = raw[pos]
        pos += 1
        row = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos).astype(np.int32)
        pos += stride
        if ftype == 0:
            cur = row
        elif ftype == 1:  # sub
            cur = row.copy()
            for x in range(channels, stride):
                cur[x] = (cur[x] + cur[x - channels]) & 0xFF
        elif ftype == 2:  # up
            cur = (row + prev) & 0xFF
        elif ftype == 3:  # average
            cur = row.copy()
            for x in range(stride):
                left = cur[x - channels] if x >= channels else 0
                cur[x] = (cur[x] + ((left + prev[x]) >> 1)) & 0xFF
        elif ftype == 4:  # paeth
            cur = row.copy()
            for x in range(stride):
                a = cur[x - channels] if x >= channels else 0
                b = prev[x]
                c = prev[x - channels] if x >= channels else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
                cur[x] = (cur[x] + pred) & 0xFF
        else:
            raise ImageDecodeError(f"unknown PNG filter type {ftype}")
        out[y] = cur.astype(np.uint8)
        prev = cur
    return out


def read_png(path) -> np.ndarray:
    """Read a PNG into uint8 [3,H,W] (grayscale replicated, alpha dropped)."""
    data = Path(path).read_bytes()
    if data[:8] != _PNG_SIG:
        raise ImageDecodeError(f"not a PNG file: {path}")
    pos = 8
    width = height = None
    color_type = bit_depth = None
    idat = bytearray()
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        tag = data[pos + 4 : pos + 8]
        payload = data[pos + 8 : pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            width, height, bit_depth, color_type, _, _, interlace = struct.unpack(">IIBBBBB", payload)
            if bit_depth != 8:
                raise ImageDecodeError(f"unsupported PNG bit depth {bit_depth}")
            if interlace != 0:
                raise ImageDecodeError("interlaced PNG is not supported")
        elif tag == b"IDAT":
            idat.extend(payload)
        elif tag == b"IEND":
            break
    if width is None:
        raise ImageDecodeError("PNG missing IHDR")
    channels = {0: 1, 2: 3, 6: 4}.get(color_type)
    if channels is None:
        raise ImageDecodeError(f"unsupported PNG color type {color_type}")
    raw = zlib.decompress(bytes(idat))
    expected = height * (width * channels + 1)
    if len(raw) != expected:
        raise ImageDecodeError("PNG pixel data has unexpected length")
    rows = _unfilter(raw, height, width, channels)
    img = rows.reshape(height, width, channels).transpose(2, 0, 1)
    if channels == 1:
        img = np.repeat(img, 3, axis=0)
    elif channels == 4:
        img = img[:3]
    return np.ascontiguousarray(img)


def load_image(path) -> np.ndarray:
    """Decode PNG or JPEG into uint8 [3,H,W]. JPEG requires Pillow."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        return read_png(path)
    if suffix in (".jpg", ".jpeg"):
        try:
            from PIL import Image
        except ImportError as exc:
            raise ImageDecodeError(
                "JPEG decoding requires the optional 'pillow' dependency (pip install tsic[jpeg])"
            ) from exc
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        return np.ascontiguousarray(arr.transpose(2, 0, 1))
    raise ImageDecodeError(f"unsupported image format: {path.name}")


def save_image(path, array: np.ndarray) -> Path:
    return write_png(path, array)
