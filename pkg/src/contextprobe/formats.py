"""Binary raster and checkpoint files.

All integers are little-endian u32. Layouts:

    CPR1  image   magic | H | W | C | f32[H*W*C] row-major
    CPL1  labels  magic | H | W | u16[H*W] row-major (0xFFFF = ignore)
    CPM1  mask    magic | H | W | bit-packed row-major, MSB first, padded to a byte
    CPW1  weights magic | header length | UTF-8 JSON header | n | f32[n]
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = b"CPR1"
LABEL_MAGIC = b"CPL1"
MASK_MAGIC = b"CPM1"
WEIGHT_MAGIC = b"CPW1"


class FormatError(ValueError):
    pass


def _check_magic(buf: bytes, magic: bytes, path) -> None:
    if buf[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {buf[:4]!r}")


def _check_size(buf: bytes, needed: int, path) -> None:
    if len(buf) < needed:
        raise FormatError(f"{path}: truncated, need {needed} bytes, have {len(buf)}")


def encode_image(image: np.ndarray) -> bytes:
    if image.ndim != 3:
        raise FormatError(f"image must be H x W x C, got shape {image.shape}")
    h, w, c = image.shape
    body = np.ascontiguousarray(image, dtype="<f4").tobytes()
    return IMAGE_MAGIC + struct.pack("<3I", h, w, c) + body


def decode_image(buf: bytes, path="<bytes>") -> np.ndarray:
    _check_magic(buf, IMAGE_MAGIC, path)
    _check_size(buf, 16, path)
    h, w, c = struct.unpack_from("<3I", buf, 4)
    _check_size(buf, 16 + 4 * h * w * c, path)
    data = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=16)
    return data.reshape(h, w, c).astype(np.float32)


def encode_labels(labels: np.ndarray) -> bytes:
    if labels.ndim != 2:
        raise FormatError(f"labels must be H x W, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 0xFFFF:
        raise FormatError("label values must fit in u16")
    h, w = labels.shape
    return LABEL_MAGIC + struct.pack("<2I", h, w) + np.ascontiguousarray(labels, dtype="<u2").tobytes()


def decode_labels(buf: bytes, path="<bytes>") -> np.ndarray:
    _check_magic(buf, LABEL_MAGIC, path)
    _check_size(buf, 12, path)
    h, w = struct.unpack_from("<2I", buf, 4)
    _check_size(buf, 12 + 2 * h * w, path)
    data = np.frombuffer(buf, dtype="<u2", count=h * w, offset=12)
    return data.reshape(h, w).astype(np.uint16)


def encode_mask(mask: np.ndarray) -> bytes:
    if mask.ndim != 2:
        raise FormatError(f"mask must be H x W, got shape {mask.shape}")
    h, w = mask.shape
    return MASK_MAGIC + struct.pack("<2I", h, w) + np.packbits(mask.astype(bool).ravel()).tobytes()


def decode_mask(buf: bytes, path="<bytes>") -> np.ndarray:
    _check_magic(buf, MASK_MAGIC, path)
    _check_size(buf, 12, path)
    h, w = struct.unpack_from("<2I", buf, 4)
    _check_size(buf, 12 + (h * w + 7) // 8, path)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, offset=12), count=h * w)
    return bits.reshape(h, w).astype(bool)


def encode_weights(values: np.ndarray, header: dict) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    flat = np.ascontiguousarray(values, dtype="<f4").ravel()
    return WEIGHT_MAGIC + struct.pack("<I", len(head)) + head + struct.pack("<I", flat.size) + flat.tobytes()


def decode_weights(buf: bytes, path="<bytes>") -> tuple[np.ndarray, dict]:
    _check_magic(buf, WEIGHT_MAGIC, path)
    _check_size(buf, 8, path)
    (hlen,) = struct.unpack_from("<I", buf, 4)
    _check_size(buf, 12 + hlen, path)
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt weight header: {exc}") from exc
    (n,) = struct.unpack_from("<I", buf, 8 + hlen)
    _check_size(buf, 12 + hlen + 4 * n, path)
    values = np.frombuffer(buf, dtype="<f4", count=n, offset=12 + hlen)
    return values.astype(np.float32), header


def write_bytes(path: str | Path, payload: bytes) -> None:
    Path(path).write_bytes(payload)


def read_image(path: str | Path) -> np.ndarray:
    return decode_image(Path(path).read_bytes(), path)


def read_labels(path: str | Path) -> np.ndarray:
    return decode_labels(Path(path).read_bytes(), path)


def read_mask(path: str | Path) -> np.ndarray:
    return decode_mask(Path(path).read_bytes(), path)
