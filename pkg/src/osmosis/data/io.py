"""Image file I/O: 8/16-bit PNG for color, PFM for float depth maps.

All color arrays cross this boundary as RGB float in [0, 1]; the BGR
convention of the underlying OpenCV calls stays private to this module.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from ..errors import DataError

__all__ = [
    "read_image",
    "write_png8",
    "write_png16",
    "read_pfm",
    "write_pfm",
    "read_mask",
    "write_mask",
    "to_uint8",
    "to_uint16",
]


def to_uint8(img01: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img01, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_uint16(img01: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img01, 0.0, 1.0) * 65535.0).astype(np.uint16)


def write_png8(path: str | Path, img01: np.ndarray) -> None:
    _write_png(path, to_uint8(img01))


def write_png16(path: str | Path, img01: np.ndarray) -> None:
    _write_png(path, to_uint16(img01))


def _write_png(path: str | Path, arr: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.ndim == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), arr):
        raise DataError(f"failed to write {path}")


def read_image(path: str | Path) -> np.ndarray:
    """Read a PNG/JPEG as float in [0, 1]; color comes back as [H, W, 3] RGB."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"unreadable image: {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    if raw.dtype == np.uint8:
        return raw.astype(np.float32) / 255.0
    if raw.dtype == np.uint16:
        return raw.astype(np.float32) / 65535.0
    return raw.astype(np.float32)


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Write a single-channel float32 PFM (little-endian, bottom-up rows)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise DataError(f"PFM writer expects a 2-D array, got shape {data.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{data.shape[1]} {data.shape[0]}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise DataError(f"not a PFM file: {path}")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise DataError(f"malformed PFM dimensions in {path}")
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        channels = 3 if header == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * channels
        data = np.frombuffer(fh.read(count * 4), dtype=dtype)
        if data.size != count:
            raise DataError(f"truncated PFM file: {path}")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def read_mask(path: str | Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise DataError(f"unreadable mask: {path}")
    return raw > 0


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    _write_png(path, (np.asarray(mask, dtype=bool) * np.uint8(255)))
