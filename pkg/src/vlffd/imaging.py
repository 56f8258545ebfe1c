"""Raster helpers: binary PPM I/O, face cropping with margins, hashing."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError

# Face boxes are (y0, x0, y1, x1) with exclusive ends, in pixel coordinates.
Box = tuple[int, int, int, int]


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"PPM needs an H x W x 3 image, got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
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
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise DataError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise DataError(f"{path}: truncated pixel payload")
    return pixels.reshape(h, w, 3).copy()


def check_box(box: Box, shape: tuple[int, ...]) -> None:
    y0, x0, y1, x1 = box
    if y1 <= y0 or x1 <= x0:
        raise DataError(f"degenerate face box {box}")
    if y0 < 0 or x0 < 0 or y1 > shape[0] or x1 > shape[1]:
        raise DataError(f"face box {box} outside image of shape {shape[:2]}")


def crop_window(box: Box, margin: float) -> tuple[float, float, float, float]:
    """Box grown by ``margin`` times its size on every side (may leave the image)."""
    y0, x0, y1, x1 = box
    mh, mw = margin * (y1 - y0), margin * (x1 - x0)
    return y0 - mh, x0 - mw, y1 + mh, x1 + mw


def crop_face(image: np.ndarray, box: Box, margin: float, out_size: int, order: int = 1) -> np.ndarray:
    """Crop the margin-expanded face box and resample it to ``out_size`` squared.

    Samples outside the image take the nearest edge value. ``order=0`` gives
    nearest-neighbour resampling (used for masks).
    """
    check_box(box, image.shape)
    wy0, wx0, wy1, wx1 = crop_window(box, margin)
    # pixel centres of the output grid mapped into source coordinates
    ys = wy0 + (np.arange(out_size) + 0.5) * (wy1 - wy0) / out_size - 0.5
    xs = wx0 + (np.arange(out_size) + 0.5) * (wx1 - wx0) / out_size - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    src = np.asarray(image, dtype=np.float64)
    if src.ndim == 2:
        return ndimage.map_coordinates(src, [yy, xx], order=order, mode="nearest")
    chans = [ndimage.map_coordinates(src[..., c], [yy, xx], order=order, mode="nearest")
             for c in range(src.shape[2])]
    return np.stack(chans, axis=-1)


def to_unit(image: np.ndarray) -> np.ndarray:
    """uint8-range pixels to zero-centred floats in [-0.5, 0.5]."""
    return np.asarray(image, dtype=np.float64) / 255.0 - 0.5


def image_hash(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(image)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(str(arr.dtype).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def write_pgm16(path: str | Path, values: np.ndarray) -> None:
    """Grey map with values in [0, 1] as a 16-bit binary PGM (big-endian samples)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise DataError(f"PGM needs a 2-D map, got shape {v.shape}")
    if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
        raise DataError("PGM values must be finite and within [0, 1]")
    h, w = v.shape
    samples = np.rint(v * 65535).astype(">u2")
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + samples.tobytes())


def read_pgm16(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = raw.split(b"\n", 3)
    if header[0] != b"P5" or header[2] != b"65535":
        raise DataError(f"{path}: only 16-bit binary PGM is supported")
    w, h = map(int, header[1].split())
    return np.frombuffer(header[3][:w * h * 2], dtype=">u2").reshape(h, w).astype(np.float64) / 65535
