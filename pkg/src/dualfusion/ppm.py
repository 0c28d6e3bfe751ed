"""Binary netpbm I/O (P6 color, P5 gray) and model-space conversion helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PpmError(ValueError):
    """Malformed or unsupported netpbm data."""


@dataclass
class ImageBuffer:
    """8-bit RGB image, row-major; pixels has shape (height, width, 3)."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise PpmError(
                f"pixel block {self.pixels.shape} does not match {self.height}x{self.width}x3"
            )


def _parse_header(data, magic, path):
    if data[:2] != magic:
        raise PpmError(f"{path}: bad magic {data[:2]!r}, expected {magic.decode()}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise PpmError(f"{path}: truncated header")
        ch = data[pos : pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise PpmError(f"{path}: unexpected byte {ch!r} in header")
    # exactly one whitespace byte separates the maxval from the payload
    if pos >= len(data) or data[pos : pos + 1] not in b" \t\r\n":
        raise PpmError(f"{path}: missing whitespace before payload")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise PpmError(f"{path}: unsupported maxval {maxval}, only 255")
    if width < 1 or height < 1:
        raise PpmError(f"{path}: bad dimensions {width}x{height}")
    return width, height, data[pos:]


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, payload = _parse_header(data, b"P6", path)
    need = 3 * width * height
    if len(payload) < need:
        raise PpmError(f"{path}: short payload, {len(payload)} bytes for {need}")
    pixels = np.frombuffer(payload[:need], dtype=np.uint8).reshape(height, width, 3)
    return ImageBuffer(width, height, pixels.copy())


def write_ppm(path, image):
    header = f"P6\n{image.width} {image.height}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(image.pixels.tobytes())


def read_pgm(path):
    """P5 mask; returns floats in [0,1] of shape (height, width)."""
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, payload = _parse_header(data, b"P5", path)
    need = width * height
    if len(payload) < need:
        raise PpmError(f"{path}: short payload, {len(payload)} bytes for {need}")
    gray = np.frombuffer(payload[:need], dtype=np.uint8).reshape(height, width)
    return gray.astype(np.float64) / 255.0


def write_pgm(path, values):
    """Values in [0,1], shape (height, width)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise PpmError(f"mask must be 2-d, got shape {arr.shape}")
    gray = quantize_u8(arr * 255.0)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(gray.tobytes())


def quantize_u8(values):
    """Round half up to the nearest byte, clipped to [0, 255]."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def image_to_model(image):
    """uint8 (H,W,3) -> float64 (3,H,W) mapped onto [-1, 1]."""
    arr = image.pixels.astype(np.float64) / 255.0 * 2.0 - 1.0
    return np.transpose(arr, (2, 0, 1))


def model_to_image(arr):
    """float64 (3,H,W) in [-1, 1] -> ImageBuffer; out-of-range values clip."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise PpmError(f"model array must be (3,H,W), got {arr.shape}")
    hw = np.transpose(arr, (1, 2, 0))
    pixels = quantize_u8((hw + 1.0) / 2.0 * 255.0)
    return ImageBuffer(arr.shape[2], arr.shape[1], pixels)
