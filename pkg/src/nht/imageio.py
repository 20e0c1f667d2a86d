"""HDR image loading/saving, mu-law companding and the display tonemap.

Images are float64 arrays of shape (H, W, 3) holding linear-light values in
[0, w], where w is the white level (14-bit sensor range by default).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import cv2
import numpy as np

WHITE_LEVEL = 16383.0
MU = 5000.0


@dataclass(frozen=True)
class MuLawParams:
    mu: float = MU
    w: float = WHITE_LEVEL

    def __post_init__(self):
        if not (self.mu > 0 and self.w > 0):
            raise ValueError(f"mu and w must be positive, got mu={self.mu}, w={self.w}")


@dataclass
class HdrImage:
    data: np.ndarray
    white_level: float = WHITE_LEVEL

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) data, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite samples")
        if np.any(self.data < 0):
            raise ValueError("image contains negative samples")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def mulaw(self) -> MuLawParams:
        return MuLawParams(w=self.white_level)


class ImageFormatError(ValueError):
    pass


# -- sRGB transfer ---------------------------------------------------------

def srgb_to_linear(v):
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v):
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    return np.where(v <= 0.0031308, v * 12.92, 1.055 * v ** (1 / 2.4) - 0.055)


# -- PFM -------------------------------------------------------------------

def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"PF":
            raise ImageFormatError(f"{path}: not an RGB PFM file (header {header!r})")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise ImageFormatError(f"{path}: malformed PFM dimensions")
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        raw = fh.read()
    expected = width * height * 3 * 4
    if len(raw) < expected:
        raise ImageFormatError(f"{path}: truncated PFM payload")
    data = np.frombuffer(raw[:expected], dtype=dtype).reshape(height, width, 3)
    # PFM stores rows bottom-to-top
    return np.flipud(data).astype(np.float32)


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    height, width = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n")
        fh.write(f"{width} {height}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(np.flipud(data)).tobytes())


# -- public load/save --------------------------------------------------------

def load_image(path, white_level: float = WHITE_LEVEL) -> HdrImage:
    """Load a .pfm (float, taken as-is) or .png (8/16-bit sRGB, linearized and
    scaled so the maximum code value maps to the white level). 8-bit JPEG is
    accepted the same way for sample photographs."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pfm":
        data = read_pfm(path).astype(np.float64)
    elif ext in (".png", ".jpg", ".jpeg"):
        raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise ImageFormatError(f"{path}: unreadable image")
        if raw.ndim == 2:
            raw = np.repeat(raw[:, :, None], 3, axis=2)
        elif raw.shape[2] == 4:
            raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGB)
        else:
            raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
        if raw.dtype == np.uint8:
            maxval = 255.0
        elif raw.dtype == np.uint16:
            maxval = 65535.0
        else:
            raise ImageFormatError(f"{path}: unsupported PNG sample type {raw.dtype}")
        data = srgb_to_linear(raw.astype(np.float64) / maxval) * white_level
    else:
        raise ImageFormatError(f"{path}: unsupported extension {ext!r}")
    try:
        return HdrImage(data, white_level)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: {exc}") from None


def save_image(path, img: HdrImage) -> None:
    """Write linear data as .pfm, or as a 16-bit sRGB .png (inverse of load)."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pfm":
        write_pfm(path, img.data)
    elif ext == ".png":
        enc = linear_to_srgb(img.data / img.white_level)
        write_png16(path, enc)
    else:
        raise ImageFormatError(f"{path}: unsupported extension {ext!r}")


def write_png16(path, display: np.ndarray) -> None:
    """Write a [0,1] display-referred RGB array as a 16-bit PNG, no transfer applied."""
    q = np.round(np.clip(display, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if not cv2.imwrite(os.fspath(path), cv2.cvtColor(q, cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write {path}")


# -- mu-law ----------------------------------------------------------------

def mulaw_encode(x, p: MuLawParams = MuLawParams()):
    """log(1 + mu x / w) / log(1 + mu); raises if any sample lies outside [0, w]."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0) or np.any(x > p.w) or not np.all(np.isfinite(x)):
        raise ValueError("mu-law input outside [0, w]")
    return np.log1p(p.mu * x / p.w) / np.log1p(p.mu)


def mulaw_encode_clamped(x, p: MuLawParams = MuLawParams()):
    """Training-path variant: clamp into [0, w] and return (encoded, out_of_range mask)."""
    x = np.asarray(x, dtype=np.float64)
    flag = (x < 0) | (x > p.w)
    xc = np.clip(x, 0.0, p.w)
    return np.log1p(p.mu * xc / p.w) / np.log1p(p.mu), flag


def mulaw_derivative(x, p: MuLawParams = MuLawParams()):
    x = np.asarray(x, dtype=np.float64)
    return (p.mu / p.w) / ((1.0 + p.mu * x / p.w) * np.log1p(p.mu))


def mulaw_decode(y, p: MuLawParams = MuLawParams()):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0) or np.any(y > 1) or not np.all(np.isfinite(y)):
        raise ValueError("mu-law code outside [0, 1]")
    # clip: y = 1 can round a hair above w
    return np.minimum(np.expm1(y * np.log1p(p.mu)) * p.w / p.mu, p.w)


def tonemap(img) -> np.ndarray:
    """Display transform: clamp(x / w, 0, 1) ** (1 / 2.2)."""
    if isinstance(img, HdrImage):
        data, w = img.data, img.white_level
    else:
        data, w = np.asarray(img, dtype=np.float64), WHITE_LEVEL
    return np.clip(data / w, 0.0, 1.0) ** (1 / 2.2)
