"""Synthetic and public test images used by the tests, scripts and acceptance suite.

Public images come from the scikit-image sample data (optional dependency).
8-bit sRGB photographs are linearized and scaled to the white level; they are
stand-ins for real HDR captures, which are not bundled anywhere offline.
"""

from __future__ import annotations

import os

import numpy as np

from .imageio import WHITE_LEVEL, HdrImage, load_image


def constant(width, height, value=(4000.0, 2000.0, 1000.0), white_level=WHITE_LEVEL):
    data = np.broadcast_to(np.asarray(value, dtype=np.float64), (height, width, 3)).copy()
    return HdrImage(data, white_level)


def ramp(width, height, white_level=WHITE_LEVEL):
    """Per-channel linear ramps in the mu-law code domain (linear in x and y)."""
    from .imageio import MuLawParams, mulaw_decode
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    u, v = xx / width, yy / height
    codes = np.stack([0.2 + 0.6 * u, 0.3 + 0.5 * v, 0.25 + 0.35 * (u + v)], axis=-1)
    return HdrImage(mulaw_decode(codes, MuLawParams(w=white_level)), white_level)


def sharp_edge(width, height, angle=0.35, low=300.0, high=9000.0, white_level=WHITE_LEVEL, seed=0):
    """A hard slanted step edge plus a soft shading gradient and a disc."""
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    n = np.array([np.cos(angle), np.sin(angle)])
    side = (xx - 0.5 * width) * n[0] + (yy - 0.5 * height) * n[1] > 0
    shade = 0.6 + 0.4 * xx / width
    disc = (xx - 0.3 * width) ** 2 + (yy - 0.7 * height) ** 2 < (0.12 * min(width, height)) ** 2
    base = np.where(side, high, low) * shade
    base = np.where(disc, 0.5 * (low + high), base)
    tint = np.array([1.0, 0.8, 0.6])
    return HdrImage(np.clip(base[..., None] * tint, 0, white_level), white_level)


def sample_data_path(name):
    try:
        import skimage
    except ImportError as exc:
        raise RuntimeError("public sample images need scikit-image installed") from exc
    path = os.path.join(os.path.dirname(skimage.__file__), "data", name)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return path


def public_image(name, size=None, crop=None, white_level=WHITE_LEVEL):
    """Load a scikit-image sample photo as a linear HDR image.

    ``crop`` = (x0, y0, w, h) is applied first, then ``size`` = (w, h) resizes
    with area averaging in linear light.
    """
    img = load_image(sample_data_path(name), white_level)
    data = img.data
    if crop is not None:
        x0, y0, w, h = crop
        data = data[y0:y0 + h, x0:x0 + w]
    if size is not None:
        import cv2
        data = cv2.resize(data, size, interpolation=cv2.INTER_AREA)
    return HdrImage(np.ascontiguousarray(np.clip(data, 0, white_level)), white_level)


def natural_256():
    return public_image("astronaut.png", size=(256, 256))


def hdr_crop_1mp():
    """1024 x 1024 crop of the scikit-image retina photograph."""
    return public_image("retina.jpg", crop=(194, 194, 1024, 1024))
