"""Periodic feature encodings and the degree-2 real spherical harmonic basis."""

from __future__ import annotations

import warnings

import numpy as np

MODES = ("identity", "relu", "cos", "sincos")

# orthonormal real SH, bands 0..2
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)


def encoded_width(n_f, mode):
    if mode not in MODES:
        raise ValueError(f"unknown encoding {mode!r}")
    return 2 * n_f if mode == "sincos" else n_f


def encode_sincos(f):
    f = np.asarray(f, dtype=np.float64)
    return np.concatenate([np.sin(f), np.cos(f)], axis=-1)


def encode_sincos_backward(f, g):
    n = f.shape[-1]
    return np.cos(f) * g[..., :n] - np.sin(f) * g[..., n:]


def encode(f, mode="sincos"):
    """Apply one of the ablation encodings along the last axis."""
    f = np.asarray(f)
    if mode == "sincos":
        return np.concatenate([np.sin(f), np.cos(f)], axis=-1)
    if mode == "cos":
        return np.cos(f)
    if mode == "relu":
        return np.maximum(f, 0.0)
    if mode == "identity":
        return f.copy()
    raise ValueError(f"unknown encoding {mode!r}")


encode_variant = encode


def encode_backward(f, g, mode="sincos"):
    if mode == "sincos":
        return encode_sincos_backward(f, g)
    if mode == "cos":
        return -np.sin(f) * g
    if mode == "relu":
        return g * (f > 0)
    if mode == "identity":
        return g.copy()
    raise ValueError(f"unknown encoding {mode!r}")


def sh2_encode(d, k=1.0):
    """Nine real SH values of unit direction(s) d, scaled by k.

    Non-unit input is normalized with a warning.
    """
    d = np.asarray(d, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(np.abs(norm - 1.0) > 1e-6):
        warnings.warn("sh2_encode: non-unit direction normalized", RuntimeWarning, stacklevel=2)
        d = d / norm
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.stack([
        np.full_like(x, SH_C0),
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (3.0 * z * z - 1.0),
        SH_C2[3] * x * z,
        SH_C2[4] * (x * x - y * y),
    ], axis=-1)
    return k * out
