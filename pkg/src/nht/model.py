"""Mesh-based neural harmonic texture model for 2D images.

Forward for a batch of sample points: locate -> interpolate features
(vertex gradients refreshed every call) -> periodic encoding -> MLP, whose
output is the mu-law code of the pixel color.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import harmonic
from .imageio import HdrImage, MuLawParams, mulaw_decode
from .interp import field_backward, field_forward
from .mesh import Mesh, locate, pixel_centers
from .nn import MlpParams, mlp_backward, mlp_forward


@dataclass
class MeshModel:
    mesh: Mesh
    features: np.ndarray
    mlp: MlpParams
    scheme: str = "ct_split"
    encoding: str = "sincos"
    white_level: float = 16383.0
    mu: float = 5000.0
    mlp_dtype: type = field(default=np.float64, repr=False)

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def width(self):
        return int(round(self.mesh.width))

    @property
    def height(self):
        return int(round(self.mesh.height))

    @property
    def mulaw(self):
        return MuLawParams(self.mu, self.white_level)


@dataclass
class ForwardCache:
    field: object
    values: np.ndarray
    mlp: object


def forward(model: MeshModel, points, located=None, mlp=None):
    """Predicted mu-law codes (N, 3) at ``points`` plus a backward cache."""
    params = model.mlp if mlp is None else mlp
    vals, fcache = field_forward(model.mesh, model.features, points, model.scheme, located)
    enc = harmonic.encode(vals, model.encoding).astype(model.mlp_dtype, copy=False)
    out, mcache = mlp_forward(params, enc)
    return out, ForwardCache(fcache, vals, mcache)


def backward(model: MeshModel, cache: ForwardCache, dout, detach_gradient_positions=False):
    """Returns (dfeatures, dpositions, mlp grads)."""
    mgrads, denc = mlp_backward(model.mlp, cache.mlp, dout.astype(model.mlp_dtype, copy=False))
    dvals = harmonic.encode_backward(cache.values, denc.astype(np.float64), model.encoding)
    dfeat, dpos = field_backward(model.mesh, cache.field, dvals, detach_gradient_positions)
    return dfeat, dpos, mgrads


def render_codes(model: MeshModel, mlp=None, stride=1, chunk=1 << 16):
    """Full-frame mu-law codes at pixel centers, shape (H', W', 3)."""
    w, h = model.width, model.height
    pts = pixel_centers(w, h, stride)
    tri, bary = locate(model.mesh, pts)
    out = np.empty((len(pts), 3))
    for s in range(0, len(pts), chunk):
        sl = slice(s, s + chunk)
        out[sl], _ = forward(model, pts[sl], (tri[sl], bary[sl]), mlp)
    hh = len(range(0, h, stride))
    ww = len(range(0, w, stride))
    return out.reshape(hh, ww, 3), tri.reshape(hh, ww)


def codes_to_image(codes, p: MuLawParams) -> HdrImage:
    return HdrImage(np.clip(mulaw_decode(np.clip(codes, 0.0, 1.0), p), 0.0, p.w), p.w)


def render(model: MeshModel, mlp=None) -> HdrImage:
    codes, _ = render_codes(model, mlp)
    return codes_to_image(codes, model.mulaw)
