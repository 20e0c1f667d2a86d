"""2D Gaussian splats carrying harmonic textures, composited front to back and
decoded once per pixel.

Each splat owns three feature vectors on a virtual equilateral triangle that
circumscribes the unit circle in whitened space (vertices at radius 2).
Features are interpolated at the whitened pixel position with clamped
barycentrics, encoded with sin/cos, and alpha-blended with
alpha_i = opacity_i * rho_i(p) and transmittance T_i = prod_{j<i} (1 - alpha_j).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import harmonic
from .imageio import HdrImage, MuLawParams, mulaw_decode
from .mesh import barycentric_batch
from .nn import MlpParams, init_mlp, mlp_backward, mlp_forward

CANONICAL_TRIANGLE = np.array([
    [0.0, 2.0],
    [-math.sqrt(3.0), -1.0],
    [math.sqrt(3.0), -1.0],
])
T_MIN = 1e-4
SH_DIM = 9


@dataclass
class Splat:
    mean: np.ndarray
    theta: float
    scales: np.ndarray
    opacity: float
    features: np.ndarray          # (3, Nf)
    z: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if np.any(self.scales <= 0):
            raise ValueError("splat scales must be positive")
        if not 0.0 < self.opacity <= 1.0:
            raise ValueError("splat opacity must lie in (0, 1]")

    def rotation(self):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def covariance(self):
        rs = self.rotation() @ np.diag(self.scales)
        return rs @ rs.T


@dataclass
class SplatSet:
    """Struct-of-arrays splat collection kept sorted by z (ties by index)."""
    means: np.ndarray          # (P, 2) pixels
    thetas: np.ndarray         # (P,)
    scales: np.ndarray         # (P, 2) pixels
    opacities: np.ndarray      # (P,)
    features: np.ndarray       # (P, 3, Nf)
    z: np.ndarray              # (P,)

    @classmethod
    def from_splats(cls, splats, n_features=None):
        if not splats:
            nf = n_features or 1
            return cls(np.zeros((0, 2)), np.zeros(0), np.ones((0, 2)), np.ones(0),
                       np.zeros((0, 3, nf)), np.zeros(0))
        return cls(
            np.array([s.mean for s in splats]),
            np.array([s.theta for s in splats], dtype=np.float64),
            np.array([s.scales for s in splats]),
            np.array([s.opacity for s in splats], dtype=np.float64),
            np.array([s.features for s in splats]),
            np.array([s.z for s in splats], dtype=np.float64),
        )

    def __len__(self):
        return len(self.z)

    @property
    def n_features(self):
        return self.features.shape[2]

    def splat(self, i) -> Splat:
        return Splat(self.means[i], float(self.thetas[i]), self.scales[i],
                     float(self.opacities[i]), self.features[i], float(self.z[i]))

    def sorted(self):
        order = np.lexsort((np.arange(len(self)), self.z))
        return SplatSet(self.means[order], self.thetas[order], self.scales[order],
                        self.opacities[order], self.features[order], self.z[order])

    def is_sorted(self):
        return bool(np.all(np.diff(self.z) >= 0))


# -- per-splat evaluation --------------------------------------------------------------

def whiten(means, thetas, scales, points):
    """z = S^{-1} R^T (p - mu) for every (splat, point) pair: (P, N, 2)."""
    d = points[None, :, :] - means[:, None, :]
    c = np.cos(thetas)[:, None]
    s = np.sin(thetas)[:, None]
    r0 = c * d[..., 0] + s * d[..., 1]
    r1 = -s * d[..., 0] + c * d[..., 1]
    return np.stack([r0 / scales[:, 0:1], r1 / scales[:, 1:2]], axis=-1)


def kernel_eval(splat: Splat, p):
    """Gaussian response exp(-0.5 (p - mu)^T Sigma^{-1} (p - mu))."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = whiten(splat.mean[None], np.array([splat.theta]), splat.scales[None], p)[0]
    rho = np.exp(-0.5 * np.sum(q * q, axis=-1))
    return rho[0] if rho.size == 1 else rho


def kernel_eval_cov(splat: Splat, p):
    """Same response through an explicit covariance inverse."""
    sigma = splat.covariance()
    evals = np.linalg.eigvalsh(sigma)
    if np.any(evals <= 0):
        raise ValueError("covariance is not positive definite")
    d = np.atleast_2d(np.asarray(p, dtype=np.float64)) - splat.mean
    m = np.einsum("ni,ij,nj->n", d, np.linalg.inv(sigma), d)
    rho = np.exp(-0.5 * m)
    return rho[0] if rho.size == 1 else rho


def clamped_bary(q):
    """Barycentrics of whitened points in the canonical triangle, negatives
    clamped to zero and renormalized. Returns (beta, raw, total)."""
    a, b, c = CANONICAL_TRIANGLE
    lam = barycentric_batch(q, a, b, c)
    pos = np.maximum(lam, 0.0)
    total = pos.sum(axis=-1, keepdims=True)
    return pos / total, lam, total


_BARY_GRAD = None


def _canonical_bary_gradient():
    global _BARY_GRAD
    if _BARY_GRAD is None:
        from .interp import bary_gradient
        a, b, c = CANONICAL_TRIANGLE
        _BARY_GRAD = bary_gradient(a, b, c)
    return _BARY_GRAD


def interpolate_on_scaffold(splat: Splat, p):
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = whiten(splat.mean[None], np.array([splat.theta]), splat.scales[None], p)[0]
    beta, _, _ = clamped_bary(q)
    f = beta @ splat.features
    return f[0] if len(f) == 1 else f


# -- compositing -----------------------------------------------------------------------

@dataclass
class CompositeCache:
    points: np.ndarray
    q: np.ndarray
    rho: np.ndarray
    alpha: np.ndarray
    trans: np.ndarray
    weight: np.ndarray
    beta: np.ndarray
    lam: np.ndarray
    total: np.ndarray
    feats: np.ndarray
    enc: np.ndarray
    active: np.ndarray


def composite(ss: SplatSet, points, early_stop=True, t_min=T_MIN):
    """Accumulated harmonics sum_i alpha_i T_i [sin f_i; cos f_i] at each point.

    ``ss`` must be sorted by z. Returns ((N, 2 Nf), cache).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, nf = len(points), ss.n_features
    if len(ss) == 0:
        return np.zeros((n, 2 * nf)), None
    q = whiten(ss.means, ss.thetas, ss.scales, points)                   # (P, N, 2)
    rho = np.exp(-0.5 * np.sum(q * q, axis=-1))                          # (P, N)
    alpha = ss.opacities[:, None] * rho
    one_minus = 1.0 - alpha
    trans = np.concatenate([np.ones((1, n)), np.cumprod(one_minus, axis=0)[:-1]], axis=0)
    active = trans >= t_min if early_stop else np.ones_like(trans, dtype=bool)
    weight = np.where(active, alpha * trans, 0.0)
    beta, lam, total = clamped_bary(q)                                  # (P, N, 3)
    feats = np.einsum("pnv,pvf->pnf", beta, ss.features)
    enc = harmonic.encode_sincos(feats)
    acc = np.einsum("pn,pnf->nf", weight, enc)
    return acc, CompositeCache(points, q, rho, alpha, trans, weight, beta, lam, total, feats, enc, active)


def composite_pixel(ss: SplatSet, p, d=None, k=1.0, early_stop=False):
    """Composited harmonics at one pixel with k * SH2(d) appended."""
    acc, _ = composite(ss, np.asarray(p, dtype=np.float64)[None], early_stop=early_stop)
    if d is None:
        d = np.array([0.0, 0.0, 1.0])
    return np.concatenate([acc[0], harmonic.sh2_encode(d, k)])


def composite_naive(ss: SplatSet, p, d=None, k=1.0):
    """Reference loop compositor, one splat at a time, no early-out."""
    nf = ss.n_features
    acc = np.zeros(2 * nf)
    T = 1.0
    for i in range(len(ss)):
        sp = ss.splat(i)
        a = sp.opacity * kernel_eval(sp, p)
        f = interpolate_on_scaffold(sp, p)
        acc += a * T * np.concatenate([np.sin(f), np.cos(f)])
        T *= 1.0 - a
    if d is None:
        d = np.array([0.0, 0.0, 1.0])
    return np.concatenate([acc, harmonic.sh2_encode(d, k)])


def composite_backward(ss: SplatSet, cache: CompositeCache, dacc):
    """VJP of composite. Returns dict of gradients for every splat array."""
    P, N = cache.alpha.shape
    denc = cache.weight[:, :, None] * dacc[None]                         # (P, N, 2Nf)
    dfeat_pt = harmonic.encode_sincos_backward(cache.feats, denc)         # (P, N, Nf)
    dfeatures = np.einsum("pnv,pnf->pvf", cache.beta, dfeat_pt)
    dbeta = np.einsum("pnf,pvf->pnv", dfeat_pt, ss.features)
    # clamped, renormalized barycentrics
    inner = np.sum(dbeta * cache.beta, axis=-1, keepdims=True)
    dlam = (dbeta - inner) / cache.total * (cache.lam > 0)
    dq = np.einsum("pnv,vk->pnk", dlam, _canonical_bary_gradient())
    # transmittance weights
    dw = np.where(cache.active, np.einsum("pnf,nf->pn", cache.enc, dacc), 0.0)
    wd = dw * cache.weight
    later = np.cumsum(wd[::-1], axis=0)[::-1] - wd                        # sum over i > k
    dalpha = cache.trans * dw - later / np.maximum(1.0 - cache.alpha, 1e-12)
    dopacity = np.sum(dalpha * cache.rho, axis=1)
    drho = dalpha * ss.opacities[:, None]
    dq += (-cache.rho * drho)[..., None] * cache.q
    return _whiten_backward(ss, cache.points, cache.q, dq) | {"features": dfeatures, "opacities": dopacity}


def _whiten_backward(ss, points, q, dq):
    dr = dq / ss.scales[:, None, :]
    dscales = -np.sum(dq * q, axis=1) / ss.scales
    c = np.cos(ss.thetas)[:, None]
    s = np.sin(ss.thetas)[:, None]
    r0 = q[..., 0] * ss.scales[:, 0:1]
    r1 = q[..., 1] * ss.scales[:, 1:2]
    dthetas = np.sum(dr[..., 0] * r1 - dr[..., 1] * r0, axis=1)
    ddx = c * dr[..., 0] - s * dr[..., 1]
    ddy = s * dr[..., 0] + c * dr[..., 1]
    dmeans = -np.stack([ddx.sum(axis=1), ddy.sum(axis=1)], axis=1)
    return {"means": dmeans, "thetas": dthetas, "scales": dscales}


# -- camera and deferred decode --------------------------------------------------------

def pinhole_directions(width, height, focal=None):
    """Unit view direction through each pixel center of a pinhole camera, (H*W, 3)."""
    f = float(max(width, height)) if focal is None else float(focal)
    ys, xs = np.mgrid[0:height, 0:width]
    d = np.stack([(xs + 0.5 - width / 2) / f, (ys + 0.5 - height / 2) / f, np.ones((height, width))], axis=-1)
    d = d.reshape(-1, 3)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


class CountingMlp:
    """Wraps MLP params and counts decoded rows."""

    def __init__(self, params: MlpParams):
        self.params = params
        self.evaluations = 0

    def __call__(self, x):
        self.evaluations += len(x)
        return mlp_forward(self.params, x)


@dataclass
class DeferredCache:
    comp: CompositeCache | None
    mlp: object
    sh: np.ndarray


def deferred_codes(ss: SplatSet, mlp, width, height, sh_scale=1.0, focal=None,
                   early_stop=True, directions=None):
    """One MLP evaluation per pixel over composited harmonics + k SH2(d).

    Returns (codes (H, W, out), cache)."""
    pts = np.stack(np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5), -1).reshape(-1, 2)
    acc, ccache = composite(ss, pts, early_stop=early_stop)
    if directions is None:
        directions = pinhole_directions(width, height, focal)
    sh = harmonic.sh2_encode(directions, sh_scale)
    x = np.concatenate([acc, sh], axis=1)
    if isinstance(mlp, CountingMlp):
        out, mcache = mlp(x)
    else:
        out, mcache = mlp_forward(mlp, x)
    return out.reshape(height, width, -1), DeferredCache(ccache, mcache, sh)


def deferred_backward(ss: SplatSet, mlp: MlpParams, cache: DeferredCache, dcodes):
    nf = ss.n_features
    mgrads, dx = mlp_backward(mlp, cache.mlp, dcodes.reshape(-1, dcodes.shape[-1]))
    grads = composite_backward(ss, cache.comp, dx[:, :2 * nf]) if cache.comp is not None else {}
    return grads, mgrads


def render_deferred(ss: SplatSet, mlp, width, height, sh_scale=1.0, focal=None,
                    mulaw=MuLawParams(), early_stop=True) -> HdrImage:
    codes, _ = deferred_codes(ss, mlp, width, height, sh_scale, focal, early_stop)
    return HdrImage(mulaw_decode(np.clip(codes[..., :3], 0.0, 1.0), mulaw), mulaw.w)


# -- scene files -------------------------------------------------------------------------

@dataclass
class Scene:
    splats: SplatSet
    width: int
    height: int
    hidden_width: int = 64
    hidden_layers: int = 2
    mlp_seed: int = 0
    sh_scale: float = 1.0
    focal: float | None = None
    mlp: MlpParams | None = field(default=None, repr=False)
    white_level: float = 16383.0
    mu: float = 5000.0

    @property
    def mulaw(self):
        return MuLawParams(self.mu, self.white_level)

    def decoder(self):
        if self.mlp is not None:
            return self.mlp
        dims = [2 * self.splats.n_features + SH_DIM] + [self.hidden_width] * self.hidden_layers + [3]
        return init_mlp(dims, np.random.default_rng(self.mlp_seed))


_GLOBAL_KEYS = {"width": int, "height": int, "n_features": int, "hidden_width": int,
                "hidden_layers": int, "mlp_seed": int, "sh_scale": float, "focal": float}


def _floats(text):
    return [float(t) for t in text.replace(",", " ").split()]


def read_scene(path) -> Scene:
    """Parse a key=value scene file; each splat starts with a ``[splat]`` line."""
    glob = {}
    splats, cur = [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line == "[splat]":
                cur = {}
                splats.append(cur)
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = (t.strip() for t in line.split("=", 1))
            if cur is None:
                if key not in _GLOBAL_KEYS:
                    raise ValueError(f"{path}:{lineno}: unknown scene key {key!r}")
                glob[key] = _GLOBAL_KEYS[key](val)
            else:
                cur[key] = val
    if "width" not in glob or "height" not in glob:
        raise ValueError(f"{path}: width and height are required")
    out = []
    for i, s in enumerate(splats):
        try:
            feats = [_floats(s[f"f{j}"]) for j in range(3)]
            out.append(Splat(mean=_floats(s["mean"]), theta=float(s.get("theta", 0.0)),
                             scales=_floats(s["scale"]), opacity=float(s["opacity"]),
                             features=feats, z=float(s.get("z", i))))
        except KeyError as exc:
            raise ValueError(f"{path}: splat {i} missing key {exc}") from None
    nf = glob.get("n_features")
    if out and nf is not None and out[0].features.shape[1] != nf:
        raise ValueError(f"{path}: n_features={nf} but splat features have {out[0].features.shape[1]}")
    ss = SplatSet.from_splats(out, nf).sorted()
    return Scene(ss, glob["width"], glob["height"], glob.get("hidden_width", 64),
                 glob.get("hidden_layers", 2), glob.get("mlp_seed", 0), glob.get("sh_scale", 1.0),
                 glob.get("focal"))


def write_scene(path, scene: Scene) -> None:
    ss = scene.splats
    fmt = " ".join
    with open(path, "w") as fh:
        fh.write(f"width={scene.width}\nheight={scene.height}\nn_features={ss.n_features}\n")
        fh.write(f"hidden_width={scene.hidden_width}\nhidden_layers={scene.hidden_layers}\n")
        fh.write(f"mlp_seed={scene.mlp_seed}\nsh_scale={scene.sh_scale!r}\n")
        if scene.focal is not None:
            fh.write(f"focal={scene.focal!r}\n")
        for i in range(len(ss)):
            fh.write("\n[splat]\n")
            fh.write(f"mean={fmt(repr(float(v)) for v in ss.means[i])}\n")
            fh.write(f"theta={float(ss.thetas[i])!r}\n")
            fh.write(f"scale={fmt(repr(float(v)) for v in ss.scales[i])}\n")
            fh.write(f"opacity={float(ss.opacities[i])!r}\n")
            fh.write(f"z={float(ss.z[i])!r}\n")
            for j in range(3):
                fh.write(f"f{j}={fmt(repr(float(v)) for v in ss.features[i, j])}\n")


def random_splats(rng, n, width, height, n_features, scale_range=(2.0, 10.0)):
    means = rng.uniform([0, 0], [width, height], size=(n, 2))
    return SplatSet(
        means=means,
        thetas=rng.uniform(-math.pi, math.pi, n),
        scales=rng.uniform(*scale_range, size=(n, 2)),
        opacities=rng.uniform(0.05, 0.95, n),
        features=rng.normal(0.0, 1.0, size=(n, 3, n_features)),
        z=rng.permutation(n).astype(np.float64),
    ).sorted()
