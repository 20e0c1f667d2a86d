"""PSNR in mu-law / tonemapped / linear space, SSIM maps and DSSIM.

SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, data
range 1, symmetric (edge-repeating) padding so the map has the input size.
Color images are handled per channel and the maps averaged.
"""

from __future__ import annotations

import numpy as np

from .imageio import HdrImage, MuLawParams, WHITE_LEVEL, mulaw_encode, tonemap

SPACES = ("mulaw", "tonemapped", "linear")
PSNR_IDENTICAL = float("inf")

WIN_RADIUS = 5
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _as_array(img):
    if isinstance(img, HdrImage):
        return img.data, img.white_level
    return np.asarray(img, dtype=np.float64), WHITE_LEVEL


def to_space(img, space, white_level=None):
    data, w = _as_array(img)
    if white_level is not None:
        w = white_level
    if space == "mulaw":
        return mulaw_encode(data, MuLawParams(w=w))
    if space == "tonemapped":
        return np.clip(data / w, 0.0, 1.0) ** (1 / 2.2)
    if space == "linear":
        return data / w
    raise ValueError(f"unknown space {space!r}")


def psnr_from_mse(mse):
    return PSNR_IDENTICAL if mse == 0 else 10.0 * np.log10(1.0 / mse)


def psnr(a, b, space="mulaw", white_level=None):
    """10 log10(1 / MSE) after mapping both images into [0, 1] by ``space``."""
    xa = to_space(a, space, white_level)
    xb = to_space(b, space, white_level)
    if xa.shape != xb.shape:
        raise ValueError(f"shape mismatch {xa.shape} vs {xb.shape}")
    return psnr_from_mse(float(np.mean((xa - xb) ** 2)))


# -- separable Gaussian blur with an exact adjoint --------------------------------

def gaussian_window(radius=WIN_RADIUS, sigma=WIN_SIGMA):
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


_KERNEL = gaussian_window()


def _pad_index(n, r):
    return np.pad(np.arange(n), r, mode="symmetric")


def _blur_axis(x, axis, k=_KERNEL):
    r = len(k) // 2
    x = np.moveaxis(x, axis, 0)
    n = x.shape[0]
    xp = x[_pad_index(n, r)]
    out = np.zeros_like(x)
    for t, kt in enumerate(k):
        out += kt * xp[t:t + n]
    return np.moveaxis(out, 0, axis)


def _blur_axis_adjoint(g, axis, k=_KERNEL):
    r = len(k) // 2
    g = np.moveaxis(g, axis, 0)
    n = g.shape[0]
    gp = np.zeros((n + 2 * r,) + g.shape[1:])
    for t, kt in enumerate(k):
        gp[t:t + n] += kt * g
    out = np.zeros_like(g)
    np.add.at(out, _pad_index(n, r), gp)
    return np.moveaxis(out, 0, axis)


def blur(x):
    return _blur_axis(_blur_axis(x, 0), 1)


def blur_adjoint(g):
    return _blur_axis_adjoint(_blur_axis_adjoint(g, 1), 0)


# -- SSIM --------------------------------------------------------------------------

def _ssim_terms(a, b):
    c1, c2 = K1 ** 2, K2 ** 2
    mu_a, mu_b = blur(a), blur(b)
    m_aa, m_bb, m_ab = blur(a * a), blur(b * b), blur(a * b)
    var_a = m_aa - mu_a ** 2
    var_b = m_bb - mu_b ** 2
    cov = m_ab - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + c1
    n2 = 2 * cov + c2
    d1 = mu_a ** 2 + mu_b ** 2 + c1
    d2 = var_a + var_b + c2
    return mu_a, mu_b, n1, n2, d1, d2


def ssim_map(a, b, return_channels=False):
    """Per-pixel SSIM of two [0,1] images (H, W) or (H, W, C); channel-averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    _, _, n1, n2, d1, d2 = _ssim_terms(a, b)
    s = (n1 * n2) / (d1 * d2)
    if return_channels or s.ndim == 2:
        return s
    return s.mean(axis=2)


def ssim(a, b):
    return float(ssim_map(a, b).mean())


def dssim(a, b):
    """(1 - mean SSIM) / 2."""
    return (1.0 - ssim(a, b)) / 2.0


def dssim_map(a, b):
    return (1.0 - ssim_map(a, b)) / 2.0


def ssim_backward(a, b, dmap):
    """Gradient w.r.t. ``a`` of sum(dmap * ssim_map(a, b, return_channels=True))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu_a, mu_b, n1, n2, d1, d2 = _ssim_terms(a, b)
    s = (n1 * n2) / (d1 * d2)
    g_n1 = dmap * n2 / (d1 * d2)
    g_n2 = dmap * n1 / (d1 * d2)
    g_d1 = -dmap * s / d1
    g_d2 = -dmap * s / d2
    g_mu = g_n1 * 2 * mu_b + g_d1 * 2 * mu_a - g_n2 * 2 * mu_b - g_d2 * 2 * mu_a
    g_ab = 2 * g_n2
    g_aa = g_d2
    return blur_adjoint(g_mu) + 2 * a * blur_adjoint(g_aa) + b * blur_adjoint(g_ab)


def evaluate(pred, ref):
    """Metric row for an HDR prediction against its reference."""
    tm_p, tm_r = tonemap(pred), tonemap(ref)
    return {
        "psnr_mu": psnr(pred, ref, "mulaw"),
        "psnr_tm": psnr(pred, ref, "tonemapped"),
        "ssim_tm": ssim(tm_p, tm_r),
        "psnr_lin": psnr(pred, ref, "linear"),
    }
