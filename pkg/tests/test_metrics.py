import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nht.imageio import HdrImage, MuLawParams, mulaw_encode
from nht.metrics import (PSNR_IDENTICAL, blur, blur_adjoint, dssim, dssim_map, evaluate, gaussian_window, psnr,
                         psnr_from_mse, ssim, ssim_backward, ssim_map, to_space)

from _util import central_diff, rel_err

W = 16383.0


def loop_ssim(a, b):
    """Direct per-pixel SSIM with an explicit 11x11 window and mirrored borders."""
    h, w = a.shape
    t = np.arange(-5, 6)
    g = np.exp(-0.5 * (t / 1.5) ** 2)
    win = np.outer(g, g) / np.outer(g, g).sum()
    ap = np.pad(a, 5, mode="symmetric")
    bp = np.pad(b, 5, mode="symmetric")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    out = np.empty_like(a)
    for i in range(h):
        for j in range(w):
            pa = ap[i:i + 11, j:j + 11]
            pb = bp[i:i + 11, j:j + 11]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            out[i, j] = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
    return out


# -- PSNR ------------------------------------------------------------------------------

def test_identical_is_sentinel(rng):
    img = HdrImage(rng.uniform(0, W, (4, 5, 3)))
    for space in ("mulaw", "tonemapped", "linear"):
        assert psnr(img, img, space) == PSNR_IDENTICAL


def test_uniform_offset_20db():
    a = np.full((4, 4, 3), 0.3 * W)
    b = np.full((4, 4, 3), 0.4 * W)
    assert psnr(a, b, "linear") == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_reference_mse(rng):
    a = HdrImage(rng.uniform(0, W, (6, 7, 3)))
    b = HdrImage(rng.uniform(0, W, (6, 7, 3)))
    p = MuLawParams()
    ea = np.log1p(p.mu * a.data / p.w) / np.log1p(p.mu)
    eb = np.log1p(p.mu * b.data / p.w) / np.log1p(p.mu)
    mse = np.sum((ea - eb) ** 2) / ea.size
    assert psnr(a, b, "mulaw") == pytest.approx(-10 * np.log10(mse), rel=1e-12)
    ta, tb = (a.data / W) ** (1 / 2.2), (b.data / W) ** (1 / 2.2)
    assert psnr(a, b, "tonemapped") == pytest.approx(-10 * np.log10(np.mean((ta - tb) ** 2)), rel=1e-12)


def test_psnr_errors(rng):
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), "log")
    # the metric path refuses out-of-range samples instead of clamping
    with pytest.raises(ValueError):
        psnr(np.full((2, 2, 3), 2 * W), np.zeros((2, 2, 3)), "mulaw")


def test_psnr_from_mse():
    assert psnr_from_mse(0.0) == PSNR_IDENTICAL
    assert psnr_from_mse(0.01) == pytest.approx(20.0)


def test_to_space_ranges(rng):
    x = rng.uniform(0, W, (3, 3, 3))
    for space in ("mulaw", "tonemapped", "linear"):
        y = to_space(x, space)
        assert y.min() >= 0 and y.max() <= 1
    assert np.allclose(to_space(x, "mulaw"), mulaw_encode(x))


# -- SSIM ------------------------------------------------------------------------------

def test_window():
    k = gaussian_window()
    assert len(k) == 11 and k.sum() == pytest.approx(1.0)
    assert np.argmax(k) == 5


def test_ssim_identical(rng):
    a = rng.random((20, 24))
    assert np.allclose(ssim_map(a, a), 1.0)
    assert dssim(a, a) == pytest.approx(0.0, abs=1e-15)


def test_inverted_image_dissimilar(rng):
    a = rng.random((32, 32))
    assert dssim(a, 1 - a) > 0.3


def test_matches_loop_oracle(rng):
    a = rng.random((17, 13))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert np.max(np.abs(ssim_map(a, b) - loop_ssim(a, b))) < 1e-8


def test_matches_scikit_image(rng):
    skm = pytest.importorskip("skimage.metrics")
    a = rng.random((40, 36))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    _, ref = skm.structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False, full=True)
    assert np.max(np.abs(ssim_map(a, b) - ref)) < 1e-8


def test_small_image_padded(rng):
    a = rng.random((4, 3))
    b = rng.random((4, 3))
    assert ssim_map(a, b).shape == (4, 3)
    assert np.max(np.abs(ssim_map(a, b) - loop_ssim(a, b))) < 1e-8


def test_color_is_channel_mean(rng):
    a = rng.random((10, 12, 3))
    b = rng.random((10, 12, 3))
    per = np.stack([ssim_map(a[..., c], b[..., c]) for c in range(3)], -1)
    assert np.allclose(ssim_map(a, b), per.mean(-1))
    assert np.allclose(dssim_map(a, b), (1 - per.mean(-1)) / 2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_symmetric_and_bounded(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((12, 12)), r.random((12, 12))
    assert np.max(np.abs(ssim_map(a, b) - ssim_map(b, a))) < 1e-12
    d = dssim(a, b)
    assert 0.0 <= d <= 1.0


def test_blur_adjoint(rng):
    x = rng.normal(size=(9, 14, 2))
    y = rng.normal(size=(9, 14, 2))
    assert np.sum(blur(x) * y) == pytest.approx(np.sum(x * blur_adjoint(y)), rel=1e-12)


def test_ssim_backward_fd(rng):
    a = rng.random((8, 9, 3))
    b = rng.random((8, 9, 3))
    dmap = rng.normal(size=a.shape)

    def loss():
        return float(np.sum(dmap * ssim_map(a, b, return_channels=True)))

    assert rel_err(ssim_backward(a, b, dmap), central_diff(loss, a)) < 1e-6


def test_evaluate_row(rng):
    a = HdrImage(rng.uniform(0, W, (16, 16, 3)))
    row = evaluate(a, a)
    assert set(row) == {"psnr_mu", "psnr_tm", "ssim_tm", "psnr_lin"}
    assert row["psnr_mu"] == PSNR_IDENTICAL and row["ssim_tm"] == pytest.approx(1.0)
