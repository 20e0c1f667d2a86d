import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nht import metrics, testimages
from nht.imageio import HdrImage, MuLawParams, mulaw_encode
from nht.mesh import is_valid, triangulate
from nht.trainer import (ConfigError, TrainConfig, bilinear, densify_step, fit_image, fit_psnr, fit_splats,
                         json_logger, load_config, loss_mulaw_mse, loss_splat, parse_overrides, sample_batch,
                         score_triangles, stratified_points, write_config)

from _util import central_diff, random_mesh, rel_err

W = 16383.0
P = MuLawParams()


class Reg:
    def __init__(self, opacities, scales):
        self.opacities = np.asarray(opacities, float)
        self.scales = np.asarray(scales, float)


# -- config ------------------------------------------------------------------------------

def test_defaults():
    c = TrainConfig()
    assert (c.iters, c.batch_pixels) == (25000, 160000)
    assert (c.lr_positions, c.lr_features, c.lr_mlp) == (1e-4, 5e-3, 5e-5)
    assert (c.densify_start, c.densify_end, c.densify_every) == (1500, 15000, 500)
    assert (c.densify_growth, c.score_exponent, c.min_pixels) == (0.35, 0.75, 3)
    assert (c.lambda_dssim, c.lambda_alpha, c.lambda_scale, c.ema_gamma) == (0.1, 0.02, 0.005, 0.95)
    c.validate()


def test_overrides_and_file(tmp_path):
    c = parse_overrides(["iters=10", "lr-mlp=0.01", "densify=false", "encoding=cos"])
    assert c.iters == 10 and c.lr_mlp == 0.01 and c.densify is False and c.encoding == "cos"
    path = tmp_path / "c.cfg"
    path.write_text("# comment\niters = 50\nrefine_iters=5  # trailing\n\n")
    c = load_config(path, ["seed=3"])
    assert (c.iters, c.refine_iters, c.seed) == (50, 5, 3)
    write_config(tmp_path / "out.cfg", c)
    assert load_config(tmp_path / "out.cfg") == c


@pytest.mark.parametrize("bad", [["iters"], ["nope=1"], ["iters=abc"], ["densify=maybe"]])
def test_override_errors(bad):
    with pytest.raises(ConfigError):
        parse_overrides(bad)


@pytest.mark.parametrize("pairs", [["iters=0"], ["densify_start=10", "densify_end=5"], ["lr_mlp=-1"],
                                   ["refine_iters=30000"], ["densify_growth=2"]])
def test_validate_rejects(pairs):
    with pytest.raises(ValueError):
        parse_overrides(pairs).validate()


# -- sampling ----------------------------------------------------------------------------

def test_four_samples_one_per_quadrant():
    pts = stratified_points(np.random.default_rng(0), 2, 2, 4)
    cells = sorted((int(x), int(y)) for x, y in pts)
    assert cells == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_constant_image_gt():
    img = testimages.constant(7, 5)
    pts, gt = sample_batch(np.random.default_rng(1), img, 100)
    assert np.allclose(gt, img.data[0, 0])
    assert pts.shape == (100, 2)


def test_strata_uniform():
    rng = np.random.default_rng(2)
    n = 10 ** 6
    pts = stratified_points(rng, 64, 64, n)
    assert len(pts) == n and pts.min() >= 0 and pts.max() < 64
    counts = np.histogram2d(pts[:, 0], pts[:, 1], bins=8, range=[[0, 64], [0, 64]])[0]
    assert np.max(np.abs(counts / counts.mean() - 1)) < 0.01


def test_bilinear_at_centers_and_midpoints(rng):
    img = rng.random((4, 5, 3))
    ys, xs = np.mgrid[0:4, 0:5]
    centers = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], 1)
    assert np.allclose(bilinear(img, centers), img.reshape(-1, 3))
    mid = bilinear(img, np.array([[1.0, 0.5]]))
    assert np.allclose(mid[0], (img[0, 0] + img[0, 1]) / 2)
    # outside the outermost centers the value is held
    assert np.allclose(bilinear(img, np.array([[0.0, 0.0]]))[0], img[0, 0])


# -- losses ------------------------------------------------------------------------------

def test_mulaw_loss_zero():
    x = np.full((5, 3), 1234.0)
    loss, grad = loss_mulaw_mse(x, x)
    assert loss == 0.0 and np.all(grad == 0)


def test_mulaw_loss_scalar_symbolic():
    pred, gt = np.array([[800.0]]), np.array([[200.0]])
    loss, grad = loss_mulaw_mse(pred, gt)
    f = lambda x: math.log1p(5000 * x / W) / math.log1p(5000)
    assert loss == pytest.approx((f(800) - f(200)) ** 2)
    df = 5000 / W / ((1 + 5000 * 800 / W) * math.log1p(5000))
    assert grad[0, 0] == pytest.approx(2 * (f(800) - f(200)) * df)


def test_mulaw_loss_fd(rng):
    pred = rng.uniform(10, W - 10, (6, 3))
    gt = rng.uniform(0, W, (6, 3))
    _, grad = loss_mulaw_mse(pred, gt)
    num = central_diff(lambda: loss_mulaw_mse(pred, gt)[0], pred, h=1e-3)
    assert rel_err(grad, num) < 1e-5


def test_mulaw_loss_encoded_prediction(rng):
    gt = rng.uniform(0, W, (6, 3))
    codes = rng.random((6, 3))
    loss, grad = loss_mulaw_mse(codes, gt, pred_encoded=True)
    r = codes - mulaw_encode(gt)
    assert loss == pytest.approx(np.mean(r ** 2))
    assert np.allclose(grad, 2 * r / r.size)


def test_mulaw_loss_clamped_gradient_zero():
    _, grad = loss_mulaw_mse(np.array([[-5.0, 2 * W]]), np.array([[100.0, 100.0]]))
    assert np.all(grad == 0)


def reference_splat_loss(pred, gt, opac, scales, lam, la, ls):
    from skimage.metrics import structural_similarity
    l1 = np.abs(pred - gt).mean()
    s = np.mean([structural_similarity(pred[..., c], gt[..., c], data_range=1.0, gaussian_weights=True,
                                       sigma=1.5, use_sample_covariance=False, full=True)[1].mean()
                 for c in range(pred.shape[2])])
    return (1 - lam) * l1 + lam * (1 - s) / 2 + la * opac.mean() + ls * np.abs(scales).sum(1).mean()


def test_splat_loss_zero():
    img = np.full((12, 12, 3), 0.4)
    loss, terms, _ = loss_splat(img, img, Reg(np.zeros(3), np.zeros((3, 2))))
    assert loss == pytest.approx(0.0, abs=1e-15)


def test_splat_loss_pure_l1(rng):
    a, b = rng.random((10, 10, 3)), rng.random((10, 10, 3))
    loss, _, _ = loss_splat(a, b, Reg(np.ones(2), np.ones((2, 2))), lam=0.0, lam_alpha=0, lam_scale=0)
    assert loss == pytest.approx(np.abs(a - b).mean())


def test_splat_loss_reference(rng):
    pytest.importorskip("skimage")
    a, b = rng.random((16, 14, 3)), rng.random((16, 14, 3))
    op, sc = rng.random(5), rng.random((5, 2)) * 3
    loss, _, _ = loss_splat(a, b, Reg(op, sc), 0.1, 0.02, 0.005)
    assert loss == pytest.approx(reference_splat_loss(a, b, op, sc, 0.1, 0.02, 0.005), abs=1e-10)


def test_splat_loss_gradients(rng):
    a, b = rng.random((9, 8, 3)), rng.random((9, 8, 3))
    op, sc = rng.random(4), rng.random((4, 2)) + 0.5
    _, _, g = loss_splat(a, b, Reg(op, sc))
    num = central_diff(lambda: loss_splat(a, b, Reg(op, sc))[0], a, h=1e-7)
    assert rel_err(g["pred"], num) < 1e-4
    assert rel_err(g["opacities"], central_diff(lambda: loss_splat(a, b, Reg(op, sc))[0], op)) < 1e-6
    assert rel_err(g["scales"], central_diff(lambda: loss_splat(a, b, Reg(op, sc))[0], sc)) < 1e-6


# -- densification -----------------------------------------------------------------------

def test_scores_zero_on_perfect_fit(rng):
    m = random_mesh(rng, width=32, height=24, n_interior=10)
    img = rng.random((24, 32, 3))
    s = score_triangles(m, img, img, TrainConfig())
    finite = np.isfinite(s)
    assert np.allclose(s[finite], 0.0)


def test_score_ratio_equal_dssim():
    # flat images: the DSSIM map is the same constant at every pixel
    cfg = TrainConfig()
    m = triangulate(np.array([[0, 0], [110, 0], [110, 110], [0, 110], [55, 55]], float), 110, 110)
    tri_map = np.full((110, 110), 2, np.int64)
    tri_map[:10, 100:] = 0                   # 100 px
    tri_map[:100, :100] = 1                  # 10000 px
    pred = np.full((110, 110), 0.3)
    gt = np.full((110, 110), 0.6)
    d = metrics.dssim_map(pred, gt)
    assert np.ptp(d) < 1e-15 and d[0, 0] > 0
    s = score_triangles(m, pred, gt, cfg, tri_map=tri_map)
    assert s[0] == pytest.approx(d[0, 0] * 100 ** 0.75, rel=1e-12)
    assert s[1] / s[0] == pytest.approx(31.6227766, rel=1e-8)


def test_small_triangle_excluded(rng):
    m = random_mesh(rng, width=16, height=16, n_interior=4)
    tri_map = np.zeros((16, 16), np.int64)
    tri_map[0, :2] = 1          # triangle 1 owns 2 pixels
    pred, gt = rng.random((16, 16)), rng.random((16, 16))
    s = score_triangles(m, pred, gt, TrainConfig(), tri_map=tri_map)
    assert s[1] == -np.inf
    assert np.isfinite(s[0])


def test_densify_growth_cap(rng):
    m = random_mesh(rng, width=64, height=64, n_interior=70)
    m = triangulate(m.positions[:100], 64, 64)
    assert m.n_vertices == 100
    feats = rng.normal(size=(100, 4))
    scores = rng.random(m.n_triangles) + 0.1
    out, f2, added = densify_step(m, feats, scores, TrainConfig())
    assert added == 35 and out.n_vertices == 135 and len(f2) == 135
    assert is_valid(out)
    assert np.array_equal(out.positions[:100], m.positions)


def test_densify_no_positive_scores(rng):
    m = random_mesh(rng)
    feats = rng.normal(size=(m.n_vertices, 2))
    out, f2, added = densify_step(m, feats, np.zeros(m.n_triangles), TrainConfig())
    assert added == 0 and out is m and f2 is feats


def test_densify_centroid_features(rng):
    m = random_mesh(rng, n_interior=20)
    feats = rng.normal(size=(m.n_vertices, 3))
    scores = np.full(m.n_triangles, -np.inf)
    scores[[4, 9]] = [1.0, 2.0]
    out, f2, added = densify_step(m, feats, scores, TrainConfig())
    assert added == 2
    for k, t in enumerate([4, 9]):
        v = m.n_vertices + k
        assert np.array_equal(f2[v], feats[m.triangles[t]].mean(axis=0))
        assert np.allclose(out.positions[v], m.positions[m.triangles[t]].mean(axis=0))


def test_densify_tie_lower_id(rng):
    m = random_mesh(rng, n_interior=3)
    m = triangulate(m.positions[:10], m.width, m.height)     # cap = 3
    scores = np.ones(m.n_triangles)
    _, _, added = densify_step(m, np.zeros((10, 1)), scores, TrainConfig(), max_new=2)
    assert added == 2
    out, _, _ = densify_step(m, np.zeros((10, 1)), scores, TrainConfig(), max_new=2)
    assert np.allclose(out.positions[10], m.positions[m.triangles[0]].mean(axis=0))
    assert np.allclose(out.positions[11], m.positions[m.triangles[1]].mean(axis=0))


# -- fitting -----------------------------------------------------------------------------

SMALL = dict(batch_pixels=1024, n_init=40, densify=False, refine_iters=0, log_every=50, lr_mlp=1e-3)


def test_constant_image_fit():
    img = testimages.constant(32, 32)
    cfg = TrainConfig(iters=500, **SMALL)
    res = fit_image(img, cfg)
    assert fit_psnr(res, img) > 60.0
    # smoothed loss is non-increasing on this smoke test
    losses = np.array([r["loss"] for r in res.log])
    assert losses[-1] <= losses[0] + 1e-12


def test_ramp_fit():
    img = testimages.ramp(64, 64)
    cfg = TrainConfig(iters=2000, batch_pixels=4096, n_init=64, densify=False, refine_iters=200,
                      log_every=500, lr_mlp=1e-3, lr_features=1e-2)
    res = fit_image(img, cfg)
    assert fit_psnr(res, img) > 45.0


def test_log_records_and_json(tmp_path):
    img = testimages.sharp_edge(32, 24)
    path = tmp_path / "log.jsonl"
    with open(path, "w") as fh:
        res = fit_image(img, TrainConfig(iters=60, log_every=20, **{k: v for k, v in SMALL.items()
                                                                   if k != "log_every"}),
                        log_fn=json_logger(fh))
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["step"] for r in rows] == [20, 40, 60]
    assert set(rows[0]) >= {"step", "loss", "lr", "n_vertices", "psnr_holdout"}
    assert rows == json.loads(json.dumps(res.log))


def test_vertex_count_monotone_with_densify():
    img = testimages.sharp_edge(48, 48)
    cfg = TrainConfig(iters=120, batch_pixels=2048, n_init=40, densify=True, densify_start=20, densify_end=100,
                      densify_every=20, refine_iters=10, log_every=10, lr_mlp=1e-3)
    res = fit_image(img, cfg)
    counts = [r["n_vertices"] for r in res.log]
    assert counts == sorted(counts) and counts[-1] > counts[0]
    for a, b in zip(counts, counts[1:]):
        assert b <= a + math.floor(0.35 * a)
    assert is_valid(res.model.mesh)


def test_max_vertices_respected():
    img = testimages.sharp_edge(48, 48)
    cfg = TrainConfig(iters=100, batch_pixels=2048, n_init=40, densify_start=10, densify_end=90,
                      densify_every=10, max_vertices=60, refine_iters=0, log_every=0)
    assert fit_image(img, cfg).model.mesh.n_vertices <= 60


def test_determinism_single_thread():
    img = testimages.sharp_edge(32, 32)
    cfg = TrainConfig(iters=80, batch_pixels=1024, n_init=30, densify_start=20, densify_end=60,
                      densify_every=20, refine_iters=10, log_every=0, lr_positions=1e-3)
    a = fit_image(img, cfg, threads=1)
    b = fit_image(img, cfg, threads=1)
    assert a.final_loss == b.final_loss
    assert np.array_equal(a.model.features, b.model.features)
    assert np.array_equal(a.model.mesh.positions, b.model.mesh.positions)


def test_boundary_stays_covered():
    img = testimages.sharp_edge(40, 30)
    cfg = TrainConfig(iters=100, batch_pixels=1024, n_init=40, densify=False, refine_iters=0, log_every=0,
                      lr_positions=5e-2)
    res = fit_image(img, cfg)
    m = res.model.mesh
    assert is_valid(m)
    corners = {(0.0, 0.0), (40.0, 0.0), (40.0, 30.0), (0.0, 30.0)}
    assert corners <= {tuple(p) for p in m.positions}


def test_splat_fit_improves():
    img = testimages.sharp_edge(24, 20)
    cfg = TrainConfig(iters=40, n_splats=24, refine_iters=10, log_every=10)
    res = fit_splats(img, cfg)
    psnrs = [r["psnr"] for r in res.log]
    assert psnrs[-1] > psnrs[0]
    assert len(res.splats) == 24


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5000), st.integers(1, 40), st.integers(1, 40))
def test_strata_cover_any_size(n, w, h):
    pts = stratified_points(np.random.default_rng(n), w, h, n)
    assert len(pts) == n
    assert pts[:, 0].min() >= 0 and pts[:, 0].max() < w
    assert pts[:, 1].min() >= 0 and pts[:, 1].max() < h
