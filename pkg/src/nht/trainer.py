"""Image fitting: stratified sampling, mu-law MSE, Adam, densification.

``fit_image`` trains the mesh model; ``fit_splats`` trains the 2D splat
compositor with the L1 + D-SSIM + opacity/scale regularized loss and a final
appearance-only refinement phase.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import harmonic, metrics
from .imageio import HdrImage, MuLawParams, mulaw_encode, mulaw_encode_clamped, mulaw_derivative
from .mesh import (Mesh, init_edge_aware, locate, pixel_centers, retile, suggest_tile_size,
                   triangulate, validate_or_remesh, with_positions)
from .model import MeshModel, backward, codes_to_image, forward, render_codes
from .nn import Adam, Ema, init_mlp, lr_at, params_from_arrays, resize_moments
from .splat2d import SH_DIM, SplatSet, deferred_backward, deferred_codes, pinhole_directions

log = logging.getLogger(__name__)

# interior vertices are kept this far (relative to max(W, H)) from the border
INTERIOR_MARGIN = 1e-6


@dataclass
class TrainConfig:
    iters: int = 25000
    batch_pixels: int = 160000
    lr_positions: float = 1e-4
    lr_features: float = 5e-3
    lr_mlp: float = 5e-5
    schedule: str = "exp2d"
    densify_start: int = 1500
    densify_end: int = 15000
    densify_every: int = 500
    densify_growth: float = 0.35
    score_exponent: float = 0.75
    min_pixels: int = 3
    score_stride: int = 1
    densify: bool = True
    mu: float = 5000.0
    white_level: float = 16383.0
    seed: int = 0
    refine_iters: int = 3000
    lambda_dssim: float = 0.1
    lambda_alpha: float = 0.02
    lambda_scale: float = 0.005
    ema_gamma: float = 0.95
    # representation
    n_init: int = 256
    init_floor: float = 0.05
    max_vertices: int = 0          # 0 = unlimited
    n_features: int = 8
    hidden_width: int = 64
    hidden_layers: int = 2
    scheme: str = "ct_split"
    encoding: str = "sincos"
    feature_init_std: float = 0.5
    freeze_positions: bool = False
    detach_gradient_positions: bool = False
    # splat mode
    n_splats: int = 256
    lr_means: float = 1.6e-4
    lr_scales: float = 5e-3
    lr_opacities: float = 5e-2
    lr_rotations: float = 1e-3
    lr_splat_features: float = 1.5e-2
    lr_splat_mlp: float = 6.8e-4
    sh_scale: float = 1.0
    # bookkeeping
    log_every: int = 100
    zero_head: bool = True
    holdout_samples: int = 4096

    def validate(self):
        if self.iters <= 0 or self.batch_pixels <= 0:
            raise ValueError("iters and batch_pixels must be positive")
        if not self.densify_start <= self.densify_end:
            raise ValueError("densify_start must not exceed densify_end")
        for name in ("lr_positions", "lr_features", "lr_mlp", "mu", "white_level"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.densify_growth <= 1.0:
            raise ValueError("densify_growth must lie in [0, 1]")
        if not 0 <= self.refine_iters <= self.iters:
            raise ValueError("refine_iters must lie in [0, iters]")
        return self

    @property
    def mulaw(self):
        return MuLawParams(self.mu, self.white_level)


class ConfigError(ValueError):
    pass


def _coerce(name, raw, typ):
    try:
        if typ is bool:
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def config_types():
    hints = {"int": int, "float": float, "str": str, "bool": bool}
    return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in dataclasses.fields(TrainConfig)}


def parse_overrides(pairs, base=None) -> TrainConfig:
    """Apply ``key=value`` strings to a config."""
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    types = config_types()
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, val = (t.strip() for t in pair.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, val, types[key]))
    return cfg


def load_config(path, overrides=()) -> TrainConfig:
    lines = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                lines.append(line)
    cfg = parse_overrides(lines)
    return parse_overrides(overrides, cfg).validate()


def write_config(path, cfg: TrainConfig):
    with open(path, "w") as fh:
        for f in dataclasses.fields(cfg):
            fh.write(f"{f.name}={getattr(cfg, f.name)}\n")


# -- sampling and losses -------------------------------------------------------------------

def bilinear(img, points):
    """Bilinear lookup with pixel centers at half-integers, clamped at borders."""
    h, w = img.shape[:2]
    u = points[:, 0] - 0.5
    v = points[:, 1] - 0.5
    x0 = np.clip(np.floor(u).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(u - x0, 0.0, 1.0)[:, None]
    fy = np.clip(v - y0, 0.0, 1.0)[:, None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def stratified_points(rng, width, height, n):
    """ceil(sqrt(n))^2 jittered strata over the image, truncated to n at random."""
    g = int(math.ceil(math.sqrt(n)))
    cells = rng.permutation(g * g)[:n]
    cy, cx = np.divmod(cells, g)
    jit = rng.random((n, 2))
    x = (cx + jit[:, 0]) * (width / g)
    y = (cy + jit[:, 1]) * (height / g)
    return np.stack([np.minimum(x, np.nextafter(width, 0)), np.minimum(y, np.nextafter(height, 0))], axis=1)


def sample_batch(rng, image, n):
    """Stratified sub-pixel positions and bilinear ground truth at them."""
    data = image.data if isinstance(image, HdrImage) else np.asarray(image)
    h, w = data.shape[:2]
    pts = stratified_points(rng, w, h, n)
    return pts, bilinear(data, pts)


def loss_mulaw_mse(pred, gt, p: MuLawParams = MuLawParams(), pred_encoded=False):
    """mean((mulaw(pred) - mulaw(gt))^2) and its gradient w.r.t. ``pred``.

    Linear predictions are clamped into [0, w] (gradient zero where clamped).
    With ``pred_encoded`` the prediction already is a mu-law code.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = mulaw_encode_clamped(gt, p)[0]
    if pred_encoded:
        enc, dpdx = pred, np.ones_like(pred)
    else:
        enc, flag = mulaw_encode_clamped(pred, p)
        dpdx = np.where(flag, 0.0, mulaw_derivative(np.clip(pred, 0, p.w), p))
    r = enc - target
    loss = float(np.mean(r * r))
    return loss, 2.0 * r * dpdx / r.size


def loss_splat(pred_img, gt_img, splats, lam=0.1, lam_alpha=0.02, lam_scale=0.005):
    """(1 - lam) L1 + lam D-SSIM + lam_alpha mean(opacity) + lam_scale mean(|s|_1).

    ``splats`` is anything with ``opacities`` (P,) and ``scales`` (P, 2).
    Returns (loss, terms, grads) with grads for pred_img, opacities, scales.
    """
    opacities, scales = splats.opacities, splats.scales
    pred_img = np.asarray(pred_img, dtype=np.float64)
    gt_img = np.asarray(gt_img, dtype=np.float64)
    if pred_img.shape != gt_img.shape:
        raise ValueError("image shapes differ")
    diff = pred_img - gt_img
    l1 = float(np.mean(np.abs(diff)))
    smap = metrics.ssim_map(pred_img, gt_img, return_channels=True)
    d_ssim = (1.0 - float(smap.mean())) / 2.0
    opacities = np.asarray(opacities, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    n = max(len(opacities), 1)
    r_alpha = float(opacities.sum() / n)
    r_scale = float(np.abs(scales).sum() / n)
    loss = (1 - lam) * l1 + lam * d_ssim + lam_alpha * r_alpha + lam_scale * r_scale
    dpred = (1 - lam) * np.sign(diff) / diff.size
    if lam:
        dpred = dpred + lam * metrics.ssim_backward(pred_img, gt_img, np.full(smap.shape, -0.5 / smap.size))
    grads = {
        "pred": dpred,
        "opacities": np.full(opacities.shape, lam_alpha / n),
        "scales": lam_scale * np.sign(scales) / n,
    }
    terms = {"l1": l1, "dssim": d_ssim, "r_alpha": r_alpha, "r_scale": r_scale}
    return loss, terms, grads


# -- densification ------------------------------------------------------------------------

def score_triangles(mesh: Mesh, pred, gt, cfg: TrainConfig, tri_map=None, stride=1):
    """Mean per-pixel DSSIM inside each triangle times pixel_count ** exponent.

    ``pred``/``gt`` are [0,1] images sampled at pixel centers with ``stride``.
    Triangles with fewer than ``min_pixels`` pixels score -inf.
    """
    dmap = metrics.dssim_map(pred, gt)
    if tri_map is None:
        tri_map = locate(mesh, pixel_centers(int(mesh.width), int(mesh.height), stride))[0]
    tri_map = np.asarray(tri_map).ravel()
    counts = np.bincount(tri_map, minlength=mesh.n_triangles).astype(np.float64) * stride * stride
    sums = np.bincount(tri_map, weights=dmap.ravel(), minlength=mesh.n_triangles) * stride * stride
    scores = np.full(mesh.n_triangles, -np.inf)
    ok = counts >= cfg.min_pixels
    scores[ok] = sums[ok] / counts[ok] * counts[ok] ** cfg.score_exponent
    return scores


def densify_step(mesh: Mesh, features, scores, cfg: TrainConfig, max_new=None):
    """Insert centroid vertices into the top-scoring triangles.

    At most floor(growth * V) (and ``max_new``) triangles with positive
    finite score are split; ties go to the lower triangle id. New features
    are the mean of the parent vertices. Returns (mesh, features, n_added).
    """
    V = mesh.n_vertices
    cap = int(math.floor(cfg.densify_growth * V))
    if max_new is not None:
        cap = min(cap, max_new)
    eligible = np.flatnonzero(np.isfinite(scores) & (scores > 0))
    if cap <= 0 or len(eligible) == 0:
        return mesh, features, 0
    order = eligible[np.lexsort((eligible, -scores[eligible]))]
    chosen = np.sort(order[:cap])
    tv = mesh.triangles[chosen]
    new_pos = mesh.positions[tv].mean(axis=1)
    new_feat = features[tv].mean(axis=1)
    positions = np.vstack([mesh.positions, new_pos])
    features = np.vstack([features, new_feat])
    tile = suggest_tile_size(mesh.width, mesh.height, 2 * len(positions))
    out = validate_or_remesh(triangulate(positions, mesh.width, mesh.height, tile))
    if out.n_vertices != len(features):
        raise RuntimeError("remeshing changed the vertex count")
    return out, features, len(chosen)


# -- mesh fitting -------------------------------------------------------------------------

@dataclass
class FitResult:
    model: MeshModel
    log: list = field(default_factory=list)
    final_loss: float = float("nan")
    seconds: float = 0.0


class TrainingDiverged(RuntimeError):
    pass


def _thread_limit(threads=None):
    from threadpoolctl import threadpool_limits
    if threads is None:
        env = os.environ.get("NHT_THREADS")
        threads = int(env) if env else None
    return threadpool_limits(limits=threads) if threads else _NullCtx()


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def mlp_dims(cfg: TrainConfig, extra=0):
    width = harmonic.encoded_width(cfg.n_features, cfg.encoding) + extra
    return [width] + [cfg.hidden_width] * cfg.hidden_layers + [3]


def init_model(img: HdrImage, cfg: TrainConfig, rng) -> MeshModel:
    mesh = init_edge_aware(img, cfg.n_init, cfg.init_floor, seed=cfg.seed)
    mesh = retile(mesh, suggest_tile_size(mesh.width, mesh.height, mesh.n_triangles))
    feats = rng.normal(0.0, cfg.feature_init_std, size=(mesh.n_vertices, cfg.n_features))
    mlp = init_mlp(mlp_dims(cfg), rng, dtype=np.float32)
    # start the head at the mean code so early steps fit detail, not the offset
    codes = mulaw_encode(np.clip(img.data, 0, cfg.white_level), cfg.mulaw)
    mlp.biases[-1][:] = codes.reshape(-1, 3).mean(axis=0)
    if cfg.zero_head:
        mlp.weights[-1][:] = 0.0
    return MeshModel(mesh, feats, mlp, cfg.scheme, cfg.encoding, cfg.white_level, cfg.mu, np.float32)


def _project_boundary(grad, mesh: Mesh):
    pos = mesh.positions
    on_x = (pos[:, 0] == 0) | (pos[:, 0] == mesh.width)
    on_y = (pos[:, 1] == 0) | (pos[:, 1] == mesh.height)
    grad[on_x, 0] = 0.0
    grad[on_y, 1] = 0.0
    return grad


def fit_image(img: HdrImage, cfg: TrainConfig, log_fn=None, model: MeshModel | None = None,
              threads=None) -> FitResult:
    """Train a mesh model on one image. Deterministic for a fixed seed."""
    cfg.validate()
    with _thread_limit(threads):
        return _fit_image(img, cfg, log_fn, model)


def _fit_image(img, cfg, log_fn, model):
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    p = cfg.mulaw
    if model is None:
        model = init_model(img, cfg, rng)
    width, height = img.width, img.height
    scale = float(max(width, height))
    gt_codes = mulaw_encode(np.clip(img.data, 0, p.w), p)
    hold_pts = stratified_points(np.random.default_rng(cfg.seed + 1), width, height, cfg.holdout_samples)
    hold_gt = mulaw_encode_clamped(bilinear(img.data, hold_pts), p)[0]

    mlp_arrays = model.mlp.arrays()
    opt_pos, opt_feat, opt_mlp = Adam(), Adam(), Adam()
    ema = Ema(cfg.ema_gamma)
    ema.update(mlp_arrays)
    refine_start = cfg.iters - cfg.refine_iters
    records = []
    loss_val = float("nan")
    max_v = cfg.max_vertices or None

    for t in range(cfg.iters):
        refining = t >= refine_start
        if t == refine_start and not cfg.freeze_positions:
            # final Delaunay topology for the position-frozen refinement phase
            model.mesh = validate_or_remesh(triangulate(model.mesh.positions, width, height,
                                                        model.mesh.tiles.tile_size))
        pts, gt = sample_batch(rng, img, min(cfg.batch_pixels, width * height * 4))
        out, cache = forward(model, pts)
        loss_val, dout = loss_mulaw_mse(out.astype(np.float64), gt, p, pred_encoded=True)
        if not math.isfinite(loss_val):
            raise TrainingDiverged(_dump(model, t, loss_val))
        dfeat, dpos, mgrads = backward(model, cache, dout, cfg.detach_gradient_positions)

        lr_scale = lr_at(cfg.schedule, t, 1.0, total=cfg.iters)
        opt_feat.step([model.features], [dfeat], cfg.lr_features * lr_scale)
        flat = []
        for gw, gb in mgrads:
            flat += [gw, gb]
        opt_mlp.step(mlp_arrays, flat, cfg.lr_mlp * lr_scale)
        model.mlp.revision += 1
        ema.update(mlp_arrays)
        if not (refining or cfg.freeze_positions):
            g = _project_boundary(dpos * scale, model.mesh)
            norm_pos = model.mesh.positions / scale
            opt_pos.step([norm_pos], [g], cfg.lr_positions * lr_scale)
            newp = norm_pos * scale
            # interior vertices stay strictly inside; boundary vertices keep
            # their exact edge coordinate
            margin = INTERIOR_MARGIN * scale
            newp[:, 0] = np.clip(newp[:, 0], margin, width - margin)
            newp[:, 1] = np.clip(newp[:, 1], margin, height - margin)
            b = model.mesh.positions
            for axis, lim in ((0, width), (1, height)):
                for v in (0.0, lim):
                    on = b[:, axis] == v
                    newp[on, axis] = v
            model.mesh = validate_or_remesh(with_positions(model.mesh, newp), seed=cfg.seed + t)

        step = t + 1
        if (cfg.densify and cfg.densify_start <= step <= cfg.densify_end
                and (step - cfg.densify_start) % cfg.densify_every == 0 and step < refine_start):
            budget = None if max_v is None else max(0, max_v - model.mesh.n_vertices)
        else:
            budget = 0
        if budget != 0:
            shadow = params_from_arrays(model.mlp, ema.shadow)
            codes, tri_map = render_codes(model, mlp=shadow, stride=cfg.score_stride)
            gt_s = gt_codes[::cfg.score_stride, ::cfg.score_stride]
            scores = score_triangles(model.mesh, np.clip(codes, 0, 1), gt_s, cfg, tri_map, cfg.score_stride)
            mesh2, feats2, added = densify_step(model.mesh, model.features, scores, cfg, budget)
            if added:
                model.mesh, model.features = mesh2, feats2
                resize_moments(opt_feat, 0, mesh2.n_vertices)
                resize_moments(opt_pos, 0, mesh2.n_vertices)

        if (cfg.log_every and step % cfg.log_every == 0) or step == cfg.iters:
            shadow = params_from_arrays(model.mlp, ema.shadow)
            hold, _ = forward(model, hold_pts, mlp=shadow)
            mse = float(np.mean((hold.astype(np.float64) - hold_gt) ** 2))
            rec = {"step": step, "loss": loss_val, "lr": cfg.lr_features * lr_scale,
                   "n_vertices": model.mesh.n_vertices, "psnr_holdout": float(metrics.psnr_from_mse(mse)),
                   "seconds": round(time.perf_counter() - t0, 3)}
            records.append(rec)
            if log_fn is not None:
                log_fn(rec)

    if cfg.refine_iters == 0 and not cfg.freeze_positions:
        # the stored model is defined by its Delaunay triangulation
        model.mesh = validate_or_remesh(triangulate(model.mesh.positions, width, height,
                                                    model.mesh.tiles.tile_size))
    model.mlp = params_from_arrays(model.mlp, ema.shadow)
    return FitResult(model, records, loss_val, time.perf_counter() - t0)


def _dump(model, step, loss):
    import tempfile
    fd, path = tempfile.mkstemp(prefix="nht-diverged-", suffix=".npz")
    os.close(fd)
    np.savez(path, positions=model.mesh.positions, triangles=model.mesh.triangles,
             features=model.features, step=step)
    return f"non-finite loss {loss} at step {step}; state dumped to {path}"


def fit_psnr(result: FitResult, img: HdrImage):
    from .model import render
    return metrics.psnr(render(result.model), img, "mulaw")


# -- splat fitting ------------------------------------------------------------------------

@dataclass
class SplatFitResult:
    splats: SplatSet
    mlp: object
    width: int
    height: int
    sh_scale: float
    log: list = field(default_factory=list)
    final_loss: float = float("nan")


@dataclass
class _Reg:
    opacities: np.ndarray
    scales: np.ndarray    # normalized by max(width, height)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def init_splats(img: HdrImage, cfg: TrainConfig, rng) -> SplatSet:
    from .mesh import sobel_magnitude
    h, w = img.height, img.width
    lum = metrics.to_space(img, "tonemapped").mean(axis=2)
    prob = sobel_magnitude(lum).ravel()
    prob = 0.5 * prob / max(prob.sum(), 1e-300) + 0.5 / prob.size
    prob /= prob.sum()
    cells = rng.choice(prob.size, size=cfg.n_splats, p=prob)
    cy, cx = np.divmod(cells, w)
    means = np.stack([cx + rng.random(cfg.n_splats), cy + rng.random(cfg.n_splats)], axis=1)
    s0 = math.sqrt(w * h / cfg.n_splats)
    return SplatSet(
        means=means,
        thetas=rng.uniform(-math.pi, math.pi, cfg.n_splats),
        scales=np.full((cfg.n_splats, 2), s0),
        opacities=np.full(cfg.n_splats, 0.5),
        features=rng.normal(0.0, cfg.feature_init_std, (cfg.n_splats, 3, cfg.n_features)),
        z=rng.permutation(cfg.n_splats).astype(np.float64),
    ).sorted()


def fit_splats(img: HdrImage, cfg: TrainConfig, log_fn=None, threads=None) -> SplatFitResult:
    cfg.validate()
    with _thread_limit(threads):
        return _fit_splats(img, cfg, log_fn)


def _fit_splats(img, cfg, log_fn):
    rng = np.random.default_rng(cfg.seed)
    p = cfg.mulaw
    h, w = img.height, img.width
    norm = float(max(w, h))
    gt = mulaw_encode(np.clip(img.data, 0, p.w), p)
    ss = init_splats(img, cfg, rng)
    # optimized parameterization
    means_n = ss.means / norm
    log_s = np.log(ss.scales / norm)
    logit = np.log(ss.opacities / (1 - ss.opacities))
    thetas = ss.thetas.copy()
    feats = ss.features.copy()
    dims = [2 * cfg.n_features + SH_DIM] + [cfg.hidden_width] * cfg.hidden_layers + [3]
    mlp = init_mlp(dims, rng)
    mlp_arrays = mlp.arrays()
    opts = {k: Adam() for k in ("means", "scales", "opacities", "thetas", "features", "mlp")}
    ema = Ema(cfg.ema_gamma)
    ema.update(mlp_arrays)
    dirs = pinhole_directions(w, h)
    refine_start = cfg.iters - cfg.refine_iters
    records = []
    loss = float("nan")
    for t in range(cfg.iters):
        refining = t >= refine_start
        cur = SplatSet(means_n * norm, thetas, np.exp(log_s) * norm, _sigmoid(logit), feats, ss.z)
        codes, cache = deferred_codes(cur, mlp, w, h, cfg.sh_scale, directions=dirs)
        lam_a = 0.0 if refining else cfg.lambda_alpha
        lam_s = 0.0 if refining else cfg.lambda_scale
        loss, terms, g = loss_splat(codes, gt, _Reg(cur.opacities, np.exp(log_s)),
                                  cfg.lambda_dssim, lam_a, lam_s)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite splat loss at step {t}")
        sg, mgrads = deferred_backward(cur, mlp, cache, g["pred"])
        cos_f = lr_at("cosine", t, 1.0, total=cfg.iters)
        exp_f = lr_at("exp3d", t, 1.0, total=cfg.iters)
        opts["features"].step([feats], [sg["features"]], cfg.lr_splat_features * cos_f)
        flat = []
        for gw, gb in mgrads:
            flat += [gw, gb]
        opts["mlp"].step(mlp_arrays, flat, cfg.lr_splat_mlp * cos_f)
        mlp.revision += 1
        ema.update(mlp_arrays)
        if not refining:
            op = cur.opacities
            opts["means"].step([means_n], [sg["means"] * norm], cfg.lr_means * exp_f)
            opts["scales"].step([log_s], [sg["scales"] * cur.scales + g["scales"] * np.exp(log_s)],
                                cfg.lr_scales)
            opts["opacities"].step([logit], [(sg["opacities"] + g["opacities"]) * op * (1 - op)],
                                   cfg.lr_opacities)
            opts["thetas"].step([thetas], [sg["thetas"]], cfg.lr_rotations)
            np.clip(means_n, 0.0, np.array([w, h]) / norm, out=means_n)
        step = t + 1
        if (cfg.log_every and step % cfg.log_every == 0) or step == cfg.iters:
            rec = {"step": step, "loss": loss, **terms, "n_splats": len(ss),
                   "psnr": metrics.psnr_from_mse(float(np.mean((codes - gt) ** 2)))}
            records.append(rec)
            if log_fn is not None:
                log_fn(rec)
    final = SplatSet(means_n * norm, thetas, np.exp(log_s) * norm, _sigmoid(logit), feats, ss.z)
    shadow = params_from_arrays(mlp, ema.shadow)
    return SplatFitResult(final, shadow, w, h, cfg.sh_scale, records, loss)


def json_logger(fh):
    def _write(rec):
        fh.write(json.dumps(rec) + "\n")
        fh.flush()
    return _write
