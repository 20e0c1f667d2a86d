"""Delaunay mesh over the image rectangle with tile-accelerated point location.

Vertex positions are in pixel units; the mesh always covers
[0, width] x [0, height]. Pixel centers sit at half-integer coordinates.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import Delaunay, QhullError

EPS_AREA = 1e-6
EPS_CIRC = 1e-9
EPS_BARY = 1e-7
TILE_SIZE = 16
SOBEL_MAX_DIM = 512


class MeshError(ValueError):
    pass


@dataclass
class TileGrid:
    tile_size: int
    nx: int
    ny: int
    ptr: np.ndarray        # (nx*ny + 1,) CSR offsets
    tris: np.ndarray       # candidate triangle ids, ascending per tile
    padded: np.ndarray     # (nx*ny, max_candidates), -1 filled


@dataclass
class Mesh:
    positions: np.ndarray
    triangles: np.ndarray
    width: float
    height: float
    ring_ptr: np.ndarray = field(repr=False)
    ring_idx: np.ndarray = field(repr=False)
    boundary: np.ndarray = field(repr=False)
    tiles: TileGrid = field(repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def one_ring(self, v: int) -> np.ndarray:
        return self.ring_idx[self.ring_ptr[v]:self.ring_ptr[v + 1]]

    def directed_edges(self):
        """(center, neighbor) pairs, one per one-ring entry."""
        counts = np.diff(self.ring_ptr)
        return np.repeat(np.arange(self.n_vertices), counts), self.ring_idx

    def corner_mask(self) -> np.ndarray:
        x, y = self.positions[:, 0], self.positions[:, 1]
        on_x = (x == 0) | (x == self.width)
        on_y = (y == 0) | (y == self.height)
        return on_x & on_y


def signed_areas(positions, triangles):
    a = positions[triangles[:, 0]]
    b = positions[triangles[:, 1]]
    c = positions[triangles[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                  - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def boundary_mask(positions, width, height):
    x, y = positions[:, 0], positions[:, 1]
    return (x == 0) | (x == width) | (y == 0) | (y == height)


def _one_ring(n_vertices, triangles):
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.concatenate([e, e[:, ::-1]])
    # unique (center, neighbor) pairs via a scalar key, sorted by center then neighbor
    key = np.unique(e[:, 0] * np.int64(n_vertices) + e[:, 1])
    center, neighbor = np.divmod(key, n_vertices)
    counts = np.bincount(center, minlength=n_vertices)
    ptr = np.concatenate([[0], np.cumsum(counts)])
    return ptr, neighbor


def build_tile_grid(positions, triangles, width, height, tile_size=TILE_SIZE) -> TileGrid:
    nx = max(1, int(np.ceil(width / tile_size)))
    ny = max(1, int(np.ceil(height / tile_size)))
    pts = positions[triangles]
    lo = pts.min(axis=1) - 1e-6
    hi = pts.max(axis=1) + 1e-6
    tx0 = np.clip(np.floor(lo[:, 0] / tile_size), 0, nx - 1).astype(np.int64)
    tx1 = np.clip(np.floor(hi[:, 0] / tile_size), 0, nx - 1).astype(np.int64)
    ty0 = np.clip(np.floor(lo[:, 1] / tile_size), 0, ny - 1).astype(np.int64)
    ty1 = np.clip(np.floor(hi[:, 1] / tile_size), 0, ny - 1).astype(np.int64)
    wx = tx1 - tx0 + 1
    wy = ty1 - ty0 + 1
    counts = wx * wy
    tri = np.repeat(np.arange(len(triangles)), counts)
    # local index within each triangle's tile rectangle
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(counts.sum()) - start
    lx = local % wx[tri]
    ly = local // wx[tri]
    tile = (ty0[tri] + ly) * nx + (tx0[tri] + lx)
    order = np.lexsort((tri, tile))
    tile, tri = tile[order], tri[order]
    per_tile = np.bincount(tile, minlength=nx * ny)
    ptr = np.concatenate([[0], np.cumsum(per_tile)])
    m = max(1, int(per_tile.max()))
    padded = np.full((nx * ny, m), -1, dtype=np.int64)
    col = np.arange(len(tile)) - ptr[tile]
    padded[tile, col] = tri
    return TileGrid(tile_size, nx, ny, ptr, tri, padded)


def triangulate(positions, width, height, tile_size=TILE_SIZE) -> Mesh:
    """Delaunay-triangulate the vertex set and rebuild adjacency and tiles."""
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) < 3:
        raise MeshError("need at least 3 points")
    try:
        tri = Delaunay(positions)
    except QhullError as exc:
        raise MeshError(f"degenerate point set: {exc}") from None
    triangles = tri.simplices.astype(np.int64)
    if len(triangles) == 0:
        raise MeshError("all points collinear")
    # orient counter-clockwise
    flip = signed_areas(positions, triangles) < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    return _assemble(positions, triangles, width, height, tile_size)


def _assemble(positions, triangles, width, height, tile_size=TILE_SIZE) -> Mesh:
    ptr, idx = _one_ring(len(positions), triangles)
    return Mesh(
        positions=positions,
        triangles=triangles,
        width=float(width),
        height=float(height),
        ring_ptr=ptr,
        ring_idx=idx,
        boundary=boundary_mask(positions, width, height),
        tiles=build_tile_grid(positions, triangles, width, height, tile_size),
    )


def with_positions(mesh: Mesh, positions) -> Mesh:
    """Same topology, moved vertices; adjacency reused, tiles rebuilt."""
    positions = np.asarray(positions, dtype=np.float64)
    return Mesh(
        positions=positions,
        triangles=mesh.triangles,
        width=mesh.width,
        height=mesh.height,
        ring_ptr=mesh.ring_ptr,
        ring_idx=mesh.ring_idx,
        boundary=boundary_mask(positions, mesh.width, mesh.height),
        tiles=build_tile_grid(positions, mesh.triangles, mesh.width, mesh.height, mesh.tiles.tile_size),
    )


def suggest_tile_size(width, height, n_triangles, target=2.0, lo=4, hi=TILE_SIZE):
    """Tile edge giving roughly ``target`` triangles per tile."""
    side = np.sqrt(target * width * height / max(n_triangles, 1))
    return int(np.clip(np.round(side), lo, hi))


def retile(mesh: Mesh, tile_size) -> Mesh:
    """Same mesh with a tile grid of a different tile size."""
    if tile_size == mesh.tiles.tile_size:
        return mesh
    return dataclasses.replace(mesh, tiles=build_tile_grid(mesh.positions, mesh.triangles, mesh.width,
                                                           mesh.height, tile_size))


# -- initialization ----------------------------------------------------------

def boundary_points(width, height, n_init):
    """Corners plus evenly spaced border vertices at half the interior density."""
    spacing = 2.0 * np.sqrt(width * height / n_init)
    mx = max(0, int(round(width / spacing)) - 1)
    my = max(0, int(round(height / spacing)) - 1)
    pts = [(0.0, 0.0), (width, 0.0), (width, height), (0.0, height)]
    for x in np.linspace(0, width, mx + 2)[1:-1]:
        pts += [(x, 0.0), (x, height)]
    for y in np.linspace(0, height, my + 2)[1:-1]:
        pts += [(0.0, y), (width, y)]
    return np.array(pts, dtype=np.float64)


def sobel_magnitude(display):
    """Sobel gradient magnitude of a 2-D luminance array."""
    gx = ndimage.sobel(display, axis=1, mode="nearest")
    gy = ndimage.sobel(display, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def init_edge_aware(img, n_init, floor=0.05, seed=0, max_dim=SOBEL_MAX_DIM) -> Mesh:
    """Sample vertices with probability proportional to Sobel magnitude plus a
    uniform floor, on a downsampled tonemapped copy of the image."""
    from .imageio import tonemap

    if n_init < 4:
        raise MeshError("n_init must be >= 4")
    if not 0.0 <= floor <= 1.0:
        raise MeshError("floor must lie in [0, 1]")
    h, w = img.data.shape[:2]
    border = boundary_points(w, h, n_init)
    n_interior = n_init - len(border)
    if n_interior < 0:
        raise MeshError(f"n_init={n_init} is smaller than the {len(border)} required boundary vertices")

    rng = np.random.default_rng(seed)
    pts = border
    if n_interior > 0:
        lum = tonemap(img).mean(axis=2)
        factor = max(1, int(np.ceil(max(h, w) / max_dim)))
        if factor > 1:
            hh, ww = h // factor, w // factor
            lum = lum[:hh * factor, :ww * factor].reshape(hh, factor, ww, factor).mean(axis=(1, 3))
        mag = sobel_magnitude(lum).ravel()
        n_cells = mag.size
        total = mag.sum()
        if total > 0:
            prob = (1.0 - floor) * mag / total + floor / n_cells
        else:
            prob = np.full(n_cells, 1.0 / n_cells)
        prob /= prob.sum()
        replace = n_interior > np.count_nonzero(prob)
        cells = rng.choice(n_cells, size=n_interior, replace=replace, p=prob)
        cy, cx = np.divmod(cells, lum.shape[1])
        sx = w / lum.shape[1]
        sy = h / lum.shape[0]
        jitter = rng.uniform(0.0, 1.0, size=(n_interior, 2))
        xy = np.stack([(cx + jitter[:, 0]) * sx, (cy + jitter[:, 1]) * sy], axis=1)
        margin = 1e-3 * min(w, h)
        xy[:, 0] = np.clip(xy[:, 0], margin, w - margin)
        xy[:, 1] = np.clip(xy[:, 1], margin, h - margin)
        pts = np.vstack([border, xy])
    pts = _dedupe(pts, w, h, rng)
    return triangulate(pts, w, h)


def _dedupe(pts, width, height, rng):
    """Nudge exactly repeated points so qhull keeps every vertex; the first
    copy stays put."""
    pts = pts.copy()
    for _ in range(10):
        _, first, counts = np.unique(pts, axis=0, return_index=True, return_counts=True)
        if np.all(counts == 1):
            break
        keep = np.zeros(len(pts), bool)
        keep[first] = True
        dup = ~keep
        # a duplicated interior point is nudged anywhere; one sitting on the
        # border is pushed inward so the clip below cannot undo the move
        step = rng.uniform(-1e-3, 1e-3, size=(dup.sum(), 2))
        on_edge = boundary_mask(pts[dup], width, height)
        inward = np.sign(np.array([width, height]) / 2 - pts[dup])
        step[on_edge] = np.abs(step[on_edge]) * inward[on_edge]
        pts[dup] += step
        pts[:, 0] = np.clip(pts[:, 0], 0, width)
        pts[:, 1] = np.clip(pts[:, 1], 0, height)
    return pts


# -- point location ----------------------------------------------------------

def barycentric_batch(points, a, b, c):
    """Barycentric coordinates of points w.r.t. triangles (a, b, c), broadcast."""
    area = (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])
    px, py = points[..., 0], points[..., 1]
    w0 = (b[..., 0] - px) * (c[..., 1] - py) - (b[..., 1] - py) * (c[..., 0] - px)
    w1 = (c[..., 0] - px) * (a[..., 1] - py) - (c[..., 1] - py) * (a[..., 0] - px)
    w0 = w0 / area
    w1 = w1 / area
    return np.stack([w0, w1, 1.0 - w0 - w1], axis=-1)


def locate(mesh: Mesh, points, use_tiles=True, chunk=65536):
    """Triangle id and barycentrics for each point (lowest containing id wins)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if np.any(points[:, 0] < 0) or np.any(points[:, 0] > mesh.width) \
            or np.any(points[:, 1] < 0) or np.any(points[:, 1] > mesh.height):
        raise MeshError("query point outside the image rectangle")
    n = len(points)
    tri_out = np.empty(n, dtype=np.int64)
    bary_out = np.empty((n, 3))
    pos, tris = mesh.positions, mesh.triangles
    for s in range(0, n, chunk):
        p = points[s:s + chunk]
        if use_tiles:
            g = mesh.tiles
            tx = np.clip((p[:, 0] // g.tile_size).astype(np.int64), 0, g.nx - 1)
            ty = np.clip((p[:, 1] // g.tile_size).astype(np.int64), 0, g.ny - 1)
            cand = g.padded[ty * g.nx + tx]
            tri_ids, bary = _first_containing(p, cand, pos, tris)
        else:
            tri_ids, bary = _scan_all(p, pos, tris)
        if np.any(tri_ids < 0):
            raise MeshError("point not covered by any triangle (mesh corrupted)")
        tri_out[s:s + chunk] = tri_ids
        bary_out[s:s + chunk] = bary
    return tri_out, bary_out


def _first_containing(p, cand, pos, tris, block=4):
    """First (lowest-id) candidate containing each point; candidates are id-sorted
    per row, so columns are scanned in blocks and only unresolved rows continue."""
    n = len(p)
    ids = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 3))
    todo = np.arange(n)
    for c0 in range(0, cand.shape[1], block):
        if len(todo) == 0:
            break
        sub = cand[todo, c0:c0 + block]
        v = tris[np.maximum(sub, 0)]
        with np.errstate(divide="ignore", invalid="ignore"):
            b = barycentric_batch(p[todo, None, :], pos[v[..., 0]], pos[v[..., 1]], pos[v[..., 2]])
        inside = np.all(b >= -EPS_BARY, axis=-1) & (sub >= 0)
        hit = inside.any(axis=1)
        k = np.argmax(inside, axis=1)
        rows = np.flatnonzero(hit)
        ids[todo[rows]] = sub[rows, k[rows]]
        bary[todo[rows]] = b[rows, k[rows]]
        todo = todo[~hit]
    return ids, bary


def _scan_all(p, pos, tris, block=256):
    ids = np.full(len(p), -1, dtype=np.int64)
    bary = np.zeros((len(p), 3))
    for t0 in range(0, len(tris), block):
        cand = np.broadcast_to(np.arange(t0, min(t0 + block, len(tris))), (len(p), min(block, len(tris) - t0)))
        todo = ids < 0
        if not todo.any():
            break
        i, b = _first_containing(p[todo], cand[todo], pos, tris)
        sub = np.flatnonzero(todo)
        ids[sub] = i
        bary[sub] = b
    return ids, bary


def pixel_centers(width, height, stride=1):
    ys, xs = np.mgrid[0:height:stride, 0:width:stride]
    return np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1).astype(np.float64)


# -- validity -----------------------------------------------------------------

def in_circle(a, b, c, d):
    """>0 if d lies strictly inside the circumcircle of CCW triangle (a, b, c)."""
    ad, bd, cd = a - d, b - d, c - d
    return ((ad[..., 0] ** 2 + ad[..., 1] ** 2) * (bd[..., 0] * cd[..., 1] - cd[..., 0] * bd[..., 1])
            - (bd[..., 0] ** 2 + bd[..., 1] ** 2) * (ad[..., 0] * cd[..., 1] - cd[..., 0] * ad[..., 1])
            + (cd[..., 0] ** 2 + cd[..., 1] ** 2) * (ad[..., 0] * bd[..., 1] - bd[..., 0] * ad[..., 1]))


def is_valid(mesh: Mesh) -> bool:
    pos = mesh.positions
    if np.any(pos[:, 0] < 0) or np.any(pos[:, 0] > mesh.width) \
            or np.any(pos[:, 1] < 0) or np.any(pos[:, 1] > mesh.height):
        return False
    if not np.all(np.isfinite(pos)):
        return False
    area = signed_areas(pos, mesh.triangles)
    if np.any(area <= EPS_AREA):
        return False
    if len(np.unique(mesh.triangles)) != len(pos):
        return False
    # non-inverted triangles whose areas sum to the rectangle tile it
    return bool(np.isclose(area.sum(), mesh.width * mesh.height, rtol=1e-9, atol=1e-6))


def validate_or_remesh(mesh: Mesh, seed=0) -> Mesh:
    """Return the mesh unchanged if valid; otherwise clamp, de-duplicate,
    perturb and re-triangulate."""
    if is_valid(mesh):
        return mesh
    rng = np.random.default_rng(seed)
    w, h = mesh.width, mesh.height
    pos = mesh.positions.copy()
    pos[:, 0] = np.clip(pos[:, 0], 0.0, w)
    pos[:, 1] = np.clip(pos[:, 1], 0.0, h)
    corners = np.array([(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)])
    for c in corners:
        if not np.any(np.all(pos == c, axis=1)):
            d = np.linalg.norm(pos - c, axis=1)
            pos[np.argmin(d)] = c
    pos = _dedupe(pos, w, h, rng)
    try:
        out = triangulate(pos, w, h, mesh.tiles.tile_size)
    except MeshError:
        out = None
    for k in range(20):
        if out is not None and is_valid(out):
            return out
        # jitter the vertices of offending triangles (all vertices if the
        # triangulation failed), with a growing step; border vertices slide
        # along their edge and corners stay fixed
        if out is None or len(out.positions) != len(pos):
            move = np.ones(len(pos), bool)
        else:
            bad = signed_areas(out.positions, out.triangles) <= EPS_AREA
            move = np.zeros(len(pos), bool)
            move[out.triangles[bad].ravel()] = True
            if not move.any():
                move[:] = True
        sigma = 1e-4 * min(w, h) * 2.0 ** k
        step = rng.normal(0.0, sigma, size=(len(pos), 2))
        on_x = (pos[:, 0] == 0) | (pos[:, 0] == w)
        on_y = (pos[:, 1] == 0) | (pos[:, 1] == h)
        step[on_x, 0] = 0.0
        step[on_y, 1] = 0.0
        step[~move] = 0.0
        pos += step
        pos[:, 0] = np.clip(pos[:, 0], 0.0, w)
        pos[:, 1] = np.clip(pos[:, 1], 0.0, h)
        pos = _dedupe(pos, w, h, rng)
        try:
            out = triangulate(pos, w, h, mesh.tiles.tile_size)
        except MeshError:
            out = None
    if out is None or not is_valid(out):
        raise MeshError("could not repair mesh")
    return out


def delaunay_violations(mesh: Mesh, eps=EPS_CIRC) -> int:
    """Brute-force empty-circumcircle check: count (triangle, vertex) pairs with
    the vertex strictly inside the circumcircle."""
    pos, tris = mesh.positions, mesh.triangles
    a, b, c = pos[tris[:, 0]], pos[tris[:, 1]], pos[tris[:, 2]]
    scale = np.max(np.abs(pos)) ** 4 + 1.0
    count = 0
    for t in range(len(tris)):
        det = in_circle(a[t], b[t], c[t], pos)
        det[tris[t]] = 0.0
        count += int(np.sum(det > eps * scale))
    return count
