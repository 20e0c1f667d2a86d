"""Feature interpolation on the mesh.

Three schemes share one control-point/Bernstein machinery:

``linear``
    plain barycentric interpolation (C0).
``ct_single``
    one cubic Bezier patch per triangle from the 10-point closed form
    (corner values, gradient-offset edge points, averaged interior point).
``ct_split``
    Clough-Tocher macro element: the triangle is split at its centroid into
    three cubic patches. Corner and edge control points are the same as in
    ``ct_single``; the interior points are fixed by the C1 conditions and a
    cross-edge derivative that varies linearly along each edge, so the field
    is C1 across every edge of the mesh and reproduces linear functions.

All operations are vectorized over triangles / samples and come with
hand-written vector-Jacobian products for backpropagation into features,
vertex gradients and vertex positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, barycentric_batch

SCHEMES = ("linear", "ct_single", "ct_split")
EDGES = ((0, 1), (1, 2), (2, 0))

# Cubic multi-indices in storage order: c300 c030 c003 c210 c120 c021 c012 c102 c201 c111
CUBIC_IDX = np.array([(3, 0, 0), (0, 3, 0), (0, 0, 3), (2, 1, 0), (1, 2, 0),
                      (0, 2, 1), (0, 1, 2), (1, 0, 2), (2, 0, 1), (1, 1, 1)])
CUBIC_COEF = np.array([1, 1, 1, 3, 3, 3, 3, 3, 3, 6], dtype=np.float64)

# ct_split control point layout: 0-2 corners, 3-8 edge points (3+2k near i, 4+2k
# near j on edge k=(i,j)), 9-11 a_i, 12-14 e_k, 15-17 q_i, 18 centre
N_SPLIT = 19
_SPLIT_MAP = np.array([
    [0, 1, 18, 3, 4, 10, 16, 15, 9, 12],
    [1, 2, 18, 5, 6, 11, 17, 16, 10, 13],
    [2, 0, 18, 7, 8, 9, 15, 17, 11, 14],
])



def _split_jacobians():
    jac = np.zeros((3, 3, 3))
    for k in range(3):
        i, j, o = k, (k + 1) % 3, (k + 2) % 3
        jac[k, 0, i], jac[k, 0, o] = 1.0, -1.0
        jac[k, 1, j], jac[k, 1, o] = 1.0, -1.0
        jac[k, 2, o] = 3.0
    return jac


_SPLIT_JAC = _split_jacobians()


class DegenerateSimplex(ValueError):
    pass


# -- barycentric coordinates ---------------------------------------------------

def bary_tri(p, v0, v1, v2):
    """Sub-triangle area ratios (A_0, A_1, A_2) / A."""
    p, v0, v1, v2 = (np.asarray(x, dtype=np.float64) for x in (p, v0, v1, v2))

    def area(a, b, c):
        return 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    total = area(v0, v1, v2)
    if abs(total) <= 1e-14 * (np.ptp(np.stack([v0, v1, v2])) ** 2 + 1e-300):
        raise DegenerateSimplex("degenerate triangle")
    return np.array([area(p, v1, v2), area(v0, p, v2), area(v0, v1, p)]) / total


def bary_tet(p, v1, v2, v3, v4):
    """Sub-tetrahedron volume ratios via scalar triple products."""
    p, v1, v2, v3, v4 = (np.asarray(x, dtype=np.float64) for x in (p, v1, v2, v3, v4))

    def vol(a, b, c, d):
        return np.dot(b - a, np.cross(c - a, d - a)) / 6.0

    total = vol(v1, v2, v3, v4)
    scale = np.ptp(np.stack([v1, v2, v3, v4])) ** 3 + 1e-300
    if abs(total) <= 1e-14 * scale:
        raise DegenerateSimplex("degenerate tetrahedron")
    return np.array([vol(p, v2, v3, v4), vol(v1, p, v3, v4),
                     vol(v1, v2, p, v4), vol(v1, v2, v3, p)]) / total


def bary_backward(points, a, b, c, dbary):
    """VJP of barycentric_batch w.r.t. the triangle vertices.

    Returns (da, db, dc), each shaped like a.
    """
    t00 = a[:, 0] - c[:, 0]
    t01 = b[:, 0] - c[:, 0]
    t10 = a[:, 1] - c[:, 1]
    t11 = b[:, 1] - c[:, 1]
    det = t00 * t11 - t01 * t10
    # T^{-1}
    i00, i01, i10, i11 = t11 / det, -t01 / det, -t10 / det, t00 / det
    r = points - c
    l0 = i00 * r[:, 0] + i01 * r[:, 1]
    l1 = i10 * r[:, 0] + i11 * r[:, 1]
    g0 = dbary[:, 0] - dbary[:, 2]
    g1 = dbary[:, 1] - dbary[:, 2]
    # dr = T^{-T} g
    dr0 = i00 * g0 + i10 * g1
    dr1 = i01 * g0 + i11 * g1
    # dT = -T^{-T} g l^T
    da = np.stack([-dr0 * l0, -dr1 * l0], axis=1)
    db = np.stack([-dr0 * l1, -dr1 * l1], axis=1)
    dc = -(da + db) - np.stack([dr0, dr1], axis=1)
    return da, db, dc


def bary_gradient(a, b, c):
    """Spatial gradient of each barycentric coordinate, shape (..., 3, 2)."""
    area2 = (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])
    g0 = np.stack([b[..., 1] - c[..., 1], c[..., 0] - b[..., 0]], axis=-1)
    g1 = np.stack([c[..., 1] - a[..., 1], a[..., 0] - c[..., 0]], axis=-1)
    g2 = np.stack([a[..., 1] - b[..., 1], b[..., 0] - a[..., 0]], axis=-1)
    return np.stack([g0, g1, g2], axis=-2) / area2[..., None, None]


# -- one-ring least-squares gradients ----------------------------------------------

@dataclass
class GradientCache:
    grads: np.ndarray      # (V, Nf, 2)
    a_inv: np.ndarray      # (V, 2, 2)
    b: np.ndarray          # (V, Nf, 2)
    centers: np.ndarray
    neighbors: np.ndarray
    dp: np.ndarray
    df: np.ndarray


def vertex_gradients(mesh: Mesh, features, return_cache=False):
    """Least-squares feature gradient per vertex over its one-ring.

    grad_v = b_v A_v^{-1}, A_v = sum dp dp^T, b_v = sum df dp^T.
    Near-singular A_v get lambda = 1e-8 trace(A_v) added to the diagonal.
    """
    features = np.asarray(features, dtype=np.float64)
    centers, neighbors = mesh.directed_edges()
    ptr = mesh.ring_ptr[:-1]
    dp = mesh.positions[neighbors] - mesh.positions[centers]
    df = features[neighbors] - features[centers]
    outer = dp[:, :, None] * dp[:, None, :]
    A = np.add.reduceat(outer, ptr, axis=0)
    B = np.add.reduceat(df[:, :, None] * dp[:, None, :], ptr, axis=0)
    tr = A[:, 0, 0] + A[:, 1, 1]
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    singular = det <= 1e-10 * (0.5 * tr) ** 2
    if np.any(singular):
        lam = 1e-8 * tr[singular]
        A[singular, 0, 0] += lam
        A[singular, 1, 1] += lam
        det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    a_inv = np.empty_like(A)
    a_inv[:, 0, 0] = A[:, 1, 1] / det
    a_inv[:, 1, 1] = A[:, 0, 0] / det
    a_inv[:, 0, 1] = -A[:, 0, 1] / det
    a_inv[:, 1, 0] = -A[:, 1, 0] / det
    grads = B @ a_inv
    if return_cache:
        return grads, GradientCache(grads, a_inv, B, centers, neighbors, dp, df)
    return grads


def vertex_gradients_backward(mesh: Mesh, cache: GradientCache, dgrads, detach_positions=False):
    """VJP of vertex_gradients. Returns (dfeatures, dpositions)."""
    V = mesh.n_vertices
    ptr = mesh.ring_ptr[:-1]
    db = dgrads @ cache.a_inv                                     # (V, Nf, 2)
    c, n = cache.centers, cache.neighbors
    d_df = _gdot(db[c], cache.dp)               # (E, Nf)
    dfeat = scatter_rows(n, d_df, V)
    dfeat -= np.add.reduceat(d_df, ptr, axis=0)
    if detach_positions:
        return dfeat, np.zeros((V, 2))
    # dA = -A^{-1} B^T dG A^{-1}
    m = np.transpose(cache.b, (0, 2, 1)) @ dgrads
    da = -(np.transpose(cache.a_inv, (0, 2, 1)) @ m @ cache.a_inv)
    da_sym = da + np.transpose(da, (0, 2, 1))
    d_dp = _gtdot(db[c], cache.df) + (da_sym[c] @ cache.dp[:, :, None])[..., 0]
    dpos = scatter_rows(n, d_dp, V)
    dpos -= np.add.reduceat(d_dp, ptr, axis=0)
    return dfeat, dpos


def scatter_rows(index, values, n):
    """out[index[r]] += values[r] for an (R, ...) array, via bincount per column."""
    flat = values.reshape(len(index), -1)
    out = np.empty((n, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(index, weights=flat[:, c], minlength=n)
    return out.reshape((n,) + values.shape[1:])


def _gdot(G, v):
    """(T, Nf, 2) . (T, 2) -> (T, Nf)."""
    return G[..., 0] * v[:, None, 0] + G[..., 1] * v[:, None, 1]


def _gtdot(G, d):
    """(T, Nf, 2)^T (T, Nf) -> (T, 2)."""
    return np.stack([np.sum(G[..., 0] * d, axis=1), np.sum(G[..., 1] * d, axis=1)], axis=1)


# -- control points ----------------------------------------------------------------

@dataclass
class CtPatch:
    """The 10 Bezier control points of one cubic patch, storage order."""
    points: np.ndarray     # (10, Nf)

    def __getitem__(self, key):
        names = ("300", "030", "003", "210", "120", "021", "012", "102", "201", "111")
        return self.points[names.index(key)]


def _vertex_major(P, F, G):
    """Contiguous (3, T, ...) copies; G split into its x and y parts."""
    Pv = np.ascontiguousarray(P.transpose(1, 0, 2))
    Fv = np.ascontiguousarray(F.transpose(1, 0, 2))
    Gx = np.ascontiguousarray(G[..., 0].transpose(1, 0, 2))
    Gy = np.ascontiguousarray(G[..., 1].transpose(1, 0, 2))
    return Pv, Fv, Gx, Gy


def _gv(Gx, Gy, i, v):
    return Gx[i] * v[:, 0:1] + Gy[i] * v[:, 1:2]


def _gtv(Gx, Gy, i, d):
    return np.stack([np.sum(Gx[i] * d, axis=1), np.sum(Gy[i] * d, axis=1)], axis=1)


def _edge_points(Pv, Fv, Gx, Gy):
    """Edge control points (6, T, Nf): f_i + G_i (v_j - v_i) / 3 for both ends."""
    out = []
    for i, j in EDGES:
        e = Pv[j] - Pv[i]
        out.append(Fv[i] + _gv(Gx, Gy, i, e) / 3.0)
        out.append(Fv[j] - _gv(Gx, Gy, j, e) / 3.0)
    return np.stack(out)


def ct_control_points(f, grads, verts) -> CtPatch:
    """Closed-form 10-point cubic patch for a single triangle.

    f: (3, Nf); grads: (3, Nf, 2); verts: (3, 2).
    """
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    if f.shape[0] != 3:
        f = f.reshape(3, -1)
    grads = np.asarray(grads, dtype=np.float64).reshape(3, f.shape[1], 2)
    verts = np.asarray(verts, dtype=np.float64)
    cp = control_points(verts[None], f[None], grads[None], "ct_single")[0]
    return CtPatch(cp)


def control_points(P, F, G, scheme):
    """Per-triangle control points.

    P: (T, 3, 2) vertex positions, F: (T, 3, Nf), G: (T, 3, Nf, 2).
    Returns (T, K, Nf) with K = 3 / 10 / 19 for linear / ct_single / ct_split.
    """
    if scheme == "linear":
        return F.copy()
    if scheme not in ("ct_single", "ct_split"):
        raise ValueError(f"unknown interpolation scheme {scheme!r}")
    Pv, Fv, Gx, Gy = _vertex_major(P, F, G)
    edge = _edge_points(Pv, Fv, Gx, Gy)
    if scheme == "ct_single":
        interior = edge.sum(axis=0) / 6.0 - Fv.sum(axis=0) / 6.0
        return np.concatenate([Fv, edge, interior[None]]).transpose(1, 0, 2).copy()
    T, nf = Fv.shape[1:]
    cp = np.empty((N_SPLIT, T, nf))
    cp[:3] = Fv
    cp[3:9] = edge
    C = Pv.mean(axis=0)
    for i in range(3):
        cp[9 + i] = Fv[i] + _gv(Gx, Gy, i, C - Pv[i]) / 3.0
    for k, (i, j) in enumerate(EDGES):
        E = Pv[j] - Pv[i]
        D = C - Pv[i]
        s = np.sum(D * E, axis=1) / np.sum(E * E, axis=1)
        nrm = D - s[:, None] * E
        cp[12 + k] = ((_gv(Gx, Gy, i, nrm) + _gv(Gx, Gy, j, nrm)) / 6.0
                      + (1.0 - s)[:, None] * edge[2 * k] + s[:, None] * edge[2 * k + 1])
    # q_i averages a_i with the two edge-interior points touching vertex i
    cp[15] = (cp[9] + cp[12] + cp[14]) / 3.0
    cp[16] = (cp[10] + cp[13] + cp[12]) / 3.0
    cp[17] = (cp[11] + cp[14] + cp[13]) / 3.0
    cp[18] = (cp[15] + cp[16] + cp[17]) / 3.0
    return cp.transpose(1, 0, 2).copy()


def control_points_backward(P, F, G, dcp, scheme):
    """VJP of control_points. Returns (dP, dF, dG)."""
    if scheme == "linear":
        return np.zeros_like(P), dcp.copy(), np.zeros_like(G)
    if scheme not in ("ct_single", "ct_split"):
        raise ValueError(f"unknown interpolation scheme {scheme!r}")
    Pv, Fv, Gx, Gy = _vertex_major(P, F, G)
    d = np.ascontiguousarray(dcp.transpose(1, 0, 2))
    dP = np.zeros_like(Pv)
    dF = d[:3].copy()
    dGx = np.zeros_like(Gx)
    dGy = np.zeros_like(Gy)
    dedge = d[3:9].copy()
    if scheme == "ct_single":
        dint = d[9]
        dedge += dint[None] / 6.0
        dF -= dint[None] / 6.0
    else:
        d = d.copy()
        d[15:18] += d[18][None] / 3.0
        for i, (ai, e1, e2) in enumerate(((9, 12, 14), (10, 13, 12), (11, 14, 13))):
            dq = d[15 + i] / 3.0
            d[ai] += dq
            d[e1] += dq
            d[e2] += dq
        C = Pv.mean(axis=0)
        dC = np.zeros_like(C)
        for k, (i, j) in enumerate(EDGES):
            de = d[12 + k]
            E = Pv[j] - Pv[i]
            D = C - Pv[i]
            ee = np.sum(E * E, axis=1)
            de_dot = np.sum(D * E, axis=1)
            s = de_dot / ee
            nrm = D - s[:, None] * E
            edge_i = Fv[i] + _gv(Gx, Gy, i, E) / 3.0
            edge_j = Fv[j] - _gv(Gx, Gy, j, E) / 3.0
            dedge[2 * k] += (1.0 - s)[:, None] * de
            dedge[2 * k + 1] += s[:, None] * de
            gx = de * (nrm[:, 0:1] / 6.0)
            gy = de * (nrm[:, 1:2] / 6.0)
            dGx[i] += gx
            dGx[j] += gx
            dGy[i] += gy
            dGy[j] += gy
            dn = (_gtv(Gx, Gy, i, de) + _gtv(Gx, Gy, j, de)) / 6.0
            ds = np.sum(de * (edge_j - edge_i), axis=1) - np.sum(dn * E, axis=1)
            dD = dn + (ds / ee)[:, None] * E
            dE = -s[:, None] * dn + (ds / ee)[:, None] * D - (2.0 * ds * de_dot / ee ** 2)[:, None] * E
            dC += dD
            dP[i] -= dD + dE
            dP[j] += dE
        for i in range(3):
            da = d[9 + i]
            r = C - Pv[i]
            dF[i] += da
            dGx[i] += da * (r[:, 0:1] / 3.0)
            dGy[i] += da * (r[:, 1:2] / 3.0)
            dr = _gtv(Gx, Gy, i, da) / 3.0
            dC += dr
            dP[i] -= dr
        dP += dC[None] / 3.0
    for k, (i, j) in enumerate(EDGES):
        E = Pv[j] - Pv[i]
        for end, sign, src in ((i, 1.0, 2 * k), (j, -1.0, 2 * k + 1)):
            dc = dedge[src]
            dF[end] += dc
            dGx[end] += dc * (sign * E[:, 0:1] / 3.0)
            dGy[end] += dc * (sign * E[:, 1:2] / 3.0)
            dE = sign * _gtv(Gx, Gy, end, dc) / 3.0
            dP[j] += dE
            dP[i] -= dE
    dG = np.stack([dGx, dGy], axis=-1).transpose(1, 0, 2, 3)
    return dP.transpose(1, 0, 2), dF.transpose(1, 0, 2), dG


# -- Bernstein evaluation ------------------------------------------------------------

def bernstein3(uvw):
    """Cubic Bernstein basis (N, 10) and its derivative w.r.t. (u, v, w), (N, 10, 3)."""
    uvw = np.asarray(uvw, dtype=np.float64)
    pw = np.stack([np.ones_like(uvw), uvw, uvw ** 2, uvw ** 3], axis=-1)  # (N, 3, 4)
    a, b, c = CUBIC_IDX[:, 0], CUBIC_IDX[:, 1], CUBIC_IDX[:, 2]
    u, v, w = pw[:, 0], pw[:, 1], pw[:, 2]
    B = CUBIC_COEF * u[:, a] * v[:, b] * w[:, c]
    dB = np.empty(B.shape + (3,))
    am, bm, cm = np.maximum(a - 1, 0), np.maximum(b - 1, 0), np.maximum(c - 1, 0)
    dB[..., 0] = CUBIC_COEF * a * u[:, am] * v[:, b] * w[:, c]
    dB[..., 1] = CUBIC_COEF * b * u[:, a] * v[:, bm] * w[:, c]
    dB[..., 2] = CUBIC_COEF * c * u[:, a] * v[:, b] * w[:, cm]
    return B, dB


def ct_eval(patch: CtPatch, bary, return_grad=False):
    """Evaluate a 10-point cubic patch at barycentrics (3,) or (N, 3)."""
    bary = np.asarray(bary, dtype=np.float64)
    single = bary.ndim == 1
    B, dB = bernstein3(np.atleast_2d(bary))
    val = B @ patch.points
    if not return_grad:
        return val[0] if single else val
    # d value / d bary: (N, 3, Nf)
    dval = np.einsum("nkj,kf->njf", dB, patch.points)
    if single:
        return val[0], dval[0]
    return val, dval


def interp_weights(bary, scheme):
    """Per-sample control point indices, weights and d weight / d bary.

    Returns idx (N, K), W (N, K), dW (N, K, 3).
    """
    bary = np.asarray(bary, dtype=np.float64)
    n = len(bary)
    if scheme == "linear":
        idx = np.broadcast_to(np.arange(3), (n, 3))
        dW = np.broadcast_to(np.eye(3), (n, 3, 3))
        return idx, bary, dW
    if scheme == "ct_single":
        B, dB = bernstein3(bary)
        return np.broadcast_to(np.arange(10), (n, 10)), B, dB
    if scheme != "ct_split":
        raise ValueError(f"unknown interpolation scheme {scheme!r}")
    # micro-triangle k = (i, j, centroid) is the one whose opposite coordinate is smallest
    opp = np.argmin(bary, axis=1)
    k = (opp + 1) % 3
    i = k
    j = (k + 1) % 3
    rows = np.arange(n)
    ai, aj, ao = bary[rows, i], bary[rows, j], bary[rows, opp]
    uvw = np.stack([ai - ao, aj - ao, 3.0 * ao], axis=1)
    B, dB = bernstein3(uvw)
    # chain (u, v, w) -> (alpha_i, alpha_j, alpha_o)
    dW = dB @ _SPLIT_JAC[k]
    return _SPLIT_MAP[k], B, dW


def n_control_points(scheme):
    return {"linear": 3, "ct_single": 10, "ct_split": N_SPLIT}[scheme]


# -- whole-field evaluation ------------------------------------------------------------

@dataclass
class FieldCache:
    scheme: str
    tri: np.ndarray
    bary: np.ndarray
    points: np.ndarray
    used: np.ndarray       # triangle ids touched by the batch
    local: np.ndarray      # per-sample index into ``used``
    idx: np.ndarray
    W: np.ndarray
    dW: np.ndarray
    P: np.ndarray
    F: np.ndarray
    G: np.ndarray
    cp: np.ndarray
    grad_cache: GradientCache | None


def field_forward(mesh: Mesh, features, points, scheme="ct_split", located=None):
    """Interpolate per-vertex features at sample points. Returns (values, cache).

    Control points are built only for the triangles the samples fall in.
    """
    features = np.asarray(features, dtype=np.float64)
    if located is None:
        from .mesh import locate
        located = locate(mesh, points)
    tri, bary = located
    used, local = np.unique(tri, return_inverse=True)
    tv = mesh.triangles[used]
    P = mesh.positions[tv]
    F = features[tv]
    if scheme == "linear":
        G, gcache = np.zeros(F.shape + (2,)), None
    else:
        grads, gcache = vertex_gradients(mesh, features, return_cache=True)
        G = grads[tv]
    cp = control_points(P, F, G, scheme)
    idx, W, dW = interp_weights(bary, scheme)
    vals = (W[:, None, :] @ cp[local[:, None], idx])[:, 0]
    cache = FieldCache(scheme, tri, bary, np.asarray(points, dtype=np.float64), used, local,
                       idx, W, dW, P, F, G, cp, gcache)
    return vals, cache


def field_backward(mesh: Mesh, cache: FieldCache, dvals, detach_gradient_positions=False):
    """VJP of field_forward. Returns (dfeatures, dpositions)."""
    T, K, nf = cache.cp.shape
    V = mesh.n_vertices
    flat = (cache.local[:, None] * K + cache.idx).ravel()
    contrib = (cache.W[:, :, None] * dvals[:, None, :]).reshape(-1, nf)
    dcp = scatter_rows(flat, contrib, T * K).reshape(T, K, nf)
    # barycentric path
    proj = (cache.cp[cache.local[:, None], cache.idx] @ dvals[:, :, None])[..., 0]
    dbary = (proj[:, None, :] @ cache.dW)[:, 0]
    tv = mesh.triangles[cache.tri]
    pos = mesh.positions
    da, db, dc = bary_backward(cache.points, pos[tv[:, 0]], pos[tv[:, 1]], pos[tv[:, 2]], dbary)
    dpos = scatter_rows(tv.T.ravel(), np.concatenate([da, db, dc]), V)
    # control point path
    dP, dF, dG = control_points_backward(cache.P, cache.F, cache.G, dcp, cache.scheme)
    tris = mesh.triangles[cache.used].ravel()
    dfeat = scatter_rows(tris, dF.reshape(-1, nf), V)
    dpos += scatter_rows(tris, dP.reshape(-1, 2), V)
    if cache.grad_cache is not None:
        dgrads = scatter_rows(tris, dG.reshape(-1, nf, 2), V)
        df2, dp2 = vertex_gradients_backward(mesh, cache.grad_cache, dgrads,
                                             detach_positions=detach_gradient_positions)
        dfeat += df2
        dpos += dp2
    return dfeat, dpos


def field_spatial_gradient(mesh: Mesh, features, tri, bary, scheme="ct_split", grads=None):
    """d field / d p at given (triangle, barycentric) locations, shape (N, Nf, 2)."""
    features = np.asarray(features, dtype=np.float64)
    tv = mesh.triangles
    P = mesh.positions[tv]
    F = features[tv]
    if scheme == "linear":
        G = np.zeros(F.shape + (2,))
    else:
        if grads is None:
            grads = vertex_gradients(mesh, features)
        G = grads[tv]
    cp = control_points(P, F, G, scheme)
    idx, W, dW = interp_weights(bary, scheme)
    dval_dbary = np.einsum("nka,nkf->nfa", dW, cp[tri[:, None], idx])
    gb = bary_gradient(P[tri, 0], P[tri, 1], P[tri, 2])          # (N, 3, 2)
    return np.einsum("nfa,nak->nfk", dval_dbary, gb)


__all__ = [
    "SCHEMES", "CtPatch", "bary_tri", "bary_tet", "barycentric_batch", "bary_backward",
    "vertex_gradients", "vertex_gradients_backward", "ct_control_points", "ct_eval",
    "control_points", "control_points_backward", "interp_weights", "field_forward",
    "field_backward", "field_spatial_gradient", "bernstein3",
]
