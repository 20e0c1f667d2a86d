"""Shared builders for the test suite."""

import numpy as np

from nht.mesh import boundary_points, triangulate


def random_mesh(rng, width=32.0, height=24.0, n_interior=20):
    border = boundary_points(width, height, 4 * n_interior)
    inner = np.column_stack([rng.uniform(0.1 * width, 0.9 * width, n_interior),
                             rng.uniform(0.1 * height, 0.9 * height, n_interior)])
    return triangulate(np.vstack([border, inner]), width, height)


def interior_points(rng, mesh, n, margin=0.5):
    return np.column_stack([rng.uniform(margin, mesh.width - margin, n),
                            rng.uniform(margin, mesh.height - margin, n)])


def central_diff(f, x, h=1e-6):
    """Numerical gradient of scalar f w.r.t. array x (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))
