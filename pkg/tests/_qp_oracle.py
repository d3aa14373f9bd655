"""Random filter-QP instances and a brute-force grid minimizer used as an oracle."""

import numpy as np

from cbf_forge.dynamics import ControlAffineSystem
from cbf_forge.safety_filter import CbfModel, ClassKappa, MultiCbfFilter


class Affine:
    """h(x) = a^T x + d."""

    def __init__(self, a, d):
        self.a = np.asarray(a, dtype=float)
        self.d = float(d)

    def value_and_gradient(self, x):
        return np.asarray(x) @ self.a + self.d, np.broadcast_to(self.a, np.shape(x)).copy()


def identity_system(m):
    return ControlAffineSystem(m, m, lambda x: np.zeros_like(x), lambda x: np.broadcast_to(np.eye(m), x.shape + (m,)),
                               [[-10.0, 10.0]] * m, name="identity")


def filter_for(A, b, policy="hold-last"):
    """A filter whose constraints at x = 0 read A u >= b."""
    m = A.shape[1]
    cbfs = tuple(CbfModel(Affine(a, -r), ClassKappa(1.0)) for a, r in zip(A, b))
    return MultiCbfFilter(cbfs, identity_system(m), policy)


def random_instance(rng):
    m = int(rng.integers(1, 3))
    q = int(rng.integers(1, 4))
    A = rng.normal(size=(q, m))
    u_feas = rng.normal(size=m)
    b = A @ u_feas - 0.5 * np.abs(rng.normal(size=q))
    u_nom = rng.normal(scale=2.0, size=m)
    return A, b, u_nom, u_feas


def _best(A, b, u_nom, pts):
    ok = np.all(pts @ A.T - b >= 0, axis=1)
    if not ok.any():
        return None
    d = np.sum((pts[ok] - u_nom) ** 2, axis=1)
    return pts[ok][np.argmin(d)]


def brute_force(A, b, u_nom, u_feas, step=1e-3, points=401):
    """Feasible grid point closest to u_nom.

    Two inputs use nested grids: each level scans a window around the
    previous best, wide enough to hold the true minimizer (a feasible grid
    point within s of the boundary puts it within sqrt(4 d s) of the best
    point), until the spacing reaches ``step``.
    """
    m = A.shape[1]
    R = np.linalg.norm(u_feas - u_nom) + 0.05
    if m == 1:
        pts = np.arange(u_nom[0] - R, u_nom[0] + R + step, step)[:, None]
        return _best(A, b, u_nom, pts)
    center, radius = np.asarray(u_nom, dtype=float), R
    best = None
    for _ in range(40):
        s = max(2 * radius / (points - 1), step)
        ax = [np.arange(c - radius, c + radius + s / 2, s) for c in center]
        pts = np.stack(np.meshgrid(*ax, indexing="ij"), -1).reshape(-1, 2)
        if best is not None:
            pts = np.vstack([pts, best[None]])
        best = _best(A, b, u_nom, pts)
        if s <= step:
            break
        d = np.linalg.norm(best - u_nom)
        center, radius = best, min(radius, np.sqrt(4 * d * s) + 4 * s)
    return best


def compare(A, b, u_nom, u_feas, u, step=1e-3):
    """(value gap, input-space gap, grid beats u) between a QP answer u and the grid oracle.

    The value gap is | ||u - u_nom|| - min over feasible grid points |. The
    grid argmin itself is only pinned down to about sqrt(distance * step)
    along an active constraint, so the input-space gap is informational.
    """
    ref = brute_force(A, b, u_nom, u_feas, step)
    d_u = np.linalg.norm(u - u_nom)
    d_ref = np.linalg.norm(ref - u_nom)
    return abs(d_u - d_ref), float(np.linalg.norm(u - ref)), d_ref < d_u - 1e-12
