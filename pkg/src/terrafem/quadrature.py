"""Quadrature rules on reference cells.

Rules are constructed as Gauss-Legendre products; the collapsed-coordinate
(Duffy) direction on triangles uses Gauss-Jacobi nodes with weight (1-x)
so the declared exactness degree is met without wasted points.
"""

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

SUPPORTED_SHAPES = ("interval", "triangle", "quad", "prism", "hex")


class Quadrature:
    """Points and weights on a reference cell or reference facet."""

    def __init__(self, points, weights, shape, degree):
        self.points = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
        self.weights = np.ascontiguousarray(weights, dtype=float)
        self.shape = shape
        self.degree = degree
        if self.points.shape[0] != self.weights.shape[0]:
            raise ValueError("points/weights length mismatch")

    @property
    def npoints(self):
        return self.weights.shape[0]

    def __repr__(self):
        return f"Quadrature({self.shape}, degree={self.degree}, n={self.npoints})"


def gauss01(n):
    """n-point Gauss rule on [0, 1]."""
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _jacobi01(n):
    # nodes/weights for int_0^1 (1-u) g(u) du
    x, w = roots_jacobi(n, 1.0, 0.0)
    return 0.5 * (x + 1.0), 0.25 * w


def _tensor(rules):
    pts = [np.atleast_2d(p if p.ndim > 1 else p[:, None]) for p, _ in rules]
    wts = [w for _, w in rules]
    grids = np.meshgrid(*[np.arange(len(w)) for w in wts], indexing="ij")
    idx = [g.ravel() for g in grids]
    points = np.hstack([p[i] for p, i in zip(pts, idx)])
    weights = np.ones(len(idx[0]))
    for w, i in zip(wts, idx):
        weights = weights * w[i]
    return points, weights


def quadrature_rule(shape, degree):
    """Rule integrating polynomials up to `degree` exactly on the reference cell.

    On the triangle the rule is exact for total degree; on tensor cells it is
    exact per direction, which is what the tensor-product elements need.
    """
    if degree < 0:
        raise ValueError("quadrature degree must be >= 0")
    if shape not in SUPPORTED_SHAPES:
        raise ValueError(f"unsupported quadrature shape {shape!r}")
    n = degree // 2 + 1
    if shape == "interval":
        x, w = gauss01(n)
        return Quadrature(x[:, None], w, shape, degree)
    if shape == "quad":
        x, w = gauss01(n)
        pts, wts = _tensor([(x, w), (x, w)])
        return Quadrature(pts, wts, shape, degree)
    if shape == "triangle":
        return _triangle_rule(degree)
    if shape == "prism":
        tri = _triangle_rule(degree)
        x, w = gauss01(n)
        pts, wts = _tensor([(tri.points, tri.weights), (x, w)])
        return Quadrature(pts, wts, shape, degree)
    if shape == "hex":
        x, w = gauss01(n)
        pts, wts = _tensor([(x, w), (x, w), (x, w)])
        return Quadrature(pts, wts, shape, degree)


def _triangle_rule(degree):
    n = degree // 2 + 1
    u, wu = _jacobi01(n)
    v, wv = gauss01(n)
    U, V = np.meshgrid(u, v, indexing="ij")
    WU, WV = np.meshgrid(wu, wv, indexing="ij")
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    w = (WU * WV).ravel()
    return Quadrature(np.column_stack([x, y]), w, "triangle", degree)


def reference_measure(shape):
    return {
        "interval": 1.0,
        "triangle": 0.5,
        "quad": 1.0,
        "prism": 0.5,
        "hex": 1.0,
    }[shape]
