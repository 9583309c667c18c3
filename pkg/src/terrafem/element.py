"""Reference finite elements.

Each element stores its basis as a monomial-coefficient matrix obtained by
inverting the generalized Vandermonde of the dual functionals.  Supported
families (cf. the CLI element names):

    CG1, CG2, DG0, DG1        on interval / triangle / quad
    RT0, RT1, BDM1, BDFM1     on the triangle
    RT0, RT1                  on the quad (RTCF-type)
    E(r,s,k), Eminus(r,s,k)   tensor products on prism / hex, r,s <= 2

plus CG2B (bubble-augmented CG2, the stream-function companion of BDFM1)
and the temperature space V^t carved out of the vertical H(div) block.
"""

import numpy as np
from dataclasses import dataclass, field

from .quadrature import gauss01, quadrature_rule

REF_VERTICES = {
    "interval": np.array([[0.0], [1.0]]),
    "triangle": np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    "quad": np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]),
}
# edges traversed counterclockwise so the outward normal is rot(-90) of the tangent
REF_EDGES = {
    "interval": ((0,), (1,)),
    "triangle": ((0, 1), (1, 2), (2, 0)),
    "quad": ((0, 1), (1, 2), (2, 3), (3, 0)),
}
SHAPE_DIM = {"interval": 1, "triangle": 2, "quad": 2, "prism": 3, "hex": 3}
BASE_SHAPE = {"prism": "triangle", "hex": "quad"}


class UnsupportedElementError(ValueError):
    pass


# ---------------------------------------------------------------------------
# monomial machinery

def monomial_exponents(dim, degree, kind="P"):
    """Exponent tuples for P (total degree) or Q (per-direction) spaces."""
    if dim == 1:
        return np.array([[k] for k in range(degree + 1)], dtype=int)
    rng = range(degree + 1)
    out = []
    if dim == 2:
        for i in rng:
            for j in rng:
                if kind == "P" and i + j > degree:
                    continue
                out.append((i, j))
    else:
        for i in rng:
            for j in rng:
                for k in rng:
                    if kind == "P" and i + j + k > degree:
                        continue
                    out.append((i, j, k))
    return np.array(sorted(out), dtype=int)


def eval_monomials(expo, pts):
    """[n_mono, n_pts] table of monomial values."""
    pts = np.atleast_2d(pts)
    out = np.ones((len(expo), len(pts)))
    for d in range(expo.shape[1]):
        out *= pts[:, d][None, :] ** expo[:, d][:, None]
    return out


def eval_monomial_grads(expo, pts):
    """[n_mono, dim, n_pts] table of monomial gradients."""
    pts = np.atleast_2d(pts)
    dim = expo.shape[1]
    out = np.zeros((len(expo), dim, len(pts)))
    for d in range(dim):
        e = expo.copy()
        fac = e[:, d].astype(float)
        e[:, d] = np.maximum(e[:, d] - 1, 0)
        out[:, d, :] = fac[:, None] * eval_monomials(e, pts)
    return out


def shifted_legendre(m, s):
    if m == 0:
        return np.ones_like(s)
    if m == 1:
        return 2.0 * s - 1.0
    if m == 2:
        return 6.0 * s * s - 6.0 * s + 1.0
    raise ValueError("legendre moments implemented up to order 2")


# ---------------------------------------------------------------------------
# dofs and elements

@dataclass
class Dof:
    """A dual functional: v -> sum_p weights[p] . v(points[p]).

    entity:    (dim, local_index) the DOF attaches to
    slot:      canonical identifier used to match DOFs across cells sharing
               the entity (moment order, node index, ...)
    rsign_exp: sign exponent under facet-parametrisation reversal; the
               local-to-global sign is tau**rsign_exp
    """
    entity: tuple
    slot: tuple
    points: np.ndarray
    weights: np.ndarray
    rsign_exp: int = 0

    def apply(self, values_at_points):
        # values_at_points: [ncomp, npts]
        return float(np.sum(self.weights.T * values_at_points))


class ReferenceElement:
    def __init__(self, name, shape, continuity, degree, expo, coeffs, dofs,
                 meta=None):
        self.name = name
        self.shape = shape
        self.continuity = continuity  # H1 | Hcurl | Hdiv | L2 | Vt
        self.degree = degree          # max polynomial degree (quadrature sizing)
        self.expo = expo
        self.coeffs = np.asarray(coeffs, dtype=float)  # [ndof, ncomp, nmono]
        self.dofs = dofs
        self.meta = meta or {}

    @property
    def ndofs(self):
        return self.coeffs.shape[0]

    @property
    def ncomp(self):
        return self.coeffs.shape[1]

    @property
    def ref_dim(self):
        return SHAPE_DIM[self.shape]

    def tabulate(self, pts):
        """Basis values at reference points: [ndof, ncomp, npts]."""
        mono = eval_monomials(self.expo, pts)
        return np.einsum("kcm,mp->kcp", self.coeffs, mono)

    def tabulate_grad(self, pts):
        """Reference gradients: [ndof, ncomp, ref_dim, npts]."""
        g = eval_monomial_grads(self.expo, pts)
        return np.einsum("kcm,mdp->kcdp", self.coeffs, g)

    def verify_dual_basis(self, tol=1e-10):
        if self.dofs is None:
            return
        for i, dof in enumerate(self.dofs):
            vals = self.tabulate(dof.points)  # [ndof, ncomp, npts]
            applied = np.einsum("kcp,pc->k", vals, dof.weights)
            target = np.zeros(self.ndofs)
            target[i] = 1.0
            err = np.max(np.abs(applied - target))
            if err > tol:
                raise AssertionError(
                    f"{self.name}: dual-basis defect {err:.2e} at dof {i}")

    def __repr__(self):
        return f"<{self.name} on {self.shape}: {self.ndofs} dofs, {self.continuity}>"


def _build_from_dual(name, shape, continuity, degree, expo, span, dofs, meta=None):
    """Invert the generalized Vandermonde of the dual functionals."""
    span = np.asarray(span, dtype=float)  # [nspan, ncomp, nmono]
    n = span.shape[0]
    if len(dofs) != n:
        raise AssertionError(f"{name}: {len(dofs)} dofs for span of dim {n}")
    V = np.zeros((n, n))
    for i, dof in enumerate(dofs):
        mono = eval_monomials(expo, dof.points)               # [nmono, np]
        vals = np.einsum("jcm,mp->jcp", span, mono)           # [nspan, ncomp, np]
        V[i, :] = np.einsum("jcp,pc->j", vals, dof.weights)
    Vinv = np.linalg.inv(V)
    coeffs = np.einsum("ji,jcm->icm", Vinv, span)
    elem = ReferenceElement(name, shape, continuity, degree, expo, coeffs, dofs, meta)
    elem.verify_dual_basis()
    return elem


def _point_dof(entity, slot, point, comp_weight):
    return Dof(entity, slot, np.atleast_2d(point), np.atleast_2d(comp_weight))


def _edge_flux_dofs(shape, edge, orders, npts=4):
    """Arc-length normal moments on a reference edge (outward normal)."""
    verts = REF_VERTICES[shape]
    a, b = verts[REF_EDGES[shape][edge][0]], verts[REF_EDGES[shape][edge][1]]
    t = b - a
    length = np.hypot(*t)
    nrm = np.array([t[1], -t[0]]) / length
    s, w = gauss01(npts)
    pts = a[None, :] + s[:, None] * t[None, :]
    out = []
    for m in orders:
        wt = (shifted_legendre(m, s) * w * length)[:, None] * nrm[None, :]
        out.append(Dof((1, edge), ("flux", m), pts, wt, rsign_exp=m + 1))
    return out


def _edge_tangent_dof(shape, edge, slot, npts=4):
    verts = REF_VERTICES[shape]
    a, b = verts[REF_EDGES[shape][edge][0]], verts[REF_EDGES[shape][edge][1]]
    t = b - a
    s, w = gauss01(npts)
    pts = a[None, :] + s[:, None] * t[None, :]
    wt = w[:, None] * t[None, :]
    return Dof((2, 0), slot, pts, wt)


def _interior_moment_dofs(shape, weight_fns, degree_hint=2, slot_prefix="int"):
    """Cell moments against given vector/scalar weight functions."""
    q = quadrature_rule(shape, degree_hint + 3)
    out = []
    for j, fn in enumerate(weight_fns):
        wf = np.asarray(fn(q.points), dtype=float)
        if wf.ndim == 1:
            wf = wf[:, None]
        wt = q.weights[:, None] * wf
        out.append(Dof((SHAPE_DIM[shape], 0), (slot_prefix, j), q.points, wt))
    return out


# ---------------------------------------------------------------------------
# scalar Lagrange / discontinuous elements

_TRI_LATTICE = {
    0: np.array([[1.0 / 3.0, 1.0 / 3.0]]),
    1: REF_VERTICES["triangle"],
}
_QUAD_LATTICE = {
    0: np.array([[0.5, 0.5]]),
    1: REF_VERTICES["quad"],
}


def _span_scalar(expo):
    n = len(expo)
    return np.eye(n).reshape(n, 1, n)


def _cg_interval(deg):
    expo = monomial_exponents(1, deg)
    dofs = [_point_dof((0, 0), ("pt", 0), [0.0], [1.0]),
            _point_dof((0, 1), ("pt", 0), [1.0], [1.0])]
    if deg == 2:
        dofs.append(_point_dof((1, 0), ("pt", 0), [0.5], [1.0]))
    elif deg != 1:
        raise UnsupportedElementError("interval CG degree must be 1 or 2")
    return _build_from_dual(f"CG{deg}", "interval", "H1", deg, expo,
                            _span_scalar(expo), dofs)


def _dg_interval(deg):
    expo = monomial_exponents(1, deg)
    nodes = np.linspace(0.0, 1.0, deg + 1) if deg > 0 else np.array([0.5])
    dofs = [_point_dof((1, 0), ("pt", i), [x], [1.0]) for i, x in enumerate(nodes)]
    return _build_from_dual(f"DG{deg}", "interval", "L2", deg, expo,
                            _span_scalar(expo), dofs)


def _lagrange_2d(shape, deg, bubble=False):
    verts = REF_VERTICES[shape]
    kind = "P" if shape == "triangle" else "Q"
    expo = monomial_exponents(2, deg, kind)
    span = _span_scalar(expo)
    if bubble:
        if shape != "triangle" or deg != 2:
            raise UnsupportedElementError("bubble augmentation is CG2/triangle only")
        expo = monomial_exponents(2, 3, "P")
        span = np.zeros((7, 1, len(expo)))
        mono_idx = {tuple(e): i for i, e in enumerate(expo)}
        for j, e in enumerate(monomial_exponents(2, 2, "P")):
            span[j, 0, mono_idx[tuple(e)]] = 1.0
        # cubic bubble x*y*(1-x-y)
        span[6, 0, mono_idx[(1, 1)]] = 1.0
        span[6, 0, mono_idx[(2, 1)]] = -1.0
        span[6, 0, mono_idx[(1, 2)]] = -1.0
    dofs = [_point_dof((0, i), ("pt", 0), v, [1.0]) for i, v in enumerate(verts)]
    if deg == 2:
        for e, (i, j) in enumerate(REF_EDGES[shape]):
            mid = 0.5 * (verts[i] + verts[j])
            dofs.append(_point_dof((1, e), ("pt", 0), mid, [1.0]))
        if shape == "quad":
            dofs.append(_point_dof((2, 0), ("pt", 0), [0.5, 0.5], [1.0]))
    elif deg != 1:
        raise UnsupportedElementError(f"CG degree {deg} not supported")
    if bubble:
        dofs.append(_point_dof((2, 0), ("pt", 0), [1.0 / 3.0, 1.0 / 3.0], [1.0]))
    name = f"CG{deg}B" if bubble else f"CG{deg}"
    maxdeg = deg + 1 if bubble else deg
    return _build_from_dual(name, shape, "H1", maxdeg, expo, span, dofs)


def _dg_2d(shape, deg):
    kind = "P" if shape == "triangle" else "Q"
    expo = monomial_exponents(2, deg, kind)
    lattice = (_TRI_LATTICE if shape == "triangle" else _QUAD_LATTICE)[deg]
    dofs = [_point_dof((2, 0), ("pt", i), p, [1.0]) for i, p in enumerate(lattice)]
    return _build_from_dual(f"DG{deg}", shape, "L2", deg, expo,
                            _span_scalar(expo), dofs)


def _vector_lagrange(shape, deg):
    """Componentwise CG vector element (the inf-sup negative control)."""
    scalar = _lagrange_2d(shape, deg)
    nm = len(scalar.expo)
    nd = scalar.ndofs
    coeff_span = np.zeros((2 * nd, 2, nm))
    dofs = []
    for c in range(2):
        for i, dof in enumerate(scalar.dofs):
            coeff_span[c * nd + i, c, :] = scalar.coeffs[i, 0, :]
            w = np.zeros((dof.points.shape[0], 2))
            w[:, c] = dof.weights[:, 0]
            dofs.append(Dof(dof.entity, ("pt", dof.slot[1], c), dof.points, w))
    elem = ReferenceElement(f"VectorCG{deg}", shape, "H1", deg, scalar.expo,
                            coeff_span, dofs)
    elem.verify_dual_basis()
    return elem


# ---------------------------------------------------------------------------
# H(div) elements on triangle / quad

def _vec_span(expo, comp_polys):
    """comp_polys: list of (cx_coeffs, cy_coeffs) over `expo`."""
    n = len(comp_polys)
    out = np.zeros((n, 2, len(expo)))
    for i, (cx, cy) in enumerate(comp_polys):
        out[i, 0, :] = cx
        out[i, 1, :] = cy
    return out


def _poly(expo, terms):
    v = np.zeros(len(expo))
    idx = {tuple(e): i for i, e in enumerate(expo)}
    for mono, c in terms.items():
        v[idx[mono]] = c
    return v


def _rt_triangle(sub):
    if sub == 0:
        expo = monomial_exponents(2, 1, "P")
        z = _poly(expo, {})
        gens = [
            (_poly(expo, {(0, 0): 1}), z),
            (z, _poly(expo, {(0, 0): 1})),
            (_poly(expo, {(1, 0): 1}), _poly(expo, {(0, 1): 1})),
        ]
        dofs = []
        for e in range(3):
            dofs += _edge_flux_dofs("triangle", e, [0])
        return _build_from_dual("RT0", "triangle", "Hdiv", 1, expo,
                                _vec_span(expo, gens), dofs,
                                meta={"normal_trace_degree": 0})
    if sub == 1:
        expo = monomial_exponents(2, 2, "P")
        z = _poly(expo, {})
        gens = []
        for mono in [(0, 0), (1, 0), (0, 1)]:
            gens.append((_poly(expo, {mono: 1}), z))
            gens.append((z, _poly(expo, {mono: 1})))
        # x * span{x, y} homogeneous supplement
        gens.append((_poly(expo, {(2, 0): 1}), _poly(expo, {(1, 1): 1})))
        gens.append((_poly(expo, {(1, 1): 1}), _poly(expo, {(0, 2): 1})))
        dofs = []
        for e in range(3):
            dofs += _edge_flux_dofs("triangle", e, [0, 1])
        dofs += _interior_moment_dofs(
            "triangle",
            [lambda p: np.column_stack([np.ones(len(p)), np.zeros(len(p))]),
             lambda p: np.column_stack([np.zeros(len(p)), np.ones(len(p))])],
            degree_hint=2)
        return _build_from_dual("RT1", "triangle", "Hdiv", 2, expo,
                                _vec_span(expo, gens), dofs,
                                meta={"normal_trace_degree": 1})
    raise UnsupportedElementError(f"RT{sub} on triangle not supported")


def _bdm1_triangle():
    expo = monomial_exponents(2, 1, "P")
    z = _poly(expo, {})
    gens = []
    for mono in [(0, 0), (1, 0), (0, 1)]:
        gens.append((_poly(expo, {mono: 1}), z))
        gens.append((z, _poly(expo, {mono: 1})))
    dofs = []
    for e in range(3):
        dofs += _edge_flux_dofs("triangle", e, [0, 1])
    return _build_from_dual("BDM1", "triangle", "Hdiv", 1, expo,
                            _vec_span(expo, gens), dofs,
                            meta={"normal_trace_degree": 1})


def _bdfm1_triangle():
    """P2 vectors whose normal component is linear on each edge (dim 9).

    Edge DOFs are the usual linear normal moments; the three remaining
    functionals are constant tangential edge moments, kept cell-local since
    BDFM1 only carries normal continuity.
    """
    expo = monomial_exponents(2, 2, "P")
    nm = len(expo)
    full = np.zeros((2 * nm, 2, nm))
    for i in range(nm):
        full[i, 0, i] = 1.0
        full[nm + i, 1, i] = 1.0
    # constraints: quadratic Legendre moment of v.n on each edge vanishes
    verts = REF_VERTICES["triangle"]
    rows = []
    s, w = gauss01(4)
    for e, (i, j) in enumerate(REF_EDGES["triangle"]):
        a, b = verts[i], verts[j]
        t = b - a
        length = np.hypot(*t)
        nrm = np.array([t[1], -t[0]]) / length
        pts = a[None, :] + s[:, None] * t[None, :]
        mono = eval_monomials(expo, pts)
        vals = np.einsum("jcm,mp->jcp", full, mono)
        wt = (shifted_legendre(2, s) * w * length)[:, None] * nrm[None, :]
        rows.append(np.einsum("jcp,pc->j", vals, wt))
    A = np.array(rows)
    _, sv, vt = np.linalg.svd(A)
    null = vt[3:, :]  # 9 x 12
    gens = np.einsum("kj,jcm->kcm", null, full)
    dofs = []
    for e in range(3):
        dofs += _edge_flux_dofs("triangle", e, [0, 1])
    for e in range(3):
        dofs.append(_edge_tangent_dof("triangle", e, ("tang", e)))
    return _build_from_dual("BDFM1", "triangle", "Hdiv", 2, expo, gens, dofs,
                            meta={"normal_trace_degree": 1})


def _rtcf_quad(sub):
    if sub == 0:
        expo = monomial_exponents(2, 1, "Q")
        z = _poly(expo, {})
        gens = [
            (_poly(expo, {(0, 0): 1}), z),
            (_poly(expo, {(1, 0): 1}), z),
            (z, _poly(expo, {(0, 0): 1})),
            (z, _poly(expo, {(0, 1): 1})),
        ]
        dofs = []
        for e in range(4):
            dofs += _edge_flux_dofs("quad", e, [0])
        return _build_from_dual("RT0", "quad", "Hdiv", 1, expo,
                                _vec_span(expo, gens), dofs,
                                meta={"normal_trace_degree": 0})
    if sub == 1:
        expo = monomial_exponents(2, 3, "Q")
        z = _poly(expo, {})
        gens = []
        for i in range(3):
            for j in range(2):
                gens.append((_poly(expo, {(i, j): 1}), z))
        for i in range(2):
            for j in range(3):
                gens.append((z, _poly(expo, {(i, j): 1})))
        dofs = []
        for e in range(4):
            dofs += _edge_flux_dofs("quad", e, [0, 1])
        interior = [
            lambda p: np.column_stack([np.ones(len(p)), np.zeros(len(p))]),
            lambda p: np.column_stack([p[:, 1], np.zeros(len(p))]),
            lambda p: np.column_stack([np.zeros(len(p)), np.ones(len(p))]),
            lambda p: np.column_stack([np.zeros(len(p)), p[:, 0]]),
        ]
        dofs += _interior_moment_dofs("quad", interior, degree_hint=3)
        return _build_from_dual("RT1", "quad", "Hdiv", 3, expo,
                                _vec_span(expo, gens), dofs,
                                meta={"normal_trace_degree": 1})
    raise UnsupportedElementError(f"RT{sub} on quad not supported")


# ---------------------------------------------------------------------------
# tensor-product elements on prism / hex

def _combine_expo(h_expo, v_expo):
    """All products of horizontal (2d) and vertical (1d) monomials."""
    out = []
    index = {}
    for i, he in enumerate(h_expo):
        for j, ve in enumerate(v_expo):
            key = (he[0], he[1], ve[0])
            if key not in index:
                index[key] = len(out)
                out.append(key)
    return np.array(out, dtype=int), index


def _product_coeffs(h_coeffs, v_coeffs, h_expo, v_expo, expo_index, n_expo):
    """coefficients of (h poly) * (v poly) over the combined monomials."""
    out = np.zeros(n_expo)
    for i, he in enumerate(h_expo):
        if h_coeffs[i] == 0.0:
            continue
        for j, ve in enumerate(v_expo):
            if v_coeffs[j] == 0.0:
                continue
            out[expo_index[(he[0], he[1], ve[0])]] += h_coeffs[i] * v_coeffs[j]
    return out


def _hface_entity(shape, v_entity, v_idx):
    """Entity for a (horizontal base object) x (vertical node) pairing."""
    if v_entity == (0, 0):
        return (2, 0)        # bottom face
    if v_entity == (0, 1):
        return (2, 1)        # top face
    return (3, 0)            # vertical interior


def _tensor_points(h_pts, v_pts):
    return np.column_stack([
        np.repeat(h_pts, len(v_pts), axis=0),
        np.tile(v_pts[:, 0], len(h_pts))[:, None],
    ])


def _tensor_dof_scalar(h_dof, v_dof, entity, slot, rsign_exp=0):
    pts = _tensor_points(h_dof.points, v_dof.points)
    w = np.outer(h_dof.weights[:, 0], v_dof.weights[:, 0]).reshape(-1, 1)
    return Dof(entity, slot, pts, w, rsign_exp)


def tensor_h1(h_elem, v_elem, shape):
    """CG_r(T) x CG_s(S) scalar element (k = 0)."""
    expo, idx = _combine_expo(h_elem.expo, v_elem.expo)
    coeffs = []
    dofs = []
    for i in range(h_elem.ndofs):
        for j in range(v_elem.ndofs):
            coeffs.append(_product_coeffs(h_elem.coeffs[i, 0], v_elem.coeffs[j, 0],
                                          h_elem.expo, v_elem.expo, idx, len(expo)))
            hd, vd = h_elem.dofs[i], v_elem.dofs[j]
            entity, slot = _tensor_h1_entity(shape, hd, vd)
            dofs.append(_tensor_dof_scalar(hd, vd, entity, slot))
    coeffs = np.array(coeffs)[:, None, :]
    elem = ReferenceElement(f"{h_elem.name}x{v_elem.name}", shape, "H1",
                            h_elem.degree + v_elem.degree, expo, coeffs, dofs)
    elem.verify_dual_basis()
    return elem


def _tensor_h1_entity(shape, hd, vd):
    hdim, hidx = hd.entity
    vdim, vidx = vd.entity
    if vdim == 0:
        lvl = vidx  # 0 bottom, 1 top
        if hdim == 0:
            nv = 3 if shape == "prism" else 4
            return (0, hidx + lvl * nv), ("pt", 0)
        if hdim == 1:
            # horizontal edge of the bottom/top face
            return (1, ("h", hidx, lvl)), ("pt", 0)
        return (2, lvl), ("pt", hd.slot)
    # vertical interior node
    if hdim == 0:
        return (1, ("v", hidx)), ("pt", 0)
    if hdim == 1:
        return (2, 2 + hidx), ("pt", 0)
    return (3, 0), ("pt", (hd.slot, vd.slot))


def tensor_hdiv(h_hdiv, h_dg, v_cg, v_dg, shape):
    """[DG(T) zhat x CG_s] + [Hdiv(T) x DG_{s-1}]  (k = n-1).

    Vertical-block DOFs are point/moment evaluations of v.zhat paired with
    the vertical CG nodes; they carry no orientation sign because vertically
    adjacent cells share the base-cell parametrisation.  Horizontal-block
    DOFs are base-edge flux moments at the vertical DG nodes, inheriting the
    base edge's reversal sign.
    """
    expo, idx = _combine_expo(
        np.vstack([h_hdiv.expo, h_dg.expo]),
        np.vstack([v_cg.expo, v_dg.expo]))
    ne = len(expo)
    coeffs = []
    dofs = []
    nvert = 0
    # vertical block: (0,0,d_i c_j)
    for i in range(h_dg.ndofs):
        for j in range(v_cg.ndofs):
            cz = _product_coeffs(h_dg.coeffs[i, 0], v_cg.coeffs[j, 0],
                                 h_dg.expo, v_cg.expo, idx, ne)
            c = np.zeros((3, ne))
            c[2] = cz
            coeffs.append(c)
            hd, vd = h_dg.dofs[i], v_cg.dofs[j]
            entity = _hface_entity(shape, vd.entity, None)
            slot = ("zflx", hd.slot, vd.slot)
            pts = _tensor_points(hd.points, vd.points)
            w = np.zeros((len(pts), 3))
            w[:, 2] = np.outer(hd.weights[:, 0], vd.weights[:, 0]).reshape(-1)
            dofs.append(Dof(entity, slot, pts, w))
            nvert += 1
    # horizontal block: (w1 b, w2 b, 0)
    for i in range(h_hdiv.ndofs):
        for j in range(v_dg.ndofs):
            cx = _product_coeffs(h_hdiv.coeffs[i, 0], v_dg.coeffs[j, 0],
                                 h_hdiv.expo, v_dg.expo, idx, ne)
            cy = _product_coeffs(h_hdiv.coeffs[i, 1], v_dg.coeffs[j, 0],
                                 h_hdiv.expo, v_dg.expo, idx, ne)
            c = np.zeros((3, ne))
            c[0], c[1] = cx, cy
            coeffs.append(c)
            hd, vd = h_hdiv.dofs[i], v_dg.dofs[j]
            hdim, hidx = hd.entity
            pts = _tensor_points(hd.points, vd.points)
            w = np.zeros((len(pts), 3))
            w[:, :2] = np.repeat(hd.weights, len(vd.points), axis=0) \
                * np.tile(vd.weights[:, 0], len(hd.points))[:, None]
            if hdim == 1:
                entity = (2, 2 + hidx)
                slot = ("flux", hd.slot, vd.slot)
                rexp = hd.rsign_exp
            else:
                entity = (3, 0)
                slot = ("int", i, j)
                rexp = 0
            dofs.append(Dof(entity, slot, pts, w, rexp))
    coeffs = np.array(coeffs)
    name = f"Hdiv[{h_hdiv.name}x{v_dg.name}+{h_dg.name}^x{v_cg.name}]"
    meta = {"n_vertical": nvert,
            "v_block": (h_dg.name, v_cg.name),
            "factors": (h_hdiv, h_dg, v_cg, v_dg)}
    elem = ReferenceElement(name, shape, "Hdiv",
                            max(h_hdiv.degree + v_dg.degree,
                                h_dg.degree + v_cg.degree), expo, coeffs, dofs, meta)
    elem.verify_dual_basis()
    return elem


def tensor_hdiv_vertical(h_dg, v_cg, shape):
    """The vertical sub-block V^{2,v} = DG(T) zhat x CG(S) as its own element."""
    expo, idx = _combine_expo(h_dg.expo, v_cg.expo)
    ne = len(expo)
    coeffs = []
    dofs = []
    for i in range(h_dg.ndofs):
        for j in range(v_cg.ndofs):
            cz = _product_coeffs(h_dg.coeffs[i, 0], v_cg.coeffs[j, 0],
                                 h_dg.expo, v_cg.expo, idx, ne)
            c = np.zeros((3, ne))
            c[2] = cz
            coeffs.append(c)
            hd, vd = h_dg.dofs[i], v_cg.dofs[j]
            entity = _hface_entity(shape, vd.entity, None)
            slot = ("zflx", hd.slot, vd.slot)
            pts = _tensor_points(hd.points, vd.points)
            w = np.zeros((len(pts), 3))
            w[:, 2] = np.outer(hd.weights[:, 0], vd.weights[:, 0]).reshape(-1)
            dofs.append(Dof(entity, slot, pts, w))
    coeffs = np.array(coeffs)
    meta = {"v_block": (h_dg.name, v_cg.name), "factors": (h_dg, v_cg)}
    elem = ReferenceElement(f"HdivVert[{h_dg.name}x{v_cg.name}]", shape, "Hdiv",
                            h_dg.degree + v_cg.degree, expo, coeffs, dofs, meta)
    elem.verify_dual_basis()
    return elem


def tensor_hcurl(h_hdiv, h_cg, v_cg, v_dg, shape):
    """[rot(Hdiv(T)) x CG_s] + [CG_r(T) x DG_{s-1} zhat]  (k = 1).

    Used for reference-level complex checks and broken L2 projections only,
    so DOFs are not constructed (no global H(curl) assembly is in scope).
    """
    expo, idx = _combine_expo(
        np.vstack([h_hdiv.expo, h_cg.expo]),
        np.vstack([v_cg.expo, v_dg.expo]))
    ne = len(expo)
    coeffs = []
    for i in range(h_hdiv.ndofs):
        for j in range(v_cg.ndofs):
            cx = _product_coeffs(h_hdiv.coeffs[i, 1], v_cg.coeffs[j, 0],
                                 h_hdiv.expo, v_cg.expo, idx, ne)
            cy = _product_coeffs(-h_hdiv.coeffs[i, 0], v_cg.coeffs[j, 0],
                                 h_hdiv.expo, v_cg.expo, idx, ne)
            c = np.zeros((3, ne))
            c[0], c[1] = cx, cy
            coeffs.append(c)
    for i in range(h_cg.ndofs):
        for j in range(v_dg.ndofs):
            cz = _product_coeffs(h_cg.coeffs[i, 0], v_dg.coeffs[j, 0],
                                 h_cg.expo, v_dg.expo, idx, ne)
            c = np.zeros((3, ne))
            c[2] = cz
            coeffs.append(c)
    coeffs = np.array(coeffs)
    name = f"Hcurl[rot{h_hdiv.name}x{v_cg.name}+{h_cg.name}x{v_dg.name}z]"
    return ReferenceElement(name, shape, "Hcurl",
                            max(h_hdiv.degree + v_cg.degree,
                                h_cg.degree + v_dg.degree),
                            expo, coeffs, None, {"broken_only": True})


def tensor_l2(h_dg, v_dg, shape):
    expo, idx = _combine_expo(h_dg.expo, v_dg.expo)
    coeffs = []
    dofs = []
    k = 0
    for i in range(h_dg.ndofs):
        for j in range(v_dg.ndofs):
            coeffs.append(_product_coeffs(h_dg.coeffs[i, 0], v_dg.coeffs[j, 0],
                                          h_dg.expo, v_dg.expo, idx, len(expo)))
            hd, vd = h_dg.dofs[i], v_dg.dofs[j]
            dofs.append(_tensor_dof_scalar(hd, vd, (3, 0), ("pt", k)))
            k += 1
    coeffs = np.array(coeffs)[:, None, :]
    elem = ReferenceElement(f"{h_dg.name}x{v_dg.name}", shape, "L2",
                            h_dg.degree + v_dg.degree, expo, coeffs, dofs)
    elem.verify_dual_basis()
    return elem


def temperature_space(v2v_elem):
    """Scalar V^t with the DOF layout of the vertical H(div) block.

    The pullback is plain composition (H1-in-the-vertical scalar rule), not
    Piola; continuity is vertical-only.
    """
    if v2v_elem.continuity != "Hdiv" or "v_block" not in v2v_elem.meta:
        raise UnsupportedElementError(
            "temperature_space expects the vertical block of a tensor HDiv element")
    coeffs = v2v_elem.coeffs[:, 2:3, :]
    if np.any(np.abs(v2v_elem.coeffs[:, :2, :]) > 1e-14):
        raise UnsupportedElementError("input is not a purely vertical block")
    dofs = []
    for d in v2v_elem.dofs:
        w = d.weights[:, 2:3].copy()
        dofs.append(Dof(d.entity, ("vt",) + d.slot[1:], d.points, w))
    elem = ReferenceElement(f"Vt[{v2v_elem.meta['v_block'][0]}x"
                            f"{v2v_elem.meta['v_block'][1]}]",
                            v2v_elem.shape, "Vt", v2v_elem.degree,
                            v2v_elem.expo, coeffs, dofs,
                            {"v_block": v2v_elem.meta["v_block"]})
    elem.verify_dual_basis()
    return elem


# ---------------------------------------------------------------------------
# named constructors, families, complexes

@dataclass
class PolyFamily:
    family: str        # CG | DG | RT | BDM | BDFM | E | Eminus
    r: int = 1
    s: int = 1
    k: int = 0


_2D_BUILDERS = {
    ("CG", 1): lambda shape: (_cg_interval(1) if shape == "interval"
                              else _lagrange_2d(shape, 1)),
    ("CG", 2): lambda shape: (_cg_interval(2) if shape == "interval"
                              else _lagrange_2d(shape, 2)),
    ("DG", 0): lambda shape: (_dg_interval(0) if shape == "interval"
                              else _dg_2d(shape, 0)),
    ("DG", 1): lambda shape: (_dg_interval(1) if shape == "interval"
                              else _dg_2d(shape, 1)),
}

_ELEMENT_CACHE = {}


def build_reference_element(fam, shape):
    """Build (and cache) a named reference element."""
    key = (fam.family, fam.r, fam.s, fam.k, shape)
    if key in _ELEMENT_CACHE:
        return _ELEMENT_CACHE[key]
    elem = _build_reference_element(fam, shape)
    _ELEMENT_CACHE[key] = elem
    return elem


def _build_reference_element(fam, shape):
    f = fam.family
    if f in ("CG", "DG"):
        try:
            return _2D_BUILDERS[(f, fam.r)](shape)
        except KeyError:
            raise UnsupportedElementError(f"{f}{fam.r} on {shape}")
    if f == "CG2B":
        return _lagrange_2d("triangle", 2, bubble=True)
    if f == "VectorCG":
        return _vector_lagrange(shape, fam.r)
    if f == "RT":
        if shape == "triangle":
            return _rt_triangle(fam.r)
        if shape == "quad":
            return _rtcf_quad(fam.r)
        raise UnsupportedElementError(f"RT{fam.r} on {shape}")
    if f == "BDM":
        if shape == "triangle" and fam.r == 1:
            return _bdm1_triangle()
        raise UnsupportedElementError(f"BDM{fam.r} on {shape}")
    if f == "BDFM":
        if shape == "triangle" and fam.r == 1:
            return _bdfm1_triangle()
        raise UnsupportedElementError(f"BDFM{fam.r} on {shape}")
    if f in ("E", "Eminus"):
        return _tensor_family_element(f, fam.r, fam.s, fam.k, shape)
    raise UnsupportedElementError(f"unknown family {f!r}")


def element_from_name(name, shape):
    """Parse CLI-style element names: CG1, RT0, BDM1, E(2,1,3), Eminus(1,1,0)."""
    name = name.strip()
    if "(" in name:
        fam, rest = name.split("(", 1)
        nums = [int(t) for t in rest.rstrip(")").split(",")]
        return build_reference_element(PolyFamily(fam, *nums), shape)
    for prefix in ("CG2B", "BDFM", "BDM", "CG", "DG", "RT"):
        if name.startswith(prefix) and name != prefix:
            deg = int(name[len(prefix):])
            return build_reference_element(PolyFamily(prefix, deg), shape)
        if name == "CG2B":
            return build_reference_element(PolyFamily("CG2B"), shape)
    raise UnsupportedElementError(f"cannot parse element name {name!r}")


def horizontal_complex(family, shape):
    """(V0, V1, V2) triple on triangle or quad, by CLI family name."""
    if shape == "triangle":
        table = {
            "RT0": ("CG1", "RT0", "DG0"),
            "RT1": ("CG2", "RT1", "DG1"),
            "BDM1": ("CG2", "BDM1", "DG0"),
            "BDFM1": ("CG2B", "BDFM1", "DG1"),
        }
    elif shape == "quad":
        table = {
            "RT0": ("CG1", "RT0", "DG0"),
            "RT1": ("CG2", "RT1", "DG1"),
        }
    else:
        raise UnsupportedElementError(f"no 2D complex on {shape}")
    if family not in table:
        raise UnsupportedElementError(f"family {family!r} on {shape}")
    return tuple(element_from_name(n, shape) for n in table[family])


def interval_complex(s):
    return (build_reference_element(PolyFamily("CG", s), "interval"),
            build_reference_element(PolyFamily("DG", s - 1), "interval"))


def _tensor_factors(family, r, s, shape):
    base = BASE_SHAPE[shape]
    if family == "Eminus":
        h_cg = _2D_BUILDERS[("CG", r)](base)
        h_hdiv = _rt_triangle(r - 1) if base == "triangle" else _rtcf_quad(r - 1)
        h_dg = _2D_BUILDERS[("DG", r - 1)](base)
    else:  # E family: (CG_r, BDM_{r-1}, DG_{r-2}) on triangles
        if base != "triangle":
            raise UnsupportedElementError("E family needs a triangle base (BDM)")
        if r != 2:
            raise UnsupportedElementError("E family supported for r = 2 only")
        h_cg = _lagrange_2d("triangle", 2)
        h_hdiv = _bdm1_triangle()
        h_dg = _dg_2d("triangle", 0)
    v_cg, v_dg = interval_complex(s)
    return h_cg, h_hdiv, h_dg, v_cg, v_dg


def _tensor_family_element(family, r, s, k, shape):
    if shape not in ("prism", "hex"):
        raise UnsupportedElementError("tensor families live on prism/hex")
    if not (1 <= s <= 2) or not (1 <= r <= 2):
        raise UnsupportedElementError("tensor degrees r,s must be 1 or 2")
    h_cg, h_hdiv, h_dg, v_cg, v_dg = _tensor_factors(family, r, s, shape)
    if k == 0:
        return tensor_h1(h_cg, v_cg, shape)
    if k == 1:
        return tensor_hcurl(h_hdiv, h_cg, v_cg, v_dg, shape)
    if k == 2:
        return tensor_hdiv(h_hdiv, h_dg, v_cg, v_dg, shape)
    if k == 3:
        return tensor_l2(h_dg, v_dg, shape)
    raise UnsupportedElementError(f"complex degree k={k}")


def tensor_complex(family, r, s, shape):
    """Full (V0, V1, V2, V3) tensor complex plus V^{2,v} and V^t."""
    h_cg, h_hdiv, h_dg, v_cg, v_dg = _tensor_factors(family, r, s, shape)
    V0 = tensor_h1(h_cg, v_cg, shape)
    V1 = tensor_hcurl(h_hdiv, h_cg, v_cg, v_dg, shape)
    V2 = tensor_hdiv(h_hdiv, h_dg, v_cg, v_dg, shape)
    V3 = tensor_l2(h_dg, v_dg, shape)
    V2v = tensor_hdiv_vertical(h_dg, v_cg, shape)
    Vt = temperature_space(V2v)
    return {"V0": V0, "V1": V1, "V2": V2, "V3": V3, "V2v": V2v, "Vt": Vt}


# ---------------------------------------------------------------------------
# pullbacks and reference derivatives

def pullback(k, n, reference_values, J, detJ):
    """Physical values of reference values under the k-form pullback.

    reference_values: [..., ncomp] at a single point; J: [n_amb, n_ref];
    detJ scalar.  k=0: composition; k=n: value/det; k=n-1 (Hdiv): J v/det;
    k=1 with n=3 (Hcurl): J^{-T} v.
    """
    v = np.asarray(reference_values, dtype=float)
    if np.ndim(detJ) == 0 and detJ <= 0:
        raise ValueError("pullback requires detJ > 0")
    if k == 0:
        return v
    if k == n:
        return v / detJ
    if k == n - 1:
        return (J @ v) / detJ
    if k == 1 and n == 3:
        return np.linalg.solve(J.T, v)
    raise ValueError(f"no pullback rule for k={k}, n={n}")


def reference_derivative(op, elem, pts):
    """Apply a reference-level derivative to every basis function.

    op: 'grad' (scalar->vector), 'perp_grad' (scalar->2d vector),
        'div' (vector->scalar), 'curl3d' (3d vector->3d vector),
        'dx' (1d derivative).
    Returns [ndof, ncomp_out, npts].
    """
    g = elem.tabulate_grad(pts)  # [ndof, ncomp, d, npts]
    if op == "grad":
        return g[:, 0, :, :]
    if op == "perp_grad":
        return np.stack([-g[:, 0, 1, :], g[:, 0, 0, :]], axis=1)
    if op == "div":
        return np.einsum("kddp->kp", g)[:, None, :]
    if op == "dx":
        return g[:, 0, :, :]
    if op == "curl3d":
        return np.stack([
            g[:, 2, 1, :] - g[:, 1, 2, :],
            g[:, 0, 2, :] - g[:, 2, 0, :],
            g[:, 1, 0, :] - g[:, 0, 1, :],
        ], axis=1)
    raise ValueError(op)


def expand_in_basis(elem, values, pts, rcond=None):
    """Least-squares expansion of values [m, ncomp, npts] in elem's basis.

    Returns (coeffs [m, ndof], residual) where residual is the max L2-norm
    mismatch over the sample points — the compatibility check of the complex.
    """
    tab = elem.tabulate(pts)  # [ndof, ncomp, npts]
    A = tab.reshape(elem.ndofs, -1).T
    B = values.reshape(values.shape[0], -1).T
    sol, *_ = np.linalg.lstsq(A, B, rcond=rcond)
    resid = A @ sol - B
    scale = max(1.0, np.max(np.abs(B)))
    return sol.T, float(np.max(np.abs(resid)) / scale)


def reference_derivative_matrix(elem_a, elem_b, op):
    """D with d(basis_a[i]) = sum_j D[i,j] basis_b[j], plus the expansion residual.

    The residual certifies the complex property d(V^k) subset V^{k+1}; it is
    geometry-independent because every pullback in scope commutes with d.
    """
    q = quadrature_rule(elem_b.shape, 2 * max(elem_a.degree, elem_b.degree) + 2)
    dv = reference_derivative(op, elem_a, q.points)
    return expand_in_basis(elem_b, dv, q.points)


COMPLEX_OPS = {
    (1, 0): "dx",
    (2, 0): "perp_grad",
    (2, 1): "div",
    (3, 0): "grad",
    (3, 1): "curl3d",
    (3, 2): "div",
}
