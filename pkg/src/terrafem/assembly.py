"""Function spaces, fields, and assembly of cell/facet forms.

Forms are declared through a small fixed vocabulary of cell terms
(products of value/grad/perp/div/broken-grad of test, trial and
coefficient legs) plus dedicated interior-facet assemblers (jump, average,
upwind-trace, trace-space pairings).  Every weak form in scope fits these
shapes; there is deliberately no general form compiler.

Assembly runs in cell batches: reference tabulations are cached per
element/quadrature, geometry is evaluated per batch, and contributions are
scattered through scipy COO summation, which is deterministic for a fixed
cell order.
"""

import numpy as np
import scipy.sparse as sp

from .element import Dof
from .mesh import FacetGeometry, facet_embedding, facet_quadrature
from .quadrature import quadrature_rule

CHUNK = 512


class AssemblyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# function spaces

class FunctionSpace:
    """Mesh x reference element with global, orientation-signed DOF numbering."""

    def __init__(self, mesh, element, broken=False, mean_free=False):
        self.mesh = mesh
        self.element = element
        self.broken = broken
        self.mean_free = mean_free
        self.trace = False
        self._one = None
        self._build_dofmap()

    def _build_dofmap(self):
        mesh, elem = self.mesh, self.element
        if elem.dofs is None and not self.broken:
            raise AssemblyError(f"{elem.name} is broken-only (no dual basis)")
        nloc = elem.ndofs
        C = mesh.n_cells
        self.cell_dofs = np.empty((C, nloc), dtype=int)
        self.cell_signs = np.ones((C, nloc))
        table = {}

        def number(key):
            if key not in table:
                table[key] = len(table)
            return table[key]

        dofs = elem.dofs if elem.dofs is not None else [
            Dof((mesh.dim, 0), ("pt", i), np.zeros((1, elem.ref_dim)),
                np.zeros((1, elem.ncomp))) for i in range(nloc)]
        for c in range(C):
            for i, dof in enumerate(dofs):
                edim, eidx = dof.entity
                sign = 1.0
                if self.broken or edim == mesh.dim:
                    key = ("c", c, i)
                elif edim == mesh.dim - 1:
                    fid = mesh.cell_facets[c, eidx]
                    key = ("f", fid, dof.slot)
                    if dof.rsign_exp:
                        side = mesh.cell_facet_side[c, eidx]
                        tau = 1.0
                        if side < 0 and mesh.facets.reversed_m[fid]:
                            tau = -1.0
                        if side < 0:
                            # '-' side sees the canonical ('+') normal flipped
                            sign = (-1.0) * tau ** (dof.rsign_exp - 1)
                        else:
                            sign = 1.0
                elif edim == 0:
                    key = ("v", int(mesh.cells[c, eidx]), dof.slot)
                elif edim == 1 and mesh.dim == 3:
                    key = ("e", mesh.edge3d_id(c, eidx), dof.slot)
                else:
                    raise AssemblyError(f"cannot number entity {dof.entity}")
                self.cell_dofs[c, i] = number(key)
                self.cell_signs[c, i] = sign
        self.ndofs = len(table)

    @property
    def ncomp(self):
        return self.element.ncomp

    def new_field(self, coeffs=None):
        if coeffs is None:
            coeffs = np.zeros(self.ndofs)
        return Field(self, np.asarray(coeffs, dtype=float))

    def one(self):
        """L2 projection of the constant 1 (used for exact mean removal)."""
        if self._one is None:
            if self.ncomp != 1:
                raise AssemblyError("one() is for scalar spaces")
            self._one = project(self, lambda X: np.ones(X.shape[:-1]))
        return self._one

    def __repr__(self):
        tag = " broken" if self.broken else ""
        return f"<FunctionSpace {self.element.name}{tag}: {self.ndofs} dofs>"


class Field:
    """Coefficient vector over a FunctionSpace."""

    def __init__(self, space, coeffs):
        if len(coeffs) != space.ndofs:
            raise AssemblyError("coefficient length mismatch")
        self.space = space
        self.coeffs = np.asarray(coeffs, dtype=float)

    def copy(self):
        return Field(self.space, self.coeffs.copy())

    def eval(self, cells, quad, op="val"):
        """Values (or derived quantities) at quadrature points: [C, comp, q]."""
        tab = physical_tables(self.space, cells, quad, op)
        local = self.coeffs[self.space.cell_dofs[cells]] \
            * self.space.cell_signs[cells]
        return np.einsum("ci,ci...q->c...q", local, tab)

    def integral(self):
        L = integral_functional(self.space)
        return float(L @ self.coeffs)

    def remove_mean(self):
        one = self.space.one()
        L = integral_functional(self.space)
        vol = float(L @ one.coeffs)
        self.coeffs -= (float(L @ self.coeffs) / vol) * one.coeffs
        return self

    def norm_l2(self):
        M = assemble_mass(self.space).mat
        return float(np.sqrt(max(self.coeffs @ (M @ self.coeffs), 0.0)))


class SparseOperator:
    """Assembled bilinear form with row/col spaces and CSR storage."""

    def __init__(self, mat, row_space=None, col_space=None):
        self.mat = mat.tocsr()
        self.row_space = row_space
        self.col_space = col_space

    def matvec(self, x):
        return self.mat @ x

    __matmul__ = matvec

    @property
    def shape(self):
        return self.mat.shape

    def symmetry_defect(self):
        d = self.mat - self.mat.T
        return np.max(np.abs(d.data)) if d.nnz else 0.0

    def todense(self):
        return self.mat.toarray()

    def dump(self, path):
        coo = self.mat.tocoo()
        with open(path, "w") as fh:
            for r, c, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r} {c} {v!r}\n")


def unwrap(op):
    return op.mat if isinstance(op, SparseOperator) else op


# ---------------------------------------------------------------------------
# tabulation

_REF_CACHE = {}


def _ref_tab(elem, quad, kind):
    key = (id(elem), kind, quad.points.tobytes())
    if key not in _REF_CACHE:
        if kind == "val":
            _REF_CACHE[key] = elem.tabulate(quad.points)
        else:
            _REF_CACHE[key] = elem.tabulate_grad(quad.points)
    return _REF_CACHE[key]


def _perp_apply(vals, mesh, cells, quad):
    """zhat x v on planar meshes, nhat x v on embedded surfaces."""
    if mesh.adim == 2:
        out = np.empty_like(vals)
        out[:, :, 0] = -vals[:, :, 1]
        out[:, :, 1] = vals[:, :, 0]
        return out
    n = mesh.cell_normals(cells, quad.points)  # [C,q,3]
    return np.cross(n[:, None], np.moveaxis(vals, -1, -2)).swapaxes(-1, -2)


def physical_tables(space, cells, quad, op):
    """Physical basis tables [C, ndof, comp..., q] for an op on this space.

    ops: val, grad (broken where discontinuous), pgrad (perp of grad),
    div, perp, dz (vertical derivative), gradtensor (affine cells only).
    """
    mesh, elem = space.mesh, space.element
    cont = elem.continuity
    X, J, detJ, Jinv = mesh.geometry(cells, quad.points)
    C, q = detJ.shape

    if cont in ("H1", "Vt", "L2") and elem.ncomp == 1:
        ref = _ref_tab(elem, quad, "val")[:, 0, :]  # [i,q]
        if op == "val":
            v = np.broadcast_to(ref, (C,) + ref.shape)
            if cont == "L2":
                v = v / detJ[:, None, :]
            return v[:, :, None, :]
        if op in ("grad", "pgrad", "dz"):
            g = _ref_tab(elem, quad, "grad")[:, 0, :, :]  # [i,d,q]
            if cont == "L2":
                return _l2_vertical_derivative(space, cells, quad, J, detJ, Jinv, op)
            grad = np.einsum("cqda,idq->ciaq", Jinv, g)
            if op == "grad":
                return grad
            if op == "pgrad":
                return _perp_apply(grad, mesh, cells, quad)
            rhat = _vertical_unit(J)
            return np.einsum("cqa,ciaq->ciq", rhat, grad)[:, :, None, :]
        raise AssemblyError(f"op {op!r} on scalar {cont}")

    if cont == "Hdiv":
        refv = _ref_tab(elem, quad, "val")  # [i,c,q]
        if op == "val" or op == "perp":
            v = np.einsum("cqgd,idq->cigq", J, refv) / detJ[:, None, None, :]
            if op == "perp":
                v = _perp_apply(v, mesh, cells, quad)
            return v
        if op == "div":
            g = _ref_tab(elem, quad, "grad")  # [i,c,d,q]
            divr = np.einsum("iddq->iq", g)
            return (divr[None, :, :] / detJ[:, None, :])[:, :, None, :]
        if op == "gradtensor":
            if mesh.map_class != "affine":
                raise AssemblyError("gradtensor needs affine cells")
            g = _ref_tab(elem, quad, "grad")
            return np.einsum("cqgd,iedq,cqeb->cigbq", J, g, Jinv) \
                / detJ[:, None, None, None, :]
        raise AssemblyError(f"op {op!r} on Hdiv")

    if cont == "Hcurl":
        if op == "val":
            refv = _ref_tab(elem, quad, "val")
            return np.einsum("cqda,idq->ciaq", Jinv, refv)
        raise AssemblyError(f"op {op!r} on Hcurl")

    if cont == "H1" and elem.ncomp == 2:  # vector Lagrange
        refv = _ref_tab(elem, quad, "val")
        if op == "val":
            return np.broadcast_to(refv, (C,) + refv.shape)
        if op == "div":
            g = _ref_tab(elem, quad, "grad")  # [i, comp, d, q]
            div = np.einsum("cqda,iadq->ciq", Jinv, g)
            return div[:, :, None, :]
        raise AssemblyError(f"op {op!r} on vector H1")

    raise AssemblyError(f"unsupported space {elem.name} for op {op!r}")


def _vertical_unit(J):
    r = J[..., :, -1]
    return r / np.linalg.norm(r, axis=-1, keepdims=True)


def _l2_vertical_derivative(space, cells, quad, J, detJ, Jinv, op):
    """d/dz of an L2 (1/det pulled back) field on columnar meshes.

    Valid because det J is independent of the vertical reference coordinate
    when side walls are vertical, so d/dz (v/det) = (d_zeta v) / (det * dz/dzeta).
    """
    mesh, elem = space.mesh, space.element
    if op != "dz":
        raise AssemblyError("only the vertical derivative is defined for L2 fields")
    if mesh.map_class not in ("affine", "invariant_base"):
        raise AssemblyError("vertical derivative of L2 fields needs columnar cells")
    g = _ref_tab(elem, quad, "grad")[:, 0, :, :]  # [i,d,q]
    dz = J[..., -1, -1]  # dz/dzeta, vertical stretch
    return (g[None, :, -1, :] / (detJ * dz)[:, None, :])[:, :, None, :]


# ---------------------------------------------------------------------------
# coefficient evaluation helpers (the small fixed interpreter)

def as_coeff(c, cells, quad, mesh):
    """Scalar coefficient at quadrature points -> [C, q] (or None)."""
    if c is None:
        return None
    if isinstance(c, Field):
        return c.eval(cells, quad, "val")[:, 0, :]
    if np.isscalar(c):
        return np.full((len(cells), quad.npoints), float(c))
    if callable(c):
        X, _, _, _ = mesh.geometry(cells, quad.points)
        return np.asarray(c(X))
    raise AssemblyError(f"bad coefficient {c!r}")


def as_vcoeff(c, cells, quad, mesh):
    """Vector coefficient at quadrature points -> [C, a, q].

    Accepts a Field, a (Field, op) pair, a callable X -> [C, q, a], or a raw
    [C, a, q] array.
    """
    if isinstance(c, Field):
        return c.eval(cells, quad, "val")
    if isinstance(c, tuple) and isinstance(c[0], Field):
        fld, op = c
        return fld.eval(cells, quad, op)
    if callable(c):
        X, _, _, _ = mesh.geometry(cells, quad.points)
        return np.moveaxis(np.asarray(c(X)), -1, 1)
    if isinstance(c, np.ndarray):
        return c
    raise AssemblyError(f"bad vector coefficient {c!r}")


class CellTerm:
    """One cell integral: contract(op(test), op(trial)) * coeff [* vcoeff]."""

    def __init__(self, test_op, trial_op=None, coeff=None, vcoeff=None, scale=1.0):
        self.test_op = test_op
        self.trial_op = trial_op
        self.coeff = coeff
        self.vcoeff = vcoeff
        self.scale = scale


def default_degree(*elems, extra=0):
    return 2 * max(e.degree for e in elems) + 2 + extra


def assemble(test, trial, terms, qdeg=None, chunk=CHUNK):
    """Assemble a bilinear form into CSR."""
    mesh = test.mesh
    if qdeg is None:
        qdeg = default_degree(test.element, trial.element)
    quad = quadrature_rule(mesh.cell_shape, qdeg)
    rows, cols, vals = [], [], []
    allc = np.arange(mesh.n_cells)
    for s in range(0, mesh.n_cells, chunk):
        cells = allc[s:s + chunk]
        _, _, detJ, _ = mesh.geometry(cells, quad.points)
        wdet = detJ * quad.weights[None, :]
        loc = None
        for t in terms:
            Ta = physical_tables(test, cells, quad, t.test_op)
            Tb = physical_tables(trial, cells, quad, t.trial_op)
            w = wdet * t.scale
            cf = as_coeff(t.coeff, cells, quad, mesh)
            if cf is not None:
                w = w * cf
            if t.vcoeff is not None:
                vc = as_vcoeff(t.vcoeff, cells, quad, mesh)
                if Ta.shape[2] > 1 and Tb.shape[2] == 1:
                    Ta = np.einsum("ciaq,caq->ciq", Ta, vc)[:, :, None, :]
                elif Tb.shape[2] > 1 and Ta.shape[2] == 1:
                    Tb = np.einsum("cjaq,caq->cjq", Tb, vc)[:, :, None, :]
                else:
                    raise AssemblyError("vcoeff needs a vector x scalar pairing")
            if Ta.shape[2] != Tb.shape[2]:
                raise AssemblyError("component mismatch in term")
            contrib = np.einsum("ciaq,cjaq,cq->cij", Ta, Tb, w)
            loc = contrib if loc is None else loc + contrib
        loc *= test.cell_signs[cells][:, :, None] * trial.cell_signs[cells][:, None, :]
        r = np.broadcast_to(test.cell_dofs[cells][:, :, None], loc.shape)
        c = np.broadcast_to(trial.cell_dofs[cells][:, None, :], loc.shape)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(loc.ravel())
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(test.ndofs, trial.ndofs)).tocsr()
    return SparseOperator(mat, test, trial)


def assemble_vector(test, terms, qdeg=None, chunk=CHUNK):
    mesh = test.mesh
    if qdeg is None:
        qdeg = default_degree(test.element, extra=2)
    quad = quadrature_rule(mesh.cell_shape, qdeg)
    out = np.zeros(test.ndofs)
    allc = np.arange(mesh.n_cells)
    for s in range(0, mesh.n_cells, chunk):
        cells = allc[s:s + chunk]
        _, _, detJ, _ = mesh.geometry(cells, quad.points)
        wdet = detJ * quad.weights[None, :]
        loc = None
        for t in terms:
            Ta = physical_tables(test, cells, quad, t.test_op)
            w = wdet * t.scale
            cf = as_coeff(t.coeff, cells, quad, mesh)
            if cf is not None:
                w = w * cf
            if t.vcoeff is not None:
                vc = as_vcoeff(t.vcoeff, cells, quad, mesh)
                contrib = np.einsum("ciaq,caq,cq->ci", Ta, vc, w)
            else:
                if Ta.shape[2] != 1:
                    raise AssemblyError("vector test needs a vcoeff")
                contrib = np.einsum("ciq,cq->ci", Ta[:, :, 0, :], w)
            loc = contrib if loc is None else loc + contrib
        loc *= test.cell_signs[cells]
        np.add.at(out, test.cell_dofs[cells].ravel(), loc.ravel())
    return out


def integrate(mesh, fn, qdeg=8):
    """Integral of fn(X) over the mesh."""
    quad = quadrature_rule(mesh.cell_shape, qdeg)
    total = 0.0
    allc = np.arange(mesh.n_cells)
    for s in range(0, mesh.n_cells, CHUNK):
        cells = allc[s:s + CHUNK]
        X, _, detJ, _ = mesh.geometry(cells, quad.points)
        total += float(np.sum(fn(X) * detJ * quad.weights[None, :]))
    return total


def integrate_fields(expr, spaces_fields, qdeg=None, chunk=CHUNK):
    """Integral of expr(ctx) where ctx maps names to field values at quads."""
    names = list(spaces_fields)
    mesh = spaces_fields[names[0]][0].space.mesh
    if qdeg is None:
        qdeg = default_degree(*[spaces_fields[n][0].space.element for n in names],
                              extra=4)
    quad = quadrature_rule(mesh.cell_shape, qdeg)
    total = 0.0
    allc = np.arange(mesh.n_cells)
    for s in range(0, mesh.n_cells, chunk):
        cells = allc[s:s + chunk]
        _, _, detJ, _ = mesh.geometry(cells, quad.points)
        ctx = {}
        for name, (fld, op) in spaces_fields.items():
            ctx[name] = fld.eval(cells, quad, op)
        total += float(np.sum(expr(ctx) * detJ * quad.weights[None, :]))
    return total


def assemble_mass(space, coeff=None, qdeg=None):
    """Mass matrix, optionally weighted by a scalar coefficient field."""
    if qdeg is None:
        extra = 2 if coeff is not None else 0
        qdeg = default_degree(space.element, extra=extra)
    return assemble(space, space, [CellTerm("val", "val", coeff=coeff)], qdeg)


def integral_functional(space, qdeg=None):
    return assemble_vector(space, [CellTerm("val")], qdeg)


def project(space, fn, qdeg=None):
    """L2 projection of a callable fn(X) (scalar or vector) into the space."""
    from scipy.sparse.linalg import splu
    if not hasattr(space, "_mass_lu"):
        M = assemble_mass(space).mat
        space._mass_lu = splu(M.tocsc())
    if qdeg is None:
        qdeg = default_degree(space.element, extra=4)
    if space.ncomp == 1:
        rhs = assemble_vector(space, [CellTerm("val", coeff=fn)], qdeg)
    else:
        rhs = assemble_vector(space, [CellTerm("val", vcoeff=fn)], qdeg)
    return space.new_field(space._mass_lu.solve(rhs))


def projection_error(space, fn, field=None, qdeg=None):
    """L2 distance between fn and its projection (over-integrated)."""
    if field is None:
        field = project(space, fn)
    mesh = space.mesh
    if qdeg is None:
        qdeg = default_degree(space.element, extra=4)
    quad = quadrature_rule(mesh.cell_shape, qdeg)
    total = 0.0
    allc = np.arange(mesh.n_cells)
    for s in range(0, mesh.n_cells, CHUNK):
        cells = allc[s:s + CHUNK]
        X, _, detJ, _ = mesh.geometry(cells, quad.points)
        vals = field.eval(cells, quad, "val")
        target = np.asarray(fn(X))
        if space.ncomp == 1:
            diff = vals[:, 0, :] - target
            total += float(np.sum(diff ** 2 * detJ * quad.weights[None, :]))
        else:
            tv = np.moveaxis(target, -1, 1)
            diff = vals - tv
            total += float(np.sum(np.sum(diff ** 2, axis=1) * detJ
                                  * quad.weights[None, :]))
    return float(np.sqrt(total)), field


# ---------------------------------------------------------------------------
# exact discrete derivative matrices

_DERIV_CACHE = {}


def derivative_matrix(space_a, space_b, op):
    """Exact coefficient-level derivative map d: space_a -> space_b.

    Uses the reference-level expansion (pullbacks commute with d), assembled
    with orientation signs and verified consistent on shared DOFs.
    """
    from .element import reference_derivative_matrix
    key = (id(space_a), id(space_b), op)
    if key in _DERIV_CACHE:
        return _DERIV_CACHE[key]
    D_ref, resid = reference_derivative_matrix(space_a.element, space_b.element, op)
    if resid > 1e-9:
        raise AssemblyError(
            f"derivative of {space_a.element.name} leaves {space_b.element.name} "
            f"(residual {resid:.2e})")
    entries = {}
    A, B = space_a, space_b
    for c in range(space_a.mesh.n_cells):
        da, sa = A.cell_dofs[c], A.cell_signs[c]
        db, sb = B.cell_dofs[c], B.cell_signs[c]
        loc = (sa[:, None] * D_ref) * sb[None, :]
        for j in range(len(db)):
            for i in range(len(da)):
                v = loc[i, j]
                if abs(v) < 1e-13:
                    continue
                k = (db[j], da[i])
                if k in entries:
                    if abs(entries[k] - v) > 1e-9 * max(1.0, abs(v)):
                        raise AssemblyError("inconsistent derivative across cells")
                else:
                    entries[k] = v
    if entries:
        ks = np.array(list(entries))
        vs = np.array(list(entries.values()))
        mat = sp.coo_matrix((vs, (ks[:, 0], ks[:, 1])),
                            shape=(B.ndofs, A.ndofs)).tocsr()
    else:
        mat = sp.csr_matrix((B.ndofs, A.ndofs))
    op_ = SparseOperator(mat, B, A)
    _DERIV_CACHE[key] = op_
    return op_


# ---------------------------------------------------------------------------
# facet machinery

_TRACE_CACHE = {}


def trace_tabulation(elem, shape, lf, reverse, quad, kind="val"):
    key = (id(elem), lf, reverse, kind, quad.points.tobytes())
    if key not in _TRACE_CACHE:
        pts = facet_embedding(shape, lf, quad.points, reverse=reverse)
        if kind == "val":
            _TRACE_CACHE[key] = (elem.tabulate(pts), pts)
        else:
            _TRACE_CACHE[key] = (elem.tabulate_grad(pts), pts)
    return _TRACE_CACHE[key]


class FacetContext:
    """Tabulated traces and geometry for one interior/exterior facet."""

    def __init__(self, mesh, fid, qdeg):
        self.mesh = mesh
        self.fid = fid
        F = mesh.facets
        self.cp, self.lfp = int(F.cp[fid]), int(F.lfp[fid])
        self.cm, self.lfm = int(F.cm[fid]), int(F.lfm[fid])
        self.reversed = bool(F.reversed_m[fid])
        self.interior = self.cm >= 0
        self.quad = facet_quadrature(mesh.cell_shape, self.lfp, qdeg)
        self.geo = FacetGeometry(mesh, fid, qdeg)
        # re-evaluate geometry at the assembly quadrature
        self.ref_p = facet_embedding(mesh.cell_shape, self.lfp, self.quad.points)
        if self.interior:
            self.ref_m = facet_embedding(mesh.cell_shape, self.lfm,
                                         self.quad.points, reverse=self.reversed)

    def side_tables(self, space, side, op="val"):
        """Physical trace tables [ndof, comp, q] for one side's cell."""
        cell = self.cp if side == "+" else self.cm
        ref = self.ref_p if side == "+" else self.ref_m
        mesh, elem = space.mesh, space.element
        X, J, detJ, Jinv = mesh.geometry(np.array([cell]), ref)
        refv, _ = trace_tabulation(elem, mesh.cell_shape,
                                   self.lfp if side == "+" else self.lfm,
                                   False if side == "+" else self.reversed,
                                   self.quad, "val")
        cont = elem.continuity
        if cont in ("H1", "Vt") or (cont == "L2" and elem.ncomp == 1):
            v = refv[None, :, 0, :]
            if cont == "L2":
                v = v / detJ[:, None, :]
            out = v[0][:, None, :]
        elif cont == "Hdiv":
            out = (np.einsum("cqgd,idq->cigq", J, refv) / detJ[:, None, None, :])[0]
        else:
            raise AssemblyError(f"trace of {cont} not supported")
        return out

    def normals_weights(self):
        """(n_plus, n_minus, measure-weighted quadrature weights)."""
        return self.geo.normal, self.geo.normal_minus, self.geo.measure_weights


def interior_facets(mesh):
    return mesh.facets.interior


def upwind_trace(ctx, coeff_field, u_field, tie_tol_scale=1e-13):
    """Trace of a DG coefficient from the upwind side.

    The upwind side is where u.n is negative (inflow); equivalently '+'
    values are transported across when u.n+ > 0.  Ties average both traces.
    """
    n, _, _ = ctx.normals_weights()
    up = u_field.eval(np.array([ctx.cp]), _PointQuad(ctx.ref_p), "val")[0]
    un = np.einsum("aq,qa->q", up, n)
    vp = coeff_field.eval(np.array([ctx.cp]), _PointQuad(ctx.ref_p), "val")[0, 0]
    vm = coeff_field.eval(np.array([ctx.cm]), _PointQuad(ctx.ref_m), "val")[0, 0]
    tol = tie_tol_scale * max(1.0, float(np.max(np.abs(un))))
    w_plus = np.where(un > tol, 1.0, np.where(un < -tol, 0.0, 0.5))
    return w_plus * vp + (1.0 - w_plus) * vm, un


class _PointQuad:
    """Adapter: raw reference points as a quadrature-like object."""

    def __init__(self, pts):
        self.points = np.atleast_2d(pts)
        self.weights = np.zeros(len(self.points))
        self.npoints = len(self.points)
        self.degree = 0


def facet_upwind_matrix(Vdg, u_field, qdeg=None):
    """Matrix of the upwind DG flux term: int jump(u phi) Dtilde dS."""
    mesh = Vdg.mesh
    if qdeg is None:
        qdeg = default_degree(Vdg.element, u_field.space.element, extra=2)
    rows, cols, vals = [], [], []
    for fid in interior_facets(mesh):
        ctx = FacetContext(mesh, fid, qdeg)
        n_p, n_m, w = ctx.normals_weights()
        up = u_field.eval(np.array([ctx.cp]), _PointQuad(ctx.ref_p), "val")[0]
        um = u_field.eval(np.array([ctx.cm]), _PointQuad(ctx.ref_m), "val")[0]
        unp = np.einsum("aq,qa->q", up, n_p)
        unm = np.einsum("aq,qa->q", um, n_m)
        tp = ctx.side_tables(Vdg, "+")[:, 0, :]   # [i,q]
        tm = ctx.side_tables(Vdg, "-")[:, 0, :]
        tol = 1e-13 * max(1.0, float(np.max(np.abs(unp))))
        w_plus = np.where(unp > tol, 1.0, np.where(unp < -tol, 0.0, 0.5))
        dp, sp_ = Vdg.cell_dofs[ctx.cp], Vdg.cell_signs[ctx.cp]
        dm, sm_ = Vdg.cell_dofs[ctx.cm], Vdg.cell_signs[ctx.cm]
        for (ti, di, si, unv) in ((tp, dp, sp_, unp), (tm, dm, sm_, unm)):
            for (tj, dj, sj, wsel) in ((tp, dp, sp_, w_plus), (tm, dm, sm_, 1.0 - w_plus)):
                loc = np.einsum("iq,jq,q->ij", ti, tj, unv * wsel * w)
                loc *= si[:, None] * sj[None, :]
                rows.append(np.repeat(di, len(dj)))
                cols.append(np.tile(dj, len(di)))
                vals.append(loc.ravel())
    mat = sp.coo_matrix((np.concatenate(vals),
                         (np.concatenate(rows), np.concatenate(cols))),
                        shape=(Vdg.ndofs, Vdg.ndofs)).tocsr()
    return SparseOperator(mat, Vdg, Vdg)


def facet_normal_jumps(V, field, qdeg=6):
    """Max |u+.n+ + u-.n-| over interior facet quadrature points (conformity)."""
    mesh = V.mesh
    worst = 0.0
    for fid in interior_facets(mesh):
        ctx = FacetContext(mesh, fid, qdeg)
        n_p, n_m, _ = ctx.normals_weights()
        vp = field.eval(np.array([ctx.cp]), _PointQuad(ctx.ref_p), "val")[0]
        vm = field.eval(np.array([ctx.cm]), _PointQuad(ctx.ref_m), "val")[0]
        jump = np.einsum("aq,qa->q", vp, n_p) + np.einsum("aq,qa->q", vm, n_m)
        worst = max(worst, float(np.max(np.abs(jump))))
    return worst


# ---------------------------------------------------------------------------
# broken and trace spaces

def break_space(space):
    """Same element, no inter-cell continuity (the hat space)."""
    return FunctionSpace(space.mesh, space.element, broken=True)


class TraceSpace:
    """Facet polynomials matching the parent's normal-trace degree (W)."""

    def __init__(self, parent):
        elem = parent.element
        if elem.continuity != "Hdiv":
            raise AssemblyError("trace_space needs an HDiv parent")
        deg = elem.meta.get("normal_trace_degree")
        if deg is None:
            raise AssemblyError(f"{elem.name} has no recorded normal trace degree")
        self.mesh = parent.mesh
        self.degree = deg
        self.n_per_facet = deg + 1
        self.ndofs = self.n_per_facet * len(self.mesh.facets)
        self.parent = parent

    def facet_dofs(self, fid):
        return np.arange(self.n_per_facet) + fid * self.n_per_facet


def trace_space(space):
    return TraceSpace(space)


def facet_trace_matrix(Vbroken, W, qdeg=None, interior_only=True):
    """Pairing int_Gamma lambda jump(w) dS as a [broken x trace] matrix.

    Per cell side the jump contribution is w|_T . n_T, with n_T the outward
    normal; lambda uses the canonical ('+' side) facet parametrisation.
    """
    from .element import shifted_legendre
    mesh = Vbroken.mesh
    if qdeg is None:
        qdeg = default_degree(Vbroken.element, extra=2)
    rows, cols, vals = [], [], []
    fids = interior_facets(mesh) if interior_only else np.arange(len(mesh.facets))
    for fid in fids:
        ctx = FacetContext(mesh, fid, qdeg)
        n_p, n_m, w = ctx.normals_weights()
        s = ctx.quad.points[:, 0]
        lam = np.stack([shifted_legendre(m, s) for m in range(W.n_per_facet)])
        wd = W.facet_dofs(fid)
        sides = [("+", ctx.cp, n_p)]
        if ctx.interior:
            sides.append(("-", ctx.cm, n_m))
        for side, cell, nrm in sides:
            tab = ctx.side_tables(Vbroken, side)      # [i, g, q]
            wn = np.einsum("igq,qg->iq", tab, nrm)
            loc = np.einsum("iq,mq,q->im", wn, lam, w)
            di = Vbroken.cell_dofs[cell]
            si = Vbroken.cell_signs[cell]
            loc *= si[:, None]
            rows.append(np.repeat(di, len(wd)))
            cols.append(np.tile(wd, len(di)))
            vals.append(loc.ravel())
    mat = sp.coo_matrix((np.concatenate(vals),
                         (np.concatenate(rows), np.concatenate(cols))),
                        shape=(Vbroken.ndofs, W.ndofs)).tocsr()
    return SparseOperator(mat, Vbroken, None)


def conforming_injection(V, Vhat):
    """Sparse map conforming -> broken coefficients (and its averaging adjoint)."""
    rows, cols, vals = [], [], []
    for c in range(V.mesh.n_cells):
        for i in range(V.element.ndofs):
            rows.append(Vhat.cell_dofs[c, i])
            cols.append(V.cell_dofs[c, i])
            vals.append(V.cell_signs[c, i])
    inj = sp.coo_matrix((vals, (rows, cols)), shape=(Vhat.ndofs, V.ndofs)).tocsr()
    mult = np.asarray(abs(inj).sum(axis=0)).ravel()
    avg = sp.diags(1.0 / mult) @ inj.T
    return inj, avg.tocsr()
