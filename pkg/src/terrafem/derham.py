"""Discrete de Rham structure diagnostics on the 2D complex.

Holds the (V0, V1, V2) spaces for a family on a no-boundary mesh together
with the assembled pairings, and provides the adjoint (tilde) operators,
the discrete Helmholtz decomposition, harmonic-space extraction, the mixed
Poisson driver, inf-sup estimation and Laplacian eigenvalues.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from dataclasses import dataclass

from .assembly import (CellTerm, FunctionSpace, assemble, assemble_mass,
                       assemble_vector, derivative_matrix, integral_functional)
from .element import PolyFamily, build_reference_element, horizontal_complex
from .linalg import (Factorized, SolverConfig, SolverError, cg_solve,
                     lowest_generalized_eigs, symmetric_eigs, _operator_cg)


@dataclass
class HelmholtzParts:
    psi: object       # stream potential in V0, mean-free
    phi: object       # divergence potential in V2, mean-free
    harmonic: object  # remainder in V1

    def reconstruct(self, cx):
        u = cx.perp_grad(self.psi).coeffs + cx.tilde_grad(self.phi).coeffs \
            + self.harmonic.coeffs
        return cx.V1.new_field(u)


class DeRhamComplex:
    def __init__(self, mesh, family, cfg=None):
        self.mesh = mesh
        self.family = family
        self.cfg = cfg or SolverConfig(rtol=1e-12, atol=1e-15)
        E0, E1, E2 = horizontal_complex(family, mesh.cell_shape)
        self.V0 = FunctionSpace(mesh, E0)
        self.V1 = FunctionSpace(mesh, E1)
        self.V2 = FunctionSpace(mesh, E2, mean_free=True)
        self.M0 = assemble_mass(self.V0).mat
        self.M1 = assemble_mass(self.V1).mat
        self.M2 = assemble_mass(self.V2).mat
        self.B = assemble(self.V2, self.V1, [CellTerm("val", "div")]).mat
        self.C = assemble(self.V0, self.V1, [CellTerm("pgrad", "val")]).mat
        self.S0 = assemble(self.V0, self.V0, [CellTerm("pgrad", "pgrad")]).mat
        self.Dperp = derivative_matrix(self.V0, self.V1, "perp_grad").mat
        self.Ddiv = derivative_matrix(self.V1, self.V2, "div").mat
        self._M0lu = Factorized(self.M0)
        self._M1lu = Factorized(self.M1)
        self._M2lu = Factorized(self.M2)
        self.one0 = self.V0.one().coeffs
        self.one2 = self.V2.one().coeffs

    # -- tilde (adjoint) operators ------------------------------------------

    def tilde_grad(self, rho):
        """grad-tilde: int w . gt(rho) = -int (div w) rho for all w in V1."""
        return self.V1.new_field(self._M1lu(-(self.B.T @ rho.coeffs)))

    def tilde_curl(self, v):
        """perp-curl-tilde: int g ct(v) = -int perp-grad(g) . v for all g in V0."""
        return self.V0.new_field(self._M0lu(-(self.C @ v.coeffs)))

    def perp_grad(self, psi):
        """Exact coefficient-level perp gradient V0 -> V1."""
        return self.V1.new_field(self.Dperp @ psi.coeffs)

    def divergence(self, u):
        return self.V2.new_field(self.Ddiv @ u.coeffs)

    # -- Helmholtz ------------------------------------------------------------

    def helmholtz_decompose(self, u):
        cfg = self.cfg
        psi = cg_solve(self.S0, self.C @ u.coeffs,
                       SolverConfig(rtol=cfg.rtol, atol=cfg.atol,
                                    preconditioner="gauss-seidel"),
                       nullspace=[self.one0])
        psi_f = self.V0.new_field(psi).remove_mean()

        def schur(p):
            return self.B @ self._M1lu(self.B.T @ p)
        S = spla.LinearOperator((self.V2.ndofs,) * 2, matvec=schur)
        phi = _operator_cg(S, -(self.B @ u.coeffs), cfg, nullspace=[self.one2])
        phi_f = self.V2.new_field(phi).remove_mean()
        rot = self.Dperp @ psi_f.coeffs
        div = self._M1lu(-(self.B.T @ phi_f.coeffs))
        harm = self.V1.new_field(u.coeffs - rot - div)
        return HelmholtzParts(psi_f, phi_f, harm)

    def harmonic_basis(self):
        """M1-orthonormal basis of ker(div) cap ker(tilde-perp-curl).

        Found as the zero eigenspace of the composite operator, so the code
        checks the topological dimension instead of assuming it.
        """
        M2inv_B = self._M2lu(self.B.toarray())
        M0inv_C = self._M0lu(self.C.toarray())
        K = self.B.T @ M2inv_B + self.C.T @ M0inv_C
        w, V = symmetric_eigs(K, self.M1)
        scale = np.mean(np.abs(w[len(w) // 2:])) + 1e-300
        nzero = int(np.sum(w < 1e-8 * scale))
        if nzero < len(w):
            if w[nzero] < 1e-6 * scale or (nzero > 0 and w[nzero - 1] > 1e-10 * scale):
                raise SolverError("eigenvalue-gap ambiguity in harmonic extraction")
        fields = []
        for i in range(nzero):
            f = self.V1.new_field(V[:, i])
            fields.append(f)
        return fields

    # -- mixed Poisson ---------------------------------------------------------

    def solve_mixed_poisson(self, f):
        """Find (u, p), p mean-free, with int w.u + int div(w) p = 0 and
        int phi div(u) = int phi f."""
        L2 = integral_functional(self.V2)
        if abs(L2 @ f.coeffs) > 1e-10 * max(1.0, np.linalg.norm(f.coeffs)):
            raise SolverError("incompatible right-hand side: f must have zero mean")
        b = self.M2 @ f.coeffs

        def schur(p):
            return self.B @ self._M1lu(self.B.T @ p)
        S = spla.LinearOperator((self.V2.ndofs,) * 2, matvec=schur)
        p = _operator_cg(S, -b, self.cfg, nullspace=[self.one2])
        p_f = self.V2.new_field(p).remove_mean()
        u = self._M1lu(-(self.B.T @ p_f.coeffs))
        return self.V1.new_field(u), p_f

    # -- inf-sup ----------------------------------------------------------------

    def estimate_infsup(self):
        DD = assemble(self.V1, self.V1, [CellTerm("div", "div")]).mat
        return estimate_infsup_pair(self.M1 + DD, self.B, self.M2)

    # -- eigenvalues --------------------------------------------------------------

    def laplacian_eigenvalues(self, count, sigma=-1.0, seed=0):
        """Smallest eigenvalues of the discrete Laplacian -div(grad-tilde) on V2.

        Solved through the factorized mixed saddle system so only sparse
        matrices are ever formed (the Schur complement stays implicit).
        """
        n_u, n_p = self.V1.ndofs, self.V2.ndofs
        K = sp.bmat([[self.M1, self.B.T], [self.B, sigma * self.M2]],
                    format="csc")
        Klu = spla.splu(K)

        def solve_shifted(b):
            sol = Klu.solve(np.concatenate([np.zeros(n_u), b]))
            return -sol[n_u:]

        def apply_A(x):
            return self.B @ self._M1lu(self.B.T @ x)

        w, _ = lowest_generalized_eigs(apply_A, solve_shifted, self.M2,
                                       count, sigma=sigma, seed=seed)
        return w


def estimate_infsup_pair(X, B, M2):
    """sqrt of the smallest nonzero eigenvalue of the pressure Schur complement.

    X is the velocity Gram in the full H(div) inner product; the zero
    eigenvalue from constant pressures on closed domains is discarded.
    """
    Xd = X.toarray() if sp.issparse(X) else np.asarray(X)
    Bd = B.toarray() if sp.issparse(B) else np.asarray(B)
    S = Bd @ np.linalg.solve(Xd, Bd.T)
    w, _ = symmetric_eigs(S, M2)
    w = np.maximum(w, 0.0)
    scale = np.mean(w[len(w) // 2:]) + 1e-300
    nzero = int(np.sum(w < 1e-10 * scale))
    if nzero >= len(w):
        return 0.0
    return float(np.sqrt(w[nzero]))


def infsup_negative_control(mesh):
    """Vector-CG1 velocity against DG0 pressure (an incompatible pair)."""
    from .element import element_from_name
    Vv = FunctionSpace(mesh, build_reference_element(
        PolyFamily("VectorCG", 1), mesh.cell_shape))
    Vp = FunctionSpace(mesh, element_from_name("DG0", mesh.cell_shape))
    M = assemble_mass(Vv).mat
    DD = assemble(Vv, Vv, [CellTerm("div", "div")]).mat
    B = assemble(Vp, Vv, [CellTerm("val", "div")]).mat
    M2 = assemble_mass(Vp).mat
    return estimate_infsup_pair(M + DD, B, M2)
