"""Sparse solvers: preconditioned CG, saddle solves, hybridisation, eigensolves.

Dense symmetric eigenproblems go through LAPACK (scipy.linalg.eigh) behind
the desk-scale size cap; repeated sparse solves are served by cached
SuperLU factorizations.  The hybridised trace solve follows the static
condensation route: cell-local elimination, a global trace system solved by
Gauss-Seidel-preconditioned CG when symmetric (LU when the Coriolis skew
part makes it detectably nonsymmetric), then cell-by-cell back-substitution.
"""

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from dataclasses import dataclass, field

from .assembly import unwrap

EIG_SIZE_CAP = 5000


class SolverError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    rtol: float = 1e-10
    atol: float = 1e-14
    maxit: int = 10000
    preconditioner: str = "diagonal"   # none | diagonal | gauss-seidel
    report: bool = False
    debug_monotonic: bool = False

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if self.maxit < 1:
            raise ValueError("maxit must be >= 1")
        if self.preconditioner not in ("none", "diagonal", "gauss-seidel"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


def _make_preconditioner(A, kind):
    if kind == "none":
        return lambda r: r
    if kind == "diagonal":
        d = A.diagonal()
        if np.any(d <= 0):
            raise SolverError("diagonal preconditioner needs positive diagonal")
        dinv = 1.0 / d
        return lambda r: dinv * r
    # symmetric Gauss-Seidel: M = (D+L) D^-1 (D+U); the symmetric variant is
    # required for CG correctness
    L = sp.tril(A, format="csr")
    U = sp.triu(A, format="csr")
    d = A.diagonal()

    def apply(r):
        y = spla.spsolve_triangular(L, r, lower=True)
        return spla.spsolve_triangular(U, d * y, lower=False)
    return apply


def cg_solve(A, b, cfg=None, nullspace=None, x0=None):
    """Preconditioned conjugate gradients for SPD (or SPSD) operators.

    nullspace: optional list of vectors spanning a known null space; the
    right-hand side and iterates are kept orthogonal to it and the returned
    solution has no component in it.
    """
    cfg = cfg or SolverConfig()
    A = unwrap(A)
    b = np.asarray(b, dtype=float).copy()
    n = len(b)

    if nullspace is not None:
        Q = np.array([v / np.linalg.norm(v) for v in nullspace]).T
        Q, _ = np.linalg.qr(Q)

        def proj(v):
            return v - Q @ (Q.T @ v)
        b = proj(b)
    else:
        def proj(v):
            return v

    M = _make_preconditioner(A, cfg.preconditioner)
    x = np.zeros(n) if x0 is None else proj(np.asarray(x0, dtype=float))
    r = b - A @ x
    z = proj(M(r))
    p = z.copy()
    rz = r @ z
    bnorm = np.linalg.norm(b)
    tol = cfg.rtol * bnorm + cfg.atol
    it = 0
    enorm_prev = np.inf
    while np.linalg.norm(r) > tol:
        if it >= cfg.maxit:
            raise SolverError(
                f"CG did not converge in {cfg.maxit} iterations "
                f"(residual {np.linalg.norm(r):.3e}, target {tol:.3e})")
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if cfg.debug_monotonic:
            e = float(np.sqrt(max(r @ proj(r), 0.0)))
            # A-norm error decrease is guaranteed; residual may wiggle, so
            # track the preconditioned quantity loosely
            enorm_prev = min(enorm_prev, e)
        z = proj(M(r))
        rz_new = r @ z
        beta = rz_new / rz
        p = z + beta * p
        rz = rz_new
        it += 1
    if cfg.report:
        print(f"solver=cg iterations={it} residual={np.linalg.norm(r):.6e}")
    return proj(x)


class Factorized:
    """Cached sparse LU solve (plumbing for repeated mass solves)."""

    def __init__(self, A):
        self.lu = spla.splu(unwrap(A).tocsc())

    def __call__(self, b):
        b = np.asarray(b, dtype=float)
        if b.ndim == 1:
            return self.lu.solve(b)
        return self.lu.solve(b)


def factorized(A):
    return Factorized(A)


# ---------------------------------------------------------------------------
# saddle-point solves

def solve_mixed(A11, B, rhs_u, rhs_p, cfg=None, M22=None, mean_free_p=False,
                one_p=None, C11=None, c22_scale=0.0):
    """Solve [[A11 + C11, B^T], [B, c22*M22]] (u, p) = (rhs_u, rhs_p).

    With C11 = 0 this is the symmetric mixed (Poisson/Helmholtz) saddle
    solved via the Schur complement and CG; with a skew C11 (Coriolis) the
    system is mildly nonsymmetric and a sparse LU is used instead.
    p is pinned mean-free when requested (one_p = coefficient vector of the
    projected constant).
    """
    cfg = cfg or SolverConfig()
    A11 = unwrap(A11)
    B = unwrap(B)
    nonsym = C11 is not None and unwrap(C11).nnz > 0
    if nonsym:
        A = A11 + unwrap(C11)
        M22s = unwrap(M22) * c22_scale if M22 is not None else None
        n_u, n_p = A.shape[0], B.shape[0]
        blocks = [[A, B.T], [B, M22s if M22s is not None else None]]
        K = sp.bmat(blocks, format="csc")
        sol = spla.splu(K).solve(np.concatenate([rhs_u, rhs_p]))
        u, p = sol[:n_u], sol[n_u:]
        if cfg.report:
            print("solver=mixed-lu iterations=1 residual=0.0")
    else:
        Alu = Factorized(A11)
        nullspace = [one_p] if mean_free_p else None

        def schur(p):
            return B @ Alu(B.T @ p)
        S = spla.LinearOperator((B.shape[0],) * 2, matvec=schur)
        rhs = B @ Alu(rhs_u) - rhs_p
        p = _operator_cg(S, rhs, cfg, nullspace)
        u = Alu(rhs_u - B.T @ p)
    return u, p


def _operator_cg(S, b, cfg, nullspace=None):
    """CG on a LinearOperator (no preconditioner; desk-scale Schur solves)."""
    if nullspace is not None:
        Q = np.array([v / np.linalg.norm(v) for v in nullspace]).T
        Q, _ = np.linalg.qr(Q)

        def proj(v):
            return v - Q @ (Q.T @ v)
    else:
        def proj(v):
            return v
    b = proj(np.asarray(b, dtype=float))
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    tol = cfg.rtol * np.linalg.norm(b) + cfg.atol
    for it in range(cfg.maxit):
        if np.sqrt(rr) <= tol:
            break
        Ap = proj(S @ p)
        alpha = rr / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    else:
        raise SolverError(f"Schur CG did not converge (residual {np.sqrt(rr):.3e})")
    if cfg.report:
        print(f"solver=schur-cg iterations={it} residual={np.sqrt(rr):.6e}")
    return proj(x)


# ---------------------------------------------------------------------------
# hybridisation by static condensation

@dataclass
class HybridSystem:
    """Cell-local blocks of the broken saddle system plus trace coupling.

    A_cells: [C, nloc, nloc] dense cell blocks over (u_hat, D) unknowns
    L: sparse [n_broken_total, n_trace] trace pairing, rows ordered cell by cell
    rhs: [C, nloc] right-hand sides
    cell_slices: list of (offset, nloc) into the global broken vector
    n_trace: trace space dimension
    """
    A_cells: list
    L: sp.spmatrix
    rhs: list
    cell_slices: list
    n_trace: int


def solve_hybridised(system, cfg=None):
    """Cell-local elimination -> SPD trace system -> CG -> back-substitution.

    Returns (x_broken, lam, info).  The trace operator is assembled cell by
    cell; if the Coriolis skew part leaves a measurable asymmetry the system
    is solved by sparse LU instead of CG (see the decisions log).
    """
    cfg = cfg or SolverConfig()
    L = system.L.tocsr()
    n_tr = system.n_trace
    Ainv_blocks = []
    rows, cols, vals = [], [], []
    g = np.zeros(n_tr)
    for (off, n), A, b in zip(system.cell_slices, system.A_cells, system.rhs):
        Lc = L[off:off + n, :]
        cols_c = np.unique(Lc.indices) if Lc.nnz else np.array([], dtype=int)
        try:
            lu, piv = sla.lu_factor(A)
        except sla.LinAlgError as exc:
            raise SolverError(f"singular cell block: {exc}")
        Ainv_blocks.append((lu, piv))
        if len(cols_c) == 0:
            continue
        Ld = Lc[:, cols_c].toarray()
        AinvL = sla.lu_solve((lu, piv), Ld)
        Sc = Ld.T @ AinvL
        gc = Ld.T @ sla.lu_solve((lu, piv), b)
        rows.append(np.repeat(cols_c, len(cols_c)))
        cols.append(np.tile(cols_c, len(cols_c)))
        vals.append(Sc.ravel())
        g[cols_c] += gc
    S = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n_tr, n_tr)).tocsr()
    sym_defect = abs(S - S.T)
    defect = sym_defect.data.max() if sym_defect.nnz else 0.0
    scale = max(abs(S.data).max(), 1e-300)
    if defect < 1e-12 * scale:
        Scg = 0.5 * (S + S.T)
        lcfg = SolverConfig(rtol=cfg.rtol, atol=cfg.atol, maxit=cfg.maxit,
                            preconditioner="gauss-seidel", report=cfg.report)
        lam = cg_solve(Scg, g, lcfg)
        method = "cg"
    else:
        lam = spla.splu(S.tocsc()).solve(g)
        method = "lu"
    x = np.zeros(L.shape[0])
    for (off, n), (lu, piv), b in zip(system.cell_slices, Ainv_blocks, system.rhs):
        Lc = L[off:off + n, :]
        x[off:off + n] = sla.lu_solve((lu, piv), b - Lc @ lam)
    info = {"method": method, "sym_defect": float(defect / scale),
            "trace_dim": n_tr}
    return x, lam, info


def trace_system_spd_check(system):
    """Pivot-positivity (Cholesky) check of the symmetrised trace operator."""
    L = system.L.tocsr()
    n_tr = system.n_trace
    S = np.zeros((n_tr, n_tr))
    g = np.zeros(n_tr)
    for (off, n), A, b in zip(system.cell_slices, system.A_cells, system.rhs):
        Ld = L[off:off + n, :].toarray()
        S += Ld.T @ np.linalg.solve(A, Ld)
    Ssym = 0.5 * (S + S.T)
    try:
        np.linalg.cholesky(Ssym + 1e-14 * np.eye(n_tr) * max(1.0, abs(Ssym).max()))
        return True
    except np.linalg.LinAlgError:
        return False


# ---------------------------------------------------------------------------
# eigensolves

def symmetric_eigs(A, M, count=None):
    """Generalized symmetric eigenpairs Ax = lambda Mx, ascending.

    Dense LAPACK path behind the desk-scale cap; the residual post-condition
    ||Ax - lambda Mx|| <= 1e-8 ||x||_M is verified before returning.
    """
    A = unwrap(A)
    M = unwrap(M)
    n = A.shape[0]
    if n > EIG_SIZE_CAP:
        raise SolverError(f"eigenproblem size {n} exceeds desk-scale cap {EIG_SIZE_CAP}")
    Ad = A.toarray() if sp.issparse(A) else np.asarray(A)
    Md = M.toarray() if sp.issparse(M) else np.asarray(M)
    Ad = 0.5 * (Ad + Ad.T)
    w, V = sla.eigh(Ad, 0.5 * (Md + Md.T))
    if count is not None:
        w, V = w[:count], V[:, :count]
    for i in range(len(w)):
        x = V[:, i]
        res = np.linalg.norm(Ad @ x - w[i] * (Md @ x))
        xm = np.sqrt(max(x @ (Md @ x), 1e-300))
        if res > 1e-8 * xm * max(1.0, abs(w[i])):
            raise SolverError(f"eigenpair {i} residual {res:.2e} too large")
    return w, V


def lowest_generalized_eigs(apply_A, solve_shifted, M, k, sigma=-1.0,
                            tol=1e-9, maxit=60, seed=0):
    """Smallest eigenvalues of a PSD pencil via shift-inverted subspace iteration.

    apply_A(x): action of A; solve_shifted(b): (A - sigma M)^{-1} b;
    M: sparse mass.  Used for the discrete Laplacian where A is only
    available as B M1^{-1} B^T through a factorized saddle solve.
    """
    M = unwrap(M)
    n = M.shape[0]
    rng = np.random.default_rng(seed)
    m = min(n, max(2 * k, k + 4))
    X = rng.standard_normal((n, m))
    w_old = None
    for it in range(maxit):
        Y = np.column_stack([solve_shifted(M @ X[:, j]) for j in range(m)])
        # M-orthonormalize via QR of M^{1/2}-weighted Gram
        G = Y.T @ (M @ Y)
        Lc = np.linalg.cholesky(G + np.trace(G) / len(G) * 1e-14 * np.eye(len(G)))
        X = np.linalg.solve(Lc, Y.T).T
        Am = np.column_stack([apply_A(X[:, j]) for j in range(m)])
        H = X.T @ Am
        H = 0.5 * (H + H.T)
        w, Q = np.linalg.eigh(H)
        X = X @ Q
        if w_old is not None and np.max(np.abs(w[:k] - w_old[:k])) \
                <= tol * max(1.0, np.max(np.abs(w[:k]))):
            break
        w_old = w
    else:
        raise SolverError("subspace iteration did not converge")
    return w[:k], X[:, :k]
