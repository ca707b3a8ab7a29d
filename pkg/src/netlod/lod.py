"""Localized corrector computation and multiscale solves.

The fine-scale space W is the kernel of the quasi-interpolation operator
inside the Dirichlet-constrained space.  Per element T and localization
radius k, the corrector of a function v solves a saddle-point system on
the patch U_k(T): minimize the energy of the difference subject to all
coarse functionals whose assignment element lies inside the patch.  The
multiscale space is spanned by the corrected coarse basis, and the reduced
Galerkin system on it is symmetric positive definite.

Degree-of-freedom layout is component-major throughout (dof = c*N + node);
coarse dofs are component-major over the free mesh nodes (c*m0 + rank).
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .errors import SolverError
from .interpolation import QuasiInterpolator
from .network import SpatialNetwork
from .operators import AssembledOperator
from .solvers import SaddleSystem, SolveReport, cg_solve

PATCH_TOL = 1e-10      # relative residual for patch saddle solves
REFERENCE_TOL = 1e-10  # relative residual for reference solves


def free_dofs(net: SpatialNetwork, ncomp: int) -> np.ndarray:
    """Unconstrained dof indices, component-major."""
    free = net.free_nodes
    n = net.num_nodes
    return np.concatenate([c * n + free for c in range(ncomp)])


def coarse_block_basis(interp: QuasiInterpolator, ncomp: int) -> sparse.csr_matrix:
    """Free coarse hat functions for all components, shape (n*N, n*m0)."""
    return sparse.kron(sparse.identity(ncomp, format="csr"),
                       interp.basis_free, format="csr")


def worker_count() -> int:
    """Parallelism cap from NETLOD_THREADS (default 1: fully sequential)."""
    raw = os.environ.get("NETLOD_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        return 1
    return max(1, value)


@dataclass
class CorrectorBasis:
    """Localized correctors of the free coarse basis functions.

    `matrix` holds one sparse column per coarse dof j: the corrector
    q_j = sum_T Q_T^k phi_j, supported inside U_{k+1} of the hat support,
    vanishing on Dirichlet dofs, with all coarse functionals zero.
    """

    k: int
    ncomp: int
    matrix: sparse.csc_matrix
    interp: QuasiInterpolator
    reports: list = field(default_factory=list)

    def corrected_basis(self) -> sparse.csr_matrix:
        """Multiscale basis (1 - Q^k) applied to the coarse hats."""
        return (coarse_block_basis(self.interp, self.ncomp) - self.matrix).tocsr()


@dataclass
class MultiscaleSystem:
    """Reduced Galerkin system on the corrected basis."""

    matrix: np.ndarray          # (n*m0, n*m0), symmetric positive definite
    rhs: np.ndarray
    basis: sparse.csr_matrix    # corrected basis, columns span V_H^{ms,k}
    corrector: CorrectorBasis
    _chol: tuple | None = None

    def factor(self):
        if self._chol is None:
            try:
                self._chol = scipy.linalg.cho_factor(self.matrix)
            except scipy.linalg.LinAlgError as exc:
                raise SolverError(
                    "reduced multiscale matrix is not positive definite "
                    f"(corrector defect): {exc}") from exc
        return self._chol


class _PatchWorkspace:
    """Per-network precomputations shared by all element patch solves."""

    def __init__(self, K: AssembledOperator, interp: QuasiInterpolator):
        self.K = K
        self.interp = interp
        net = interp.net
        mesh = interp.mesh
        self.n = K.ncomp
        self.N = net.num_nodes
        elem = interp.elem_of_node
        order = np.argsort(elem, kind="stable")
        self.node_order = order
        self.node_bounds = np.searchsorted(elem[order], np.arange(mesh.num_elements + 1))
        self.free_mask = np.zeros(self.N, dtype=bool)
        self.free_mask[net.free_nodes] = True
        # triplets grouped by the element of the owning node, for K_T
        owner_elem = elem[K._owners]
        t_order = np.argsort(owner_elem, kind="stable")
        self.trip_order = t_order
        self.trip_bounds = np.searchsorted(owner_elem[t_order],
                                           np.arange(mesh.num_elements + 1))
        # assignment element of each free coarse dof (rank order)
        self.dof_assignment = interp.assignment[mesh.free_mesh_nodes]

    def nodes_of_elements(self, elems: np.ndarray) -> np.ndarray:
        parts = [self.node_order[self.node_bounds[e]:self.node_bounds[e + 1]]
                 for e in elems]
        return np.sort(np.concatenate(parts)) if parts else np.empty(0, np.int64)

    def element_operator(self, T: int) -> sparse.csr_matrix:
        """K_T = sum of node contributions over the nodes inside element T."""
        sel = self.trip_order[self.trip_bounds[T]:self.trip_bounds[T + 1]]
        K = self.K
        return sparse.coo_matrix(
            (K._vals[sel], (K._rows[sel], K._cols[sel])),
            shape=(K.size, K.size)).tocsr()

    def reach_nodes(self, T: int) -> np.ndarray:
        """Network nodes whose values K_T depends on (T's nodes + neighbors)."""
        sel = self.trip_order[self.trip_bounds[T]:self.trip_bounds[T + 1]]
        cols = self.K._cols[sel]
        return np.unique(cols % self.N)

    def patch(self, T: int, k: int):
        """(patch dofs, free patch nodes, constraint matrix, saddle system)."""
        mesh = self.interp.mesh
        elems = mesh.element_patch(T, k)
        pnodes = self.nodes_of_elements(elems)
        pfree = pnodes[self.free_mask[pnodes]]
        pdofs = np.concatenate([c * self.N + pfree for c in range(self.n)])
        K_pp = self.K.matrix[pdofs][:, pdofs]
        sel = np.flatnonzero(np.isin(self.dof_assignment, elems))
        C_scalar = self.interp.functional_free[sel][:, pfree]
        C = sparse.kron(sparse.identity(self.n, format="csr"), C_scalar,
                        format="csr")
        system = SaddleSystem(K_pp, C, tol=PATCH_TOL)
        return pdofs, pfree, system


def element_corrector(K: AssembledOperator, interp: QuasiInterpolator,
                      T: int, v: np.ndarray, k: int) -> np.ndarray:
    """Localized element corrector Q_T^k v as a full dof vector.

    Solves the patch saddle system with right-hand side K_T v; the result
    is zero outside the patch U_k(T) and on all Dirichlet dofs, and its
    coarse functionals vanish.
    """
    if k < 1:
        raise SolverError("localization radius k must be >= 1")
    ws = _PatchWorkspace(K, interp)
    pdofs, _, system = ws.patch(T, k)
    rhs = (ws.element_operator(T) @ np.asarray(v, dtype=float))[pdofs]
    q_local, _, _ = system.solve(rhs)
    out = np.zeros(K.size)
    out[pdofs] = q_local
    return out


def _element_task(ws: _PatchWorkspace, T: int, k: int, columns, extra: list):
    """Solve all corrector right-hand sides attached to element T.

    `columns` lists (coarse dof, full basis column vector); `extra` lists
    full vectors whose extended correctors are accumulated (boundary data).
    Returns (pdofs, per-column solutions, per-extra solutions, reports).
    """
    if not columns and not extra:
        return np.empty(0, np.int64), [], [], []
    pdofs, _, system = ws.patch(T, k)
    K_T = ws.element_operator(T)
    ids = []
    rhs_cols = []
    for j, vec in columns:
        rhs = (K_T @ vec)[pdofs]
        if np.any(rhs):
            ids.append(("col", j))
            rhs_cols.append(rhs)
    for pos, vec in enumerate(extra):
        rhs = (K_T @ vec)[pdofs]
        if np.any(rhs):
            ids.append(("extra", pos))
            rhs_cols.append(rhs)
    if not ids:
        return pdofs, [], [np.zeros(pdofs.size) for _ in extra], []
    X, _, report = system.solve_many(np.column_stack(rhs_cols))
    col_solutions = []
    extra_solutions = [np.zeros(pdofs.size) for _ in extra]
    for idx, (kind, key) in enumerate(ids):
        if kind == "col":
            col_solutions.append((key, X[:, idx]))
        else:
            extra_solutions[key] = X[:, idx]
    return pdofs, col_solutions, extra_solutions, [report]


def _run_element_solves(K: AssembledOperator, interp: QuasiInterpolator, k: int,
                        extra: list[np.ndarray] | None = None,
                        with_basis: bool = True):
    """Patch solves for every element; deterministic element-indexed merge."""
    if k < 1:
        raise SolverError("localization radius k must be >= 1")
    ws = _PatchWorkspace(K, interp)
    mesh = interp.mesh
    net = interp.net
    n, N, m0 = K.ncomp, net.num_nodes, interp.num_free
    extra = [np.asarray(v, dtype=float) for v in (extra or [])]

    basis_cols = {}
    phi_csr = interp.basis_free.tocsr()
    if with_basis:
        phi_csc = interp.basis_free.tocsc()
        for r in range(m0):
            col = np.zeros(N)
            col[phi_csc[:, r].indices] = phi_csc[:, r].data
            basis_cols[r] = col

    def columns_for(T: int):
        """Coarse dofs whose hat function K_T can see.

        K_T acts on values at the nodes of T and their graph neighbors, so
        every hat overlapping that reach contributes a corrector piece;
        restricting to the corners of T would silently drop the boundary
        couplings of edges that cross element faces.
        """
        if not with_basis:
            return []
        seen = ws.reach_nodes(T)
        if seen.size == 0:
            return []
        ranks = np.unique(phi_csr[seen].indices)
        ranks = ranks[ranks < m0]
        out = []
        for r in ranks:
            base = basis_cols[int(r)]
            for c in range(n):
                vec = np.zeros(n * N)
                vec[c * N:(c + 1) * N] = base
                out.append((c * m0 + int(r), vec))
        return out

    tasks = list(range(mesh.num_elements))
    results: list = [None] * len(tasks)

    def run(T: int):
        return _element_task(ws, T, k, columns_for(T), extra)

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for T, res in zip(tasks, pool.map(run, tasks)):
                results[T] = res
    else:
        for T in tasks:
            results[T] = run(T)

    rows, cols, vals = [], [], []
    extra_out = [np.zeros(n * N) for _ in extra]
    reports = []
    for T in tasks:
        pdofs, col_solutions, extra_solutions, reps = results[T]
        if pdofs.size == 0:
            continue
        reports.extend(reps)
        for j, q in col_solutions:
            rows.append(pdofs)
            cols.append(np.full(pdofs.size, j, dtype=np.int64))
            vals.append(q)
        for target, q in zip(extra_out, extra_solutions):
            target[pdofs] += q
    if rows:
        Q = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n * N, n * m0)).tocsc()
        Q.sum_duplicates()
    else:
        Q = sparse.csc_matrix((n * N, n * m0))
    return Q, extra_out, reports


def build_corrector_basis(K: AssembledOperator, interp: QuasiInterpolator,
                          k: int) -> CorrectorBasis:
    """Correctors q_j = sum_T Q_T^k phi_j for every free coarse dof j."""
    Q, _, reports = _run_element_solves(K, interp, k)
    return CorrectorBasis(k=k, ncomp=K.ncomp, matrix=Q, interp=interp,
                          reports=reports)


def correct_function(K: AssembledOperator, interp: QuasiInterpolator,
                     k: int, g: np.ndarray) -> np.ndarray:
    """Extended localized corrector of an arbitrary (boundary) function.

    Computes sum_T Q_T^k g where the right-hand sides K_T g include the
    contributions of constrained dofs of g; the result lives in W.
    """
    _, extra, _ = _run_element_solves(K, interp, k, extra=[g], with_basis=False)
    return extra[0]


def assemble_multiscale(K: AssembledOperator, basis: CorrectorBasis,
                        f: np.ndarray, g: np.ndarray | None = None) -> MultiscaleSystem:
    """Reduced Galerkin system on the corrected coarse basis.

    The matrix is evaluated through the operator's factorized Gram form, a
    weighted sum of squares: soft structural models have reduced energies
    orders of magnitude below the raw stiffness scale, where the plain
    triple product B^T K B would drown in cancellation.  Boundary data g
    contributes its load term -(K g, b_j) through the same form.  Positive
    definiteness is established by the Cholesky factorization at solve time.
    """
    B = basis.corrected_basis()
    f = np.asarray(f, dtype=float)
    if f.size != K.size:
        raise SolverError(f"load vector size {f.size} does not match operator {K.size}")
    A = K.gram_product(B)
    b = B.T @ f
    if g is not None:
        S = K.gram @ B
        b = b - S.T @ (K.gram_weights * (K.gram @ np.asarray(g, dtype=float)))
    return MultiscaleSystem(matrix=A, rhs=b, basis=B, corrector=basis)


def solve_multiscale(system: MultiscaleSystem) -> np.ndarray:
    """Solve the reduced system and expand to the full dof vector."""
    coeff = scipy.linalg.cho_solve(system.factor(), system.rhs)
    return system.basis @ coeff


def galerkin_residual(K: AssembledOperator, system: MultiscaleSystem,
                      u: np.ndarray, f: np.ndarray) -> float:
    """max_i |(K u - f, b_i)| over the corrected basis (orthogonality check)."""
    r = K.matrix @ u - f
    return float(np.abs(system.basis.T @ r).max())


def solve_reference(K: AssembledOperator, net: SpatialNetwork, f: np.ndarray,
                    g: np.ndarray | None = None, tol: float = REFERENCE_TOL,
                    method: str = "auto"):
    """Fine-scale constrained solve: (K u, v) = (f, v) with u = g on Gamma.

    `g` supplies Dirichlet values (full dof vector; only constrained entries
    are read).  method: 'auto' tries a sparse factorization and verifies the
    residual, falling back to Jacobi-preconditioned CG; 'cg' goes straight
    to CG.  Returns (u, SolveReport).
    """
    f = np.asarray(f, dtype=float)
    fdofs = free_dofs(net, K.ncomp)
    u = np.zeros(K.size)
    if g is not None:
        g = np.asarray(g, dtype=float)
        u[:] = g
        u[fdofs] = 0.0
    rhs_full = f - (K.matrix @ u if g is not None else 0.0)
    K_ff = K.matrix[fdofs][:, fdofs]
    b = rhs_full[fdofs]
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return u, SolveReport(0, 0.0, 0.0, "trivial")
    t0 = time.perf_counter()
    x = None
    if method == "auto":
        try:
            x = spla.splu(K_ff.tocsc()).solve(b)
            res = float(np.linalg.norm(K_ff @ x - b)) / bnorm
            if not np.isfinite(res) or res > tol:
                x = None
            else:
                report = SolveReport(0, res, time.perf_counter() - t0, "lu")
        except RuntimeError:
            x = None
    elif method != "cg":
        raise SolverError(f"unknown reference method {method!r}")
    if x is None:
        x, rep = cg_solve(K_ff, b, tol=tol, check_symmetry=False)
        report = SolveReport(rep.iterations, rep.residual,
                             time.perf_counter() - t0, "cg")
    u[fdofs] = x
    return u, report


def solve_coarse_fem(K: AssembledOperator, interp: QuasiInterpolator,
                     f: np.ndarray, g: np.ndarray | None = None) -> np.ndarray:
    """Galerkin solve on the plain coarse space (comparison baseline)."""
    P = coarse_block_basis(interp, K.ncomp)
    f = np.asarray(f, dtype=float)
    A = K.gram_product(P)
    b = P.T @ f
    if g is not None:
        g = np.asarray(g, dtype=float)
        b = b - (K.gram @ P).T @ (K.gram_weights * (K.gram @ g))
    try:
        coeff = scipy.linalg.solve(A, b, assume_a="pos")
    except scipy.linalg.LinAlgError as exc:
        raise SolverError(f"coarse Galerkin system singular: {exc}") from exc
    u = P @ coeff
    return u if g is None else u + g


def solve_lod(K: AssembledOperator, interp: QuasiInterpolator, k: int,
              f: np.ndarray, g: np.ndarray | None = None):
    """Full localized multiscale solve with optional Dirichlet lifting.

    Without g this is the plain reduced Galerkin solve.  With boundary data
    g (a full dof vector, ideally a coarse function), the homogeneous
    problem is solved with load f - K g and the lifted corrector
    (1 - Q^k) g is added back, so the result matches g exactly on the
    Dirichlet dofs.  The basis correctors and the boundary corrector share
    one patch-factorization sweep.  Returns (u, MultiscaleSystem).
    """
    f = np.asarray(f, dtype=float)
    extra = None if g is None else [np.asarray(g, dtype=float)]
    Q, extra_out, reports = _run_element_solves(K, interp, k, extra=extra)
    basis = CorrectorBasis(k=k, ncomp=K.ncomp, matrix=Q, interp=interp,
                           reports=reports)
    if g is None:
        system = assemble_multiscale(K, basis, f)
        return solve_multiscale(system), system
    g = np.asarray(g, dtype=float)
    lift = g - extra_out[0]
    system = assemble_multiscale(K, basis, f, g=g)
    u0 = solve_multiscale(system)
    return u0 + lift, system


def dirichlet_lifting(K: AssembledOperator, interp: QuasiInterpolator,
                      k: int, g: np.ndarray):
    """Lifted boundary corrector (1 - Q^k) g and the load correction -K g.

    g should be a coarse function interpolating the boundary data; other
    data still computes but the localization theory degrades.
    """
    g = np.asarray(g, dtype=float)
    qg = correct_function(K, interp, k, g)
    return g - qg, -(K.matrix @ g)


class IdealOracle:
    """Dense ideal-method reference on small problems.

    Builds an explicit null-space basis of the coarse functionals over the
    free dofs, so the ideal corrector, the ideal Galerkin solution and the
    fine-scale projector are direct dense solves.  Guarded by a dof cap.
    """

    def __init__(self, K: AssembledOperator, interp: QuasiInterpolator,
                 cap: int = 2000):
        if K.size > cap:
            raise SolverError(f"ideal oracle capped at {cap} dofs, got {K.size}")
        self.K = K
        self.interp = interp
        self.net = interp.net
        self.fdofs = free_dofs(self.net, K.ncomp)
        n, N, m0 = K.ncomp, self.net.num_nodes, interp.num_free
        C = sparse.kron(sparse.identity(n), interp.functional_free).tocsr()
        C_free = C[:, self.fdofs].toarray()
        self.null = scipy.linalg.null_space(C_free)
        G_f = K.gram[:, self.fdofs].toarray()
        GZ = G_f @ self.null
        self.reduced = GZ.T @ (K.gram_weights[:, None] * GZ)

    def corrector(self, v: np.ndarray, element: int | None = None) -> np.ndarray:
        """Ideal corrector Q v (element=None) or element corrector Q_T v."""
        v = np.asarray(v, dtype=float)
        if element is None:
            rhs_full = self.K.matrix @ v
        else:
            ws = _PatchWorkspace(self.K, self.interp)
            rhs_full = ws.element_operator(int(element)) @ v
        rhs = self.null.T @ rhs_full[self.fdofs]
        coeff = scipy.linalg.solve(self.reduced, rhs, assume_a="sym")
        out = np.zeros(self.K.size)
        out[self.fdofs] = self.null @ coeff
        return out

    def galerkin(self, f: np.ndarray) -> np.ndarray:
        """Ideal multiscale Galerkin solution for the load f."""
        f = np.asarray(f, dtype=float)
        B = coarse_block_basis(self.interp, self.K.ncomp).toarray()
        for j in range(B.shape[1]):
            B[:, j] -= self.corrector(B[:, j])
        A = self.K.gram_product(B)
        b = B.T @ f
        coeff = scipy.linalg.solve(A, b, assume_a="pos")
        return B @ coeff
