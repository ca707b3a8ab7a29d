"""Idempotent quasi-interpolation onto the coarse Q1 space.

Every mesh node k owns the unique element T_k containing it.  Its dual
function psi_k is the combination of T_k's corner hats that is biorthogonal
to the hats under the mass inner product restricted to T_k.  The
interpolation of v is then the coarse function whose free nodal values are
the weighted element averages (M_{T_k} psi_k, v); by construction the
operator reproduces coarse functions exactly and is idempotent.

Vector-valued problems reuse the scalar functional and basis matrices once
per component (component-major dof layout).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sparse

from .errors import InterpolationError
from .mesh import CoarseMesh, coarse_basis_matrix
from .network import SpatialNetwork
from .operators import AssembledOperator

_SINGULAR_REL = 1e-12  # Gram eigenvalue threshold relative to max diagonal


class QuasiInterpolator:
    """Dual-basis interpolation operator for one mesh/network pair.

    Attributes
    ----------
    functional : csr_matrix, shape (m, num_nodes)
        Row k (coarse dof order, free mesh nodes first) applies
        v -> (M_{T_k} psi_k, v).
    basis : csr_matrix, shape (num_nodes, m)
        Hat-function values, columns in the same coarse dof order.
    psi_norms : ndarray, shape (m,)
        |psi_k|_{M,T_k} per coarse dof.
    gram_cond : ndarray, shape (num_elements,)
        Condition number of each element Gram matrix.
    """

    def __init__(self, mesh: CoarseMesh, net: SpatialNetwork,
                 functional: sparse.csr_matrix, basis: sparse.csr_matrix,
                 psi_norms: np.ndarray, gram_cond: np.ndarray,
                 assignment: np.ndarray, elem_of_node: np.ndarray):
        self.mesh = mesh
        self.net = net
        self.functional = functional
        self.basis = basis
        self.psi_norms = psi_norms
        self.gram_cond = gram_cond
        self.assignment = assignment      # mesh node id -> assignment element
        self.elem_of_node = elem_of_node  # network node -> element id

    @property
    def num_free(self) -> int:
        return self.mesh.num_free_nodes

    @property
    def functional_free(self) -> sparse.csr_matrix:
        return self.functional[: self.num_free]

    @property
    def basis_free(self) -> sparse.csr_matrix:
        return self.basis[:, : self.num_free]

    def coarse_dofs(self, v: np.ndarray, ncomp: int = 1) -> np.ndarray:
        """Functional values (M_{T_k} psi_k, v_c) per component, free nodes."""
        n = self.net.num_nodes
        v = np.asarray(v, dtype=float)
        if v.size != ncomp * n:
            raise InterpolationError(f"dof vector has size {v.size}, expected {ncomp * n}")
        blocks = [self.functional_free @ comp for comp in v.reshape(ncomp, n)]
        return np.concatenate(blocks)

    def interpolate(self, v: np.ndarray, ncomp: int = 1) -> np.ndarray:
        """Apply the interpolation operator componentwise."""
        n = self.net.num_nodes
        v = np.asarray(v, dtype=float)
        if v.size != ncomp * n:
            raise InterpolationError(f"dof vector has size {v.size}, expected {ncomp * n}")
        out = [self.basis_free @ (self.functional_free @ comp)
               for comp in v.reshape(ncomp, n)]
        return np.concatenate(out)


def compute_dual_basis(mesh: CoarseMesh, net: SpatialNetwork,
                       mass: AssembledOperator) -> QuasiInterpolator:
    """Build the interpolator from the element Gram matrices.

    Raises InterpolationError naming the offending element whenever a Gram
    matrix is (numerically) singular, i.e. the element holds too few or
    degenerately placed network nodes for a stable dual basis at this H.
    """
    if mass.kind != "mass" or mass.ncomp != 1:
        raise InterpolationError("compute_dual_basis expects the scalar mass operator")
    weights = mass.diagonal
    phi = coarse_basis_matrix(mesh, net)
    elem_of_node = mesh.locate_element(net.coords)
    order = np.argsort(elem_of_node, kind="stable")
    bounds = np.searchsorted(elem_of_node[order], np.arange(mesh.num_elements + 1))

    d = mesh.dim
    two_d = 1 << d
    m = mesh.num_mesh_nodes
    assignment = np.array([mesh.assignment_element(k) for k in range(m)],
                          dtype=np.int64)

    # mesh node -> corner slot within its assignment element; slots follow
    # the axis-0-major binary order of _corner_offsets.
    corner_slot = np.empty(m, dtype=np.int64)
    for k in range(m):
        off = mesh.node_lattice[k] - mesh.element_lattice(assignment[k])
        slot = 0
        for ax in range(d):
            slot = 2 * slot + int(off[ax])
        corner_slot[k] = slot

    gram_cond = np.full(mesh.num_elements, np.inf)
    grams = {}
    local_nodes = {}
    local_w = {}
    local_W = {}
    for e in range(mesh.num_elements):
        nodes = order[bounds[e]:bounds[e + 1]]
        local_nodes[e] = nodes
        if nodes.size == 0:
            continue
        W = phi[nodes][:, mesh.element_corners(e)].toarray()
        w = weights[nodes]
        lam = W.T @ (w[:, None] * W)
        grams[e] = lam
        local_w[e] = w
        local_W[e] = W
        eigs = np.linalg.eigvalsh(lam)
        gram_cond[e] = float(eigs[-1] / eigs[0]) if eigs[0] > 0 else np.inf

    rows, cols, vals = [], [], []
    psi_norms = np.empty(m)
    dof_of_node = mesh.dof_of_node
    for k in range(m):
        e = int(assignment[k])
        lam = grams.get(e)
        if lam is None:
            raise InterpolationError(
                f"element {e} contains no network nodes; dual basis undefined "
                f"(mesh node {k})")
        eigs = np.linalg.eigvalsh(lam)
        if eigs[0] <= _SINGULAR_REL * lam.diagonal().max():
            raise InterpolationError(
                f"element {e} has a singular Gram matrix (min eig {eigs[0]:.3e}); "
                "too few or degenerate network nodes at this mesh size")
        rhs = np.zeros(two_d)
        rhs[corner_slot[k]] = 1.0
        alpha = np.linalg.solve(lam, rhs)
        psi_norms[dof_of_node[k]] = np.sqrt(max(alpha[corner_slot[k]], 0.0))
        nodes = local_nodes[e]
        values = local_w[e] * (local_W[e] @ alpha)
        rows.append(np.full(nodes.size, dof_of_node[k], dtype=np.int64))
        cols.append(nodes)
        vals.append(values)

    functional = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, net.num_nodes)).tocsr()
    functional.sort_indices()

    # Reorder hat columns into coarse dof order (free mesh nodes first).
    perm = np.empty(m, dtype=np.int64)
    perm[dof_of_node] = np.arange(m)
    basis = phi[:, perm].tocsr()
    basis.sort_indices()
    return QuasiInterpolator(mesh, net, functional, basis, psi_norms,
                             gram_cond, assignment, elem_of_node)


def interpolate(interp: QuasiInterpolator, v: np.ndarray, ncomp: int = 1) -> np.ndarray:
    return interp.interpolate(v, ncomp)


def coarse_dofs(interp: QuasiInterpolator, v: np.ndarray, ncomp: int = 1) -> np.ndarray:
    return interp.coarse_dofs(v, ncomp)
