"""Uniform hypercube partition of the box domain and Q1 coarse basis.

Elements are half-open boxes (closed on the upper domain faces) so every
point of the domain belongs to exactly one element.  Element and mesh-node
indexing is lexicographic over the integer lattice; free mesh nodes (those
whose hat function vanishes on the constrained boundary faces) are
enumerated first so reduced-system dof numbering is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.sparse as sparse

from .errors import MeshError
from .network import SpatialNetwork

# Boundary faces are (axis, side) pairs; side 0 is x_axis = 0, side 1 is
# x_axis = l_axis.
Face = tuple[int, int]


def parse_faces(spec, dim: int) -> frozenset[Face]:
    """Normalize a face specification ('all', None, or iterable of faces)."""
    if spec is None:
        return frozenset()
    if spec == "all":
        return frozenset((ax, s) for ax in range(dim) for s in (0, 1))
    faces = set()
    for f in spec:
        ax, side = int(f[0]), int(f[1])
        if not (0 <= ax < dim and side in (0, 1)):
            raise MeshError(f"invalid boundary face {f!r} for dimension {dim}")
        faces.add((ax, side))
    return frozenset(faces)


@dataclass(frozen=True)
class CoarseMesh:
    """Uniform partition of [0,l_1]x...x[0,l_d] into cubes of side H."""

    domain: np.ndarray
    H: float
    nel: np.ndarray              # elements per axis
    dirichlet_faces: frozenset[Face]

    def __post_init__(self):
        object.__setattr__(self, "domain", np.asarray(self.domain, dtype=float))
        object.__setattr__(self, "nel", np.asarray(self.nel, dtype=np.int64))
        nnodes = self.nel + 1
        # Mesh node lattice coordinates, lexicographic (C-order ravel).
        grids = np.meshgrid(*[np.arange(k) for k in nnodes], indexing="ij")
        lattice = np.stack([g.ravel() for g in grids], axis=1)
        coords = lattice * self.H
        on_gamma = np.zeros(len(lattice), dtype=bool)
        for ax, side in self.dirichlet_faces:
            target = 0 if side == 0 else self.nel[ax]
            on_gamma |= lattice[:, ax] == target
        free = np.flatnonzero(~on_gamma)
        fixed = np.flatnonzero(on_gamma)
        dof_of_node = np.empty(len(lattice), dtype=np.int64)
        dof_of_node[free] = np.arange(len(free))
        dof_of_node[fixed] = len(free) + np.arange(len(fixed))
        for name, val in (("node_lattice", lattice), ("node_coords", coords),
                          ("free_mesh_nodes", free), ("dof_of_node", dof_of_node)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    # counts -----------------------------------------------------------
    @property
    def dim(self) -> int:
        return self.domain.size

    @property
    def num_elements(self) -> int:
        return int(np.prod(self.nel))

    @property
    def num_mesh_nodes(self) -> int:
        return int(np.prod(self.nel + 1))

    @property
    def num_free_nodes(self) -> int:
        return len(self.free_mesh_nodes)

    # index helpers ------------------------------------------------------
    def element_id(self, lattice: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(lattice).T), tuple(self.nel))

    def element_lattice(self, eid) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(eid), tuple(self.nel)), axis=-1)

    def mesh_node_id(self, lattice: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(lattice).T), tuple(self.nel + 1))

    def locate_element(self, points: np.ndarray) -> np.ndarray:
        """Element id containing each point (half-open boxes, upper faces closed)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        tol = 1e-12 * max(1.0, float(self.domain.max()))
        if np.any(pts < -tol) or np.any(pts > self.domain[None, :] + tol):
            raise MeshError("point outside the domain box")
        idx = np.floor(pts / self.H).astype(np.int64)
        idx = np.clip(idx, 0, self.nel[None, :] - 1)
        out = self.element_id(idx)
        return out if np.asarray(points).ndim == 2 else int(out[0])

    def element_patch(self, eid: int, k: int) -> np.ndarray:
        """Element ids within Chebyshev lattice distance k of element eid."""
        if k < 0:
            raise MeshError("patch radius must be nonnegative")
        center = self.element_lattice(eid)
        lo = np.maximum(center - k, 0)
        hi = np.minimum(center + k, self.nel - 1)
        ranges = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        grid = np.meshgrid(*ranges, indexing="ij")
        lattice = np.stack([g.ravel() for g in grid], axis=1)
        return np.sort(self.element_id(lattice))

    def patch_of_elements(self, eids: np.ndarray, k: int) -> np.ndarray:
        """Union of element patches (U_k of an element set)."""
        out = np.unique(np.concatenate([self.element_patch(int(e), k) for e in eids]))
        return out

    def element_corners(self, eid: int) -> np.ndarray:
        """Mesh node ids of the 2^d corners, in lexicographic offset order."""
        base = self.element_lattice(eid)
        offsets = _corner_offsets(self.dim)
        return self.mesh_node_id(base[None, :] + offsets)

    def assignment_element(self, node_id: int) -> int:
        """The unique element containing mesh node node_id (half-open rule)."""
        return int(self.locate_element(self.node_coords[node_id][None, :])[0])

    def elements_at_node(self, node_id: int) -> np.ndarray:
        """Ids of the <= 2^d elements adjacent to a mesh node (hat support)."""
        lat = self.node_lattice[node_id]
        ids = []
        for off in _corner_offsets(self.dim):
            cand = lat - off
            if np.all(cand >= 0) and np.all(cand <= self.nel - 1):
                ids.append(int(self.element_id(cand[None, :])[0]))
        return np.sort(np.array(ids, dtype=np.int64))


def _corner_offsets(dim: int) -> np.ndarray:
    out = np.stack(np.meshgrid(*[np.arange(2)] * dim, indexing="ij"),
                   axis=-1).reshape(-1, dim)
    return out


def build_coarse_mesh(domain, H, dirichlet_faces=None,
                      R0: float | None = None, strict: bool = False,
                      warn=None) -> CoarseMesh:
    """Build the uniform partition; H may be a float, Fraction or 'p/q' string.

    Every domain side must be an integer multiple of H.  When the network
    locality scale R0 is supplied, the stability requirement H >= 4*d*R0 is
    checked; violations raise in strict mode and otherwise invoke `warn`
    (a callable receiving a message).
    """
    if isinstance(H, str):
        H = Fraction(H)
    Hf = float(H)
    domain = np.asarray(domain, dtype=float)
    if Hf <= 0:
        raise MeshError("H must be positive")
    nel = np.empty(domain.size, dtype=np.int64)
    for i, l in enumerate(domain):
        ratio = l / Hf
        nel[i] = int(round(ratio))
        if nel[i] < 1 or abs(nel[i] * Hf - l) > 1e-9 * max(1.0, l):
            raise MeshError(f"domain side {l} is not an integer multiple of H={Hf}")
    faces = parse_faces(dirichlet_faces, domain.size)
    if R0 is not None:
        bound = 4 * domain.size * R0
        if Hf < bound:
            msg = (f"H={Hf:g} violates the stability bound H >= 4*d*R0 = {bound:g} "
                   f"(R0={R0:g}); interpolation constants are not guaranteed")
            if strict:
                raise MeshError(msg)
            if warn is not None:
                warn(msg)
    return CoarseMesh(domain, Hf, nel, faces)


def coarse_basis_matrix(mesh: CoarseMesh, net: SpatialNetwork) -> sparse.csr_matrix:
    """Q1 hat-function values at the network nodes, shape (num_nodes, m).

    Rows sum to one (partition of unity); column j is supported on the
    network nodes of the elements adjacent to mesh node j.
    """
    if mesh.dim != net.dim:
        raise MeshError("mesh and network dimension mismatch")
    pts = net.coords
    idx = np.clip(np.floor(pts / mesh.H).astype(np.int64), 0, mesh.nel[None, :] - 1)
    local = pts / mesh.H - idx  # in [0, 1]
    offsets = _corner_offsets(mesh.dim)
    rows, cols, vals = [], [], []
    node_ids = np.arange(net.num_nodes)
    for off in offsets:
        w = np.ones(net.num_nodes)
        for ax in range(mesh.dim):
            w = w * (local[:, ax] if off[ax] else 1.0 - local[:, ax])
        corner = mesh.mesh_node_id(idx + off[None, :])
        rows.append(node_ids)
        cols.append(corner)
        vals.append(w)
    mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(net.num_nodes, mesh.num_mesh_nodes),
    ).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat
