"""Node-wise operator assembly for spatial networks.

All operators are sums of symmetric positive semi-definite per-node
contributions.  Two representations are kept side by side:

* the assembled sparse matrix plus the full triplet list tagged by owning
  node, so restriction to a node set reproduces the partial sums exactly;
* a factorized Gram form K = G^T diag(w) G whose rows are the individual
  energy terms (edge differences, projected elongations, bending
  functionals).  Quadratic forms evaluated through it are sums of squares,
  which matters for soft structural models whose energies are many orders
  below the raw stiffness scale.

Each Gram row carries the pair of nodes owning it (an edge splits half per
endpoint, a bending term belongs to its center node), so region-restricted
quadratic forms agree with the triplet restriction.

Degree-of-freedom layout is component-major: dof(c, x) = c*num_nodes + x.

Models
------
mass        diagonal, entry(x) = sum of half edge lengths at x
laplacian   reciprocal edge-length weighted graph Laplacian
heat        laplacian with per-edge conductivity gamma
spring      axial (central-force) elasticity, ncomp = dim
fiber       spring + two transverse bending modes, ncomp = 3
fiber2d     spring + single in-plane bending mode, ncomp = 2
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse

from .errors import NetworkValidationError, NetlodError
from .network import SpatialNetwork


@dataclass(frozen=True)
class FiberParams:
    """Round-wire material data from which stiffness coefficients derive."""

    wire_radius: float
    young_modulus: float

    @property
    def area(self) -> float:
        return math.pi * self.wire_radius ** 2

    @property
    def second_moment(self) -> float:
        return 0.25 * math.pi * self.wire_radius ** 4

    @property
    def gamma_axial(self) -> float:
        """Axial stiffness coefficient E*A used by the spring part."""
        return self.young_modulus * self.area

    def gamma_bending(self, len_y, len_z):
        """Pair bending coefficient 2*E*I / (|x-y| + |x-z|)^2."""
        return 2.0 * self.young_modulus * self.second_moment / (len_y + len_z) ** 2


@dataclass(frozen=True)
class EdgeCoefficients:
    """Per-edge coefficients and optional fiber material data."""

    gamma: np.ndarray | None = None
    fiber: FiberParams | None = None

    def __post_init__(self):
        if self.gamma is not None:
            g = np.asarray(self.gamma, dtype=float)
            if np.any(g <= 0) or not np.all(np.isfinite(g)):
                raise NetworkValidationError("edge coefficients must be positive and finite")
            g.setflags(write=False)
            object.__setattr__(self, "gamma", g)


class _GramParts:
    """Accumulator for energy-term rows of the factorized form."""

    def __init__(self, size: int):
        self.size = size
        self.rows = []
        self.cols = []
        self.vals = []
        self.weights = []
        self.owners = []
        self._next = 0

    def add_rows(self, cols, vals, weights, owner_a, owner_b):
        """Append len(weights) rows; cols/vals are (nrows, entries_per_row)."""
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        nrows = len(weights)
        ids = self._next + np.arange(nrows, dtype=np.int64)
        self._next += nrows
        self.rows.append(np.repeat(ids, cols.shape[1]))
        self.cols.append(cols.ravel())
        self.vals.append(vals.ravel())
        self.weights.append(np.asarray(weights, dtype=float))
        self.owners.append(np.stack([np.asarray(owner_a, dtype=np.int64),
                                     np.asarray(owner_b, dtype=np.int64)], axis=1))

    def build(self):
        if not self.weights:
            return (sparse.csr_matrix((0, self.size)), np.empty(0),
                    np.empty((0, 2), dtype=np.int64))
        G = sparse.coo_matrix(
            (np.concatenate(self.vals),
             (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self._next, self.size)).tocsr()
        return G, np.concatenate(self.weights), np.concatenate(self.owners, axis=0)


class AssembledOperator:
    """Sparse symmetric operator with per-node contribution bookkeeping.

    Attributes
    ----------
    matrix : csr_matrix, shape (size, size)
        Canonical (sorted, deduplicated) sparse matrix.
    kind : str
    ncomp : int
        Components per node; size = ncomp * num_nodes.
    gram : csr_matrix, shape (num_terms, size)
        Energy-term rows; (K v, v) == sum(gram_weights * (gram @ v)**2).
    """

    def __init__(self, kind: str, num_nodes: int, ncomp: int,
                 rows, cols, vals, owners,
                 gram: sparse.csr_matrix, gram_weights: np.ndarray,
                 gram_owners: np.ndarray):
        self.kind = kind
        self.num_nodes = int(num_nodes)
        self.ncomp = int(ncomp)
        self.size = self.ncomp * self.num_nodes
        self._rows = np.asarray(rows, dtype=np.int64)
        self._cols = np.asarray(cols, dtype=np.int64)
        self._vals = np.asarray(vals, dtype=float)
        self._owners = np.asarray(owners, dtype=np.int64)
        self.gram = gram
        self.gram_weights = gram_weights
        self.gram_owners = gram_owners
        self.matrix = sparse.coo_matrix(
            (self._vals, (self._rows, self._cols)), shape=(self.size, self.size)
        ).tocsr()
        self.matrix.sum_duplicates()
        self.matrix.sort_indices()

    def node_contribution(self, node: int) -> sparse.csr_matrix:
        """The single-node operator K_x as a sparse matrix."""
        sel = self._owners == node
        return sparse.coo_matrix(
            (self._vals[sel], (self._rows[sel], self._cols[sel])),
            shape=(self.size, self.size),
        ).tocsr()

    def _region_factors(self, region: np.ndarray) -> np.ndarray:
        mask = np.zeros(self.num_nodes, dtype=bool)
        mask[np.asarray(region, dtype=np.int64)] = True
        inside = mask[self.gram_owners]
        return 0.5 * (inside[:, 0] + inside[:, 1])

    def restrict(self, region: np.ndarray) -> "AssembledOperator":
        """Sum of node contributions over the node set `region` (K_omega)."""
        region = np.asarray(region, dtype=np.int64)
        mask = np.zeros(self.num_nodes, dtype=bool)
        mask[region] = True
        sel = mask[self._owners]
        factors = self._region_factors(region)
        keep = factors > 0
        return AssembledOperator(self.kind, self.num_nodes, self.ncomp,
                                 self._rows[sel], self._cols[sel],
                                 self._vals[sel], self._owners[sel],
                                 self.gram[keep],
                                 self.gram_weights[keep] * factors[keep],
                                 self.gram_owners[keep])

    def reassemble(self) -> sparse.csr_matrix:
        """Independent re-sum of all node contributions (for verification)."""
        mat = sparse.coo_matrix(
            (self._vals, (self._rows, self._cols)), shape=(self.size, self.size)
        ).tocsr()
        mat.sum_duplicates()
        mat.sort_indices()
        return mat

    def quadratic_form(self, v: np.ndarray, region: np.ndarray | None = None) -> float:
        """(K_region v, v) as a weighted sum of squared energy terms."""
        t = self.gram @ np.asarray(v, dtype=float)
        w = self.gram_weights
        if region is not None:
            w = w * self._region_factors(region)
        return float(np.sum(w * t * t))

    def gram_product(self, B, region: np.ndarray | None = None):
        """Dense B^T K B evaluated through the factorized form (PSD shape)."""
        S = self.gram @ B
        w = self.gram_weights if region is None \
            else self.gram_weights * self._region_factors(region)
        if sparse.issparse(S):
            A = (S.T @ sparse.diags(w) @ S).toarray()
        else:
            A = S.T @ (w[:, None] * S)
        return 0.5 * (A + A.T)

    @property
    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    def __matmul__(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v


def restrict_operator(op: AssembledOperator, region: np.ndarray) -> AssembledOperator:
    return op.restrict(region)


def assemble_mass(net: SpatialNetwork, ncomp: int = 1) -> AssembledOperator:
    """Diagonal mass operator; entry at x is half the total edge length at x."""
    n = net.num_nodes
    half = 0.5 * net.edge_lengths
    diag = np.zeros(n)
    np.add.at(diag, net.edges[:, 0], half)
    np.add.at(diag, net.edges[:, 1], half)
    if np.any(diag <= 0):
        bad = int(np.flatnonzero(diag <= 0)[0])
        raise NetworkValidationError(f"node {bad} has zero mass (isolated)")
    nodes = np.arange(n, dtype=np.int64)
    rows = np.concatenate([c * n + nodes for c in range(ncomp)])
    vals = np.tile(diag, ncomp)
    owners = np.tile(nodes, ncomp)
    parts = _GramParts(ncomp * n)
    parts.add_rows(rows[:, None], np.ones((ncomp * n, 1)), vals, owners, owners)
    G, w, gown = parts.build()
    return AssembledOperator("mass", n, ncomp, rows, rows, vals, owners, G, w, gown)


def _edge_difference_ops(net: SpatialNetwork, weight: np.ndarray, kind: str):
    """Scalar operator sum_e w_e (v(p) - v(q))^2, half per owning endpoint."""
    p, q = net.edges[:, 0], net.edges[:, 1]
    w = 0.5 * weight
    rows, cols, vals, owners = [], [], [], []
    for owner in (p, q):
        for r, c, sgn in ((p, p, 1.0), (q, q, 1.0), (p, q, -1.0), (q, p, -1.0)):
            rows.append(r)
            cols.append(c)
            vals.append(sgn * w)
            owners.append(owner)
    parts = _GramParts(net.num_nodes)
    parts.add_rows(np.stack([p, q], axis=1),
                   np.tile([1.0, -1.0], (net.num_edges, 1)),
                   weight, p, q)
    G, gw, gown = parts.build()
    return AssembledOperator(kind, net.num_nodes, 1,
                             np.concatenate(rows), np.concatenate(cols),
                             np.concatenate(vals), np.concatenate(owners),
                             G, gw, gown)


def assemble_laplacian(net: SpatialNetwork) -> AssembledOperator:
    """Reciprocal edge-length weighted graph Laplacian (kernel: constants)."""
    if net.edge_lengths.min() <= 0:
        raise NetworkValidationError("zero-length edge")
    return _edge_difference_ops(net, 1.0 / net.edge_lengths, "laplacian")


def _edge_gamma(net: SpatialNetwork, coeffs: EdgeCoefficients | None) -> np.ndarray:
    if coeffs is not None and coeffs.gamma is not None:
        gamma = coeffs.gamma
    elif net.gamma is not None:
        gamma = net.gamma
    elif coeffs is not None and coeffs.fiber is not None:
        return np.full(net.num_edges, coeffs.fiber.gamma_axial)
    else:
        raise NetlodError("missing per-edge coefficient (no gamma supplied)")
    if gamma.shape != (net.num_edges,):
        raise NetlodError("gamma has wrong length for this network")
    return gamma


def assemble_heat_operator(net: SpatialNetwork,
                           coeffs: EdgeCoefficients | None = None) -> AssembledOperator:
    """Scalar conduction operator; gamma == 1 reproduces the Laplacian."""
    gamma = _edge_gamma(net, coeffs)
    return _edge_difference_ops(net, gamma / net.edge_lengths, "heat")


def _spring_ops(net: SpatialNetwork, gamma: np.ndarray, ncomp: int,
                kind: str = "spring") -> AssembledOperator:
    """Projected-elongation operator; ncomp may exceed dim (planar embedding)."""
    n, d = net.num_nodes, net.dim
    p, q = net.edges[:, 0], net.edges[:, 1]
    lengths = net.edge_lengths
    dirs = np.zeros((net.num_edges, ncomp))
    dirs[:, :d] = (net.coords[p] - net.coords[q]) / lengths[:, None]
    outer = np.einsum("ec,ed->ecd", dirs, dirs)
    weight = gamma / lengths
    w = 0.5 * weight
    rows, cols, vals, owners = [], [], [], []
    for owner in (p, q):
        for r_node, c_node, sgn in ((p, p, 1.0), (q, q, 1.0), (p, q, -1.0), (q, p, -1.0)):
            for c in range(ncomp):
                for c2 in range(ncomp):
                    rows.append(c * n + r_node)
                    cols.append(c2 * n + c_node)
                    vals.append(sgn * w * outer[:, c, c2])
                    owners.append(owner)
    parts = _GramParts(ncomp * n)
    gcols = np.concatenate([np.stack([c * n + p, c * n + q], axis=1)
                            for c in range(ncomp)], axis=1)
    gvals = np.concatenate([np.stack([dirs[:, c], -dirs[:, c]], axis=1)
                            for c in range(ncomp)], axis=1)
    parts.add_rows(gcols, gvals, weight, p, q)
    G, gw, gown = parts.build()
    return AssembledOperator(kind, n, ncomp,
                             np.concatenate(rows), np.concatenate(cols),
                             np.concatenate(vals), np.concatenate(owners),
                             G, gw, gown)


def assemble_spring_operator(net: SpatialNetwork,
                             coeffs: EdgeCoefficients | None = None) -> AssembledOperator:
    """Axial elasticity operator with ncomp = dim components per node.

    Each edge penalizes the relative displacement projected on the edge
    direction; rigid translations and linearized rotations are in the
    kernel of the unconstrained operator.
    """
    gamma = _edge_gamma(net, coeffs)
    return _spring_ops(net, gamma, net.dim)


def _normal_fallback(direction: np.ndarray) -> np.ndarray:
    """Deterministic unit normal for a (near-)collinear arm pair.

    Crosses the first arm direction with the coordinate axis of its
    smallest-magnitude component (ties broken by lowest axis index).
    """
    axis = int(np.argmin(np.abs(direction)))
    e = np.zeros(3)
    e[axis] = 1.0
    nrm = np.cross(direction, e)
    return nrm / np.linalg.norm(nrm)


def _bending_triples(net: SpatialNetwork, policy: str, angle_deg: float):
    """Yield (x, y, z, dir_xy, dir_xz, len_y, len_z) per unordered pair."""
    if policy not in ("all", "collinear"):
        raise NetlodError(f"unknown triple policy {policy!r}")
    cos_cut = -math.cos(math.radians(angle_deg))
    adj = net.adjacency_lists()
    coords = net.coords
    for x in range(net.num_nodes):
        nbrs = adj[x]
        if len(nbrs) < 2:
            continue
        arms = coords[x][None, :] - coords[nbrs]
        lens = np.linalg.norm(arms, axis=1)
        dirs = arms / lens[:, None]
        for i in range(len(nbrs)):
            for j in range(i + 1, len(nbrs)):
                if policy == "collinear" and float(dirs[i] @ dirs[j]) > cos_cut:
                    continue
                yield (x, int(nbrs[i]), int(nbrs[j]),
                       dirs[i], dirs[j], float(lens[i]), float(lens[j]))


def bending_pair_directions(dir_xy: np.ndarray, dir_xz: np.ndarray,
                            collinear_tol: float = 1e-12):
    """Projection directions (one per bending mode) for a neighbor pair.

    Mode 1 projects both arm differences on the common normal of the arm
    plane; mode 2 projects each arm on its in-plane transverse direction.
    The mode-2 direction of the second arm is sign-aligned with the first
    arm's so that straight (collinear) triples measure a second difference
    and affine fields carry no bending energy.
    """
    cross = np.cross(dir_xy, dir_xz)
    norm = np.linalg.norm(cross)
    if norm <= collinear_tol:
        eta1 = _normal_fallback(dir_xy)
    else:
        eta1 = cross / norm
    eta_y2 = np.cross(dir_xy, eta1)
    eta_z2 = np.cross(dir_xz, eta1)
    if float(dir_xy @ dir_xz) < 0.0:
        eta_z2 = -eta_z2
    return (eta1, eta1), (eta_y2, eta_z2)


def _assemble_bending(net: SpatialNetwork, ncomp: int, triples, gamma_fn,
                      pair_dirs_fn, kind: str) -> AssembledOperator:
    n = net.num_nodes
    rows, cols, vals, owners = [], [], [], []
    parts = _GramParts(ncomp * n)
    for x, y, z, dir_xy, dir_xz, ly, lz in triples:
        gamma = gamma_fn(ly, lz)
        # Ordered pairs double the unordered contribution.
        weight = 2.0 * gamma * (ly + lz) / 4.0
        nodes = np.array([x, y, z], dtype=np.int64)
        dof = (np.arange(ncomp)[:, None] * n + nodes[None, :]).ravel()
        for eta_y, eta_z in pair_dirs_fn(dir_xy, dir_xz):
            g = np.zeros((3, ncomp))
            g[1] = eta_y[:ncomp] / ly
            g[2] = eta_z[:ncomp] / lz
            g[0] = -(g[1] + g[2])
            flat = g.T.ravel()  # dof order: comp-major over [x, y, z]
            block = weight * np.outer(flat, flat)
            rr, cc = np.meshgrid(dof, dof, indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(block.ravel())
            owners.append(np.full(dof.size ** 2, x, dtype=np.int64))
            parts.add_rows(dof[None, :], flat[None, :], [weight], [x], [x])
    if rows:
        trip = (np.concatenate(rows), np.concatenate(cols),
                np.concatenate(vals), np.concatenate(owners))
    else:
        empty = np.empty(0, dtype=np.int64)
        trip = (empty, empty, np.empty(0), empty)
    G, gw, gown = parts.build()
    return AssembledOperator(kind, n, ncomp, *trip, G, gw, gown)


def assemble_fiber_bending(net: SpatialNetwork, coeffs: EdgeCoefficients,
                           triple_policy: str = "all",
                           collinear_angle_deg: float = 10.0) -> AssembledOperator:
    """Transverse bending operator (both modes), ncomp = 3.

    Requires fiber material data; pair coefficients follow the round-wire
    Euler-Bernoulli linearization 2EI/(|x-y|+|x-z|)^2.
    """
    if coeffs.fiber is None:
        raise NetlodError("fiber bending requires fiber material parameters")
    fiber = coeffs.fiber

    def dirs3(dxy, dxz):
        return bending_pair_directions(_embed3(dxy), _embed3(dxz))

    triples = _bending_triples(net, triple_policy, collinear_angle_deg)
    return _assemble_bending(net, 3, triples, fiber.gamma_bending, dirs3,
                             "fiber-bending")


def _embed3(v: np.ndarray) -> np.ndarray:
    if v.size == 3:
        return v
    out = np.zeros(3)
    out[:2] = v
    return out


def _merge_operators(kind: str, a: AssembledOperator,
                     b: AssembledOperator) -> AssembledOperator:
    gram = sparse.vstack([a.gram, b.gram], format="csr")
    return AssembledOperator(
        kind, a.num_nodes, a.ncomp,
        np.concatenate([a._rows, b._rows]), np.concatenate([a._cols, b._cols]),
        np.concatenate([a._vals, b._vals]), np.concatenate([a._owners, b._owners]),
        gram, np.concatenate([a.gram_weights, b.gram_weights]),
        np.concatenate([a.gram_owners, b.gram_owners], axis=0))


def assemble_fiber_operator(net: SpatialNetwork, coeffs: EdgeCoefficients,
                            triple_policy: str = "all",
                            collinear_angle_deg: float = 10.0) -> AssembledOperator:
    """Full fiber model: axial spring part plus both bending modes, ncomp = 3.

    A planar (dim=2) network is embedded with a zero third coordinate; the
    displacement space still has three components per node.
    """
    if coeffs.fiber is None:
        raise NetlodError("fiber model requires fiber material parameters")
    gamma = np.full(net.num_edges, coeffs.fiber.gamma_axial) \
        if coeffs.gamma is None else coeffs.gamma
    spring = _spring_ops(net, gamma, 3)
    bend = assemble_fiber_bending(net, coeffs, triple_policy, collinear_angle_deg)
    return _merge_operators("fiber", spring, bend)


def assemble_fiber2d_bending(net: SpatialNetwork, coeffs: EdgeCoefficients,
                             triple_policy: str = "all",
                             collinear_angle_deg: float = 10.0) -> AssembledOperator:
    """In-plane bending mode of a planar fiber network, ncomp = 2."""
    if net.dim != 2:
        raise NetlodError("fiber2d requires a planar network")
    if coeffs.fiber is None:
        raise NetlodError("fiber bending requires fiber material parameters")
    fiber = coeffs.fiber

    def dirs2(dxy, dxz):
        perp_y = np.array([-dxy[1], dxy[0]])
        perp_z = np.array([-dxz[1], dxz[0]])
        if float(dxy @ dxz) < 0.0:
            perp_z = -perp_z
        return ((perp_y, perp_z),)

    triples = _bending_triples(net, triple_policy, collinear_angle_deg)
    return _assemble_bending(net, 2, triples, fiber.gamma_bending, dirs2,
                             "fiber2d-bending")


def assemble_fiber2d_operator(net: SpatialNetwork, coeffs: EdgeCoefficients,
                              triple_policy: str = "all",
                              collinear_angle_deg: float = 10.0) -> AssembledOperator:
    """In-plane fiber model: 2d spring plus the in-plane bending mode."""
    if coeffs.fiber is None:
        raise NetlodError("fiber model requires fiber material parameters")
    if net.dim != 2:
        raise NetlodError("fiber2d requires a planar network")
    gamma = np.full(net.num_edges, coeffs.fiber.gamma_axial) \
        if coeffs.gamma is None else coeffs.gamma
    spring = _spring_ops(net, gamma, 2)
    bend = assemble_fiber2d_bending(net, coeffs, triple_policy, collinear_angle_deg)
    return _merge_operators("fiber2d", spring, bend)


def seminorm(v: np.ndarray, op: AssembledOperator,
             region: np.ndarray | None = None, psd_tol: float = 1e-12) -> float:
    """|v|_{op,region} = sqrt((op_region v, v)); componentwise for vector v.

    Evaluated through the factorized Gram form (a sum of squares, so the
    PSD guard only trips on an operator defect, never on cancellation).
    `v` may have op.size entries, or a multiple of it when a scalar
    operator is applied per component.
    """
    v = np.asarray(v, dtype=float)
    if v.size % op.size:
        raise NetlodError(f"dof vector size {v.size} incompatible with operator size {op.size}")
    total = 0.0
    for block in v.reshape(-1, op.size):
        total += op.quadratic_form(block, region)
    if total < 0:
        if total < -psd_tol * float(v @ v):
            raise NetlodError(f"operator defect: quadratic form {total:.3e} < 0")
        total = 0.0
    return math.sqrt(total)


def inverse_mass_norm(f: np.ndarray, mass: AssembledOperator) -> float:
    """|f|_{M^-1} = sqrt(sum f_i^2 / M_ii); scalar mass tiles per component."""
    if mass.kind != "mass":
        raise NetlodError("inverse_mass_norm requires a mass operator")
    diag = mass.diagonal
    if np.any(diag <= 0):
        raise NetlodError("mass operator has a nonpositive diagonal entry")
    f = np.asarray(f, dtype=float)
    if f.size % diag.size:
        raise NetlodError("dof vector size incompatible with mass operator")
    total = sum(float(np.sum(block ** 2 / diag)) for block in f.reshape(-1, diag.size))
    return math.sqrt(total)


def assemble_model(net: SpatialNetwork, model: str,
                   coeffs: EdgeCoefficients | None = None,
                   triple_policy: str = "all") -> AssembledOperator:
    """Assemble a named operator model (heat | spring | fiber | fiber2d)."""
    if model == "heat":
        return assemble_heat_operator(net, coeffs)
    if model == "spring":
        return assemble_spring_operator(net, coeffs)
    if model == "fiber":
        if coeffs is None or coeffs.fiber is None:
            raise NetlodError("fiber model requires fiber material parameters")
        return assemble_fiber_operator(net, coeffs, triple_policy)
    if model == "fiber2d":
        if coeffs is None or coeffs.fiber is None:
            raise NetlodError("fiber2d model requires fiber material parameters")
        return assemble_fiber2d_operator(net, coeffs, triple_policy)
    raise NetlodError(f"unknown model {model!r}")
