"""Numerical audits of the coarse-scale network assumptions and study
harnesses for convergence and localization-decay experiments.

The audits estimate the quantities that control the method's accuracy:
box-wise mass density (homogeneity), the locality scale R0 (max edge
length), boundary tagging density, and the constant mu via the second
smallest generalized eigenvalue of the subgraph pencil Lbar v = lambda
Mbar v on connectivity subgraphs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.sparse as sparse

from .errors import DisconnectedRegionError, NetlodError
from .interpolation import compute_dual_basis
from .lod import solve_coarse_fem, solve_lod, solve_reference
from .mesh import build_coarse_mesh
from .network import SpatialNetwork
from .operators import AssembledOperator, assemble_mass, seminorm
from .solvers import generalized_eig_smallest


# ---------------------------------------------------------------------------
# boxes

def _box_membership(coords: np.ndarray, center: np.ndarray, R: float,
                    domain: np.ndarray) -> np.ndarray:
    """Half-open box [c-R, c+R) per axis, closed where c+R hits the domain."""
    lo = center - R
    hi = center + R
    inside = np.ones(len(coords), dtype=bool)
    for ax in range(len(center)):
        closed = hi[ax] >= domain[ax] - 1e-12 * max(1.0, domain[ax])
        inside &= coords[:, ax] >= lo[ax]
        inside &= (coords[:, ax] <= hi[ax]) if closed else (coords[:, ax] < hi[ax])
    return inside


def homogeneity_scan(net: SpatialNetwork, R: float,
                     mass: AssembledOperator | None = None):
    """Mass densities (2R)^(-d) |1|^2_{M,B} on the box lattice tiling the domain.

    The domain sides must be integer multiples of 2R so the boxes tile it
    exactly.  Returns (density grid, rho, sigma) with rho the minimum
    density and sigma the max/min ratio; an empty box yields rho = 0 and
    sigma = inf (homogeneity violated at this R).
    """
    d = net.dim
    side = 2.0 * R
    nboxes = np.empty(d, dtype=np.int64)
    for ax, l in enumerate(net.domain):
        nb = int(round(l / side))
        if nb < 1 or abs(nb * side - l) > 1e-9 * max(1.0, l):
            raise NetlodError(f"domain side {l} is not an integer multiple of 2R={side}")
        nboxes[ax] = nb
    mass = assemble_mass(net) if mass is None else mass
    weights = mass.diagonal
    idx = np.clip((net.coords / side).astype(np.int64), 0, nboxes[None, :] - 1)
    flat = np.ravel_multi_index(tuple(idx.T), tuple(nboxes))
    sums = np.zeros(int(np.prod(nboxes)))
    np.add.at(sums, flat, weights)
    density = sums.reshape(tuple(nboxes)) / side ** d
    dmin, dmax = float(density.min()), float(density.max())
    rho = dmin
    sigma = float("inf") if dmin <= 0 else dmax / dmin
    return density, rho, sigma


@dataclass(frozen=True)
class ConnectivitySubgraph:
    nodes: np.ndarray        # global node ids of the component
    edges: np.ndarray        # edges in local (compacted) indices
    passed: bool             # contains every edge touching B_R(x)


def connectivity_subgraph(net: SpatialNetwork, center, R: float,
                          R0: float) -> ConnectivitySubgraph:
    """Connectivity check for the box B_R(center).

    Take all edges with both endpoints in B_{R+R0}; the check passes when a
    single connected component of that edge set contains every edge with an
    endpoint in B_R.  Returns that component (the largest candidate when
    the check fails).
    """
    center = np.asarray(center, dtype=float)
    coords = net.coords
    in_small = _box_membership(coords, center, R, net.domain)
    in_big = _box_membership(coords, center, R + R0, net.domain)
    e = net.edges
    touch = in_small[e[:, 0]] | in_small[e[:, 1]]
    contained = in_big[e[:, 0]] & in_big[e[:, 1]]
    if not np.any(contained):
        return ConnectivitySubgraph(np.empty(0, np.int64), np.empty((0, 2), np.int64),
                                    passed=not np.any(touch))
    sub_edges = e[contained]
    nodes = np.unique(sub_edges)
    local = -np.ones(net.num_nodes, dtype=np.int64)
    local[nodes] = np.arange(nodes.size)
    ledges = local[sub_edges]
    label = _components(nodes.size, ledges)
    # component of every touching edge (touching edges outside the big box fail)
    stranded = touch & ~contained
    comp_sizes = np.bincount(label)
    touch_labels = np.unique(label[local[e[touch & contained][:, 0]]]) \
        if np.any(touch & contained) else np.empty(0, np.int64)
    if np.any(stranded) or touch_labels.size > 1:
        passed = False
        keep = int(np.argmax(comp_sizes))
    else:
        passed = True
        keep = int(touch_labels[0]) if touch_labels.size else int(np.argmax(comp_sizes))
    sel = label == keep
    comp_nodes = nodes[sel]
    remap = -np.ones(nodes.size, dtype=np.int64)
    remap[sel] = np.arange(int(sel.sum()))
    emask = sel[ledges[:, 0]] & sel[ledges[:, 1]]
    return ConnectivitySubgraph(comp_nodes, remap[ledges[emask]], passed)


def _components(n: int, edges: np.ndarray) -> np.ndarray:
    parent = np.arange(n, dtype=np.int64)

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    for a, b in edges:
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return np.array([find(int(i)) for i in range(n)], dtype=np.int64)


def subgraph_operators(net: SpatialNetwork, sub: ConnectivitySubgraph):
    """Mass diagonal and edge-length weighted Laplacian of a subgraph."""
    coords = net.coords[sub.nodes]
    e = sub.edges
    lengths = np.linalg.norm(coords[e[:, 0]] - coords[e[:, 1]], axis=1)
    nn = len(sub.nodes)
    mdiag = np.zeros(nn)
    np.add.at(mdiag, e[:, 0], 0.5 * lengths)
    np.add.at(mdiag, e[:, 1], 0.5 * lengths)
    w = 1.0 / lengths
    rows = np.concatenate([e[:, 0], e[:, 1], e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 0], e[:, 1], e[:, 1], e[:, 0]])
    vals = np.concatenate([w, w, -w, -w])
    L = sparse.coo_matrix((vals, (rows, cols)), shape=(nn, nn)).tocsr()
    return mdiag, L


# ---------------------------------------------------------------------------
# mu estimation

@dataclass(frozen=True)
class EigenSample:
    mode: str
    R: float
    center: tuple
    lambda2: float
    passed: bool

    @property
    def inv_over_R2(self) -> float:
        return 1.0 / (self.lambda2 * self.R ** 2)


@dataclass
class AuditReport:
    R0: float
    rho: float = float("nan")
    sigma: float = float("nan")
    densities: dict = field(default_factory=dict)   # R -> density grid
    samples: list = field(default_factory=list)     # EigenSample records
    boundary_gaps: dict = field(default_factory=dict)
    connectivity_ok: bool = True

    @property
    def mu2(self) -> float:
        vals = [s.inv_over_R2 for s in self.samples if s.passed]
        return max(vals) if vals else float("nan")

    @property
    def slope(self) -> float:
        """Least-squares slope of log(1/lambda2) against log R."""
        pts = [(s.R, 1.0 / s.lambda2) for s in self.samples if s.passed]
        radii = sorted({p[0] for p in pts})
        if len(radii) < 2:
            return float("nan")
        x = np.log([p[0] for p in pts])
        y = np.log([p[1] for p in pts])
        return float(np.polyfit(x, y, 1)[0])


def sample_centers(net: SpatialNetwork, R: float, R0: float, mode: str,
                   max_samples: int) -> list[np.ndarray]:
    """Deterministic box-center lattice at spacing R.

    Poincare mode keeps centers at least R + R0 away from the whole
    boundary; Friedrichs mode keeps boxes touching the Dirichlet boundary.
    """
    axes = []
    for l in net.domain:
        count = int(np.floor(l / R))
        axes.append((np.arange(count) + 0.5) * R)
    grid = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([g.ravel() for g in grid], axis=1)
    margin = np.minimum(centers, net.domain[None, :] - centers).min(axis=1)
    if mode == "poincare":
        keep = margin >= R + R0 - 1e-12
    elif mode == "friedrichs":
        if net.dirichlet.size == 0:
            raise NetlodError("friedrichs audit requires Dirichlet nodes")
        dir_coords = net.coords[net.dirichlet]
        keep = np.zeros(len(centers), dtype=bool)
        for i, c in enumerate(centers):
            inside = _box_membership(dir_coords, c, R, net.domain)
            keep[i] = bool(inside.any())
    else:
        raise NetlodError(f"unknown mu-estimation mode {mode!r}")
    centers = centers[keep]
    if len(centers) > max_samples:
        stride = int(np.ceil(len(centers) / max_samples))
        centers = centers[::stride]
    return [c for c in centers]


def estimate_poincare_mu(net: SpatialNetwork, R_list, samples: int = 9,
                         mode: str = "poincare", R0: float | None = None,
                         tol: float = 1e-8, seed: int = 0) -> AuditReport:
    """Estimate mu^2 = max over boxes of 1/(lambda2 R^2).

    Per sampled box the eigenvalue problem Lbar v = lambda Mbar v is solved
    on the connectivity subgraph; the Poincare mode deflates constants, the
    Friedrichs mode constrains the Dirichlet nodes inside the subgraph.
    """
    R0 = net.max_edge_length if R0 is None else R0
    report = AuditReport(R0=R0)
    for R in R_list:
        for center in sample_centers(net, R, R0, mode, samples):
            sub = connectivity_subgraph(net, center, R, R0)
            if not sub.passed or len(sub.nodes) < 3:
                report.connectivity_ok = False
                report.samples.append(EigenSample(mode, R, tuple(center),
                                                  float("nan"), False))
                continue
            mdiag, L = subgraph_operators(net, sub)
            try:
                if mode == "poincare":
                    lam, _ = generalized_eig_smallest(L, mdiag, "second_smallest",
                                                      tol=tol, seed=seed)
                else:
                    free = ~np.isin(sub.nodes, net.dirichlet)
                    if not np.any(~free):
                        # box claimed to touch the boundary but none in subgraph
                        report.samples.append(EigenSample(mode, R, tuple(center),
                                                          float("nan"), False))
                        continue
                    idx = np.flatnonzero(free)
                    Lff = L[idx][:, idx]
                    lam, _ = generalized_eig_smallest(Lff, mdiag[idx],
                                                      "smallest_dirichlet",
                                                      tol=tol, seed=seed)
            except DisconnectedRegionError:
                report.connectivity_ok = False
                report.samples.append(EigenSample(mode, R, tuple(center),
                                                  float("nan"), False))
                continue
            report.samples.append(EigenSample(mode, R, tuple(center), lam, True))
    return report


def full_audit(net: SpatialNetwork, R_list, samples: int = 9,
               mode: str = "poincare", R0: float | None = None) -> AuditReport:
    """Homogeneity scan plus mu estimation over a list of box radii."""
    report = estimate_poincare_mu(net, R_list, samples=samples, mode=mode, R0=R0)
    mass = assemble_mass(net)
    rho_vals, sigma_vals = [], []
    for R in R_list:
        side = 2.0 * R
        compatible = all(abs(round(l / side) * side - l) <= 1e-9 * max(1.0, l)
                         and round(l / side) >= 1 for l in net.domain)
        if not compatible:
            continue
        density, rho, sigma = homogeneity_scan(net, R, mass)
        report.densities[float(R)] = density
        rho_vals.append(rho)
        sigma_vals.append(sigma)
    if rho_vals:
        report.rho = min(rho_vals)
        report.sigma = max(sigma_vals)
    return report


# ---------------------------------------------------------------------------
# error norms and studies

def error_norms(u: np.ndarray, u_ref: np.ndarray, K: AssembledOperator,
                M: AssembledOperator):
    """Relative K- and M-norm errors of u against u_ref."""
    ref_K = seminorm(u_ref, K)
    ref_M = seminorm(u_ref, M)
    if ref_K == 0 or ref_M == 0:
        raise NetlodError("reference solution has zero norm")
    diff = np.asarray(u, float) - np.asarray(u_ref, float)
    return seminorm(diff, K) / ref_K, seminorm(diff, M) / ref_M


def _interp_for(net, K, H, faces, strict=False):
    mesh = build_coarse_mesh(net.domain, H, faces, strict=strict)
    mass = assemble_mass(net)
    return compute_dual_basis(mesh, net, mass)


def convergence_study(net: SpatialNetwork, K: AssembledOperator,
                      M: AssembledOperator, f: np.ndarray, faces, H_list,
                      k: int, g: np.ndarray | None = None,
                      u_ref: np.ndarray | None = None) -> dict:
    """LOD and coarse-Galerkin errors over a mesh-size sweep.

    Returns {"rows": [...], "slopes": {...}} where each row carries the
    method, H (as given), k, reduced dof count, relative K/M errors and
    wall-clock seconds.  Slopes are log-log least squares fits over H.
    """
    if u_ref is None:
        u_ref, _ = solve_reference(K, net, f, g=g)
    rows = []
    for H in [Fraction(h) if isinstance(h, str) else h for h in H_list]:
        interp = _interp_for(net, K, H, faces)
        ncomp = K.ncomp
        t0 = time.perf_counter()
        u_lod, _ = solve_lod(K, interp, k, f, g=g)
        t_lod = time.perf_counter() - t0
        eK, eM = error_norms(u_lod, u_ref, K, M)
        rows.append({"method": "lod", "H": H, "k": k,
                     "dofs": ncomp * interp.num_free,
                     "err_K": eK, "err_M": eM, "seconds": t_lod})
        t0 = time.perf_counter()
        u_fem = solve_coarse_fem(K, interp, f, g=g)
        t_fem = time.perf_counter() - t0
        eK, eM = error_norms(u_fem, u_ref, K, M)
        rows.append({"method": "fem", "H": H, "k": k,
                     "dofs": ncomp * interp.num_free,
                     "err_K": eK, "err_M": eM, "seconds": t_fem})
    slopes = {}
    for method in ("lod", "fem"):
        sel = [r for r in rows if r["method"] == method]
        if len(sel) >= 2:
            x = np.log([float(r["H"]) for r in sel])
            slopes[method] = {
                "K": float(np.polyfit(x, np.log([r["err_K"] for r in sel]), 1)[0]),
                "M": float(np.polyfit(x, np.log([r["err_M"] for r in sel]), 1)[0]),
            }
    return {"rows": rows, "slopes": slopes}


def decay_study(net: SpatialNetwork, K: AssembledOperator,
                M: AssembledOperator, f: np.ndarray, faces, H, k_list,
                g: np.ndarray | None = None,
                u_ref: np.ndarray | None = None) -> dict:
    """Error against the localization radius k at fixed H."""
    if u_ref is None:
        u_ref, _ = solve_reference(K, net, f, g=g)
    H = Fraction(H) if isinstance(H, str) else H
    interp = _interp_for(net, K, H, faces)
    rows = []
    for k in k_list:
        t0 = time.perf_counter()
        u_lod, _ = solve_lod(K, interp, int(k), f, g=g)
        dt = time.perf_counter() - t0
        eK, eM = error_norms(u_lod, u_ref, K, M)
        rows.append({"method": "lod", "H": H, "k": int(k),
                     "dofs": K.ncomp * interp.num_free,
                     "err_K": eK, "err_M": eM, "seconds": dt})
    ratios = [rows[i + 1]["err_K"] / rows[i]["err_K"] for i in range(len(rows) - 1)]
    return {"rows": rows, "ratios_K": ratios}
