"""Seeded random fiber network generation and Dirichlet tagging.

Networks are built in three steps: straight segments of fixed length are
placed with uniformly random midpoints on an extended domain and uniform
rotation, clipped to the domain, until the total clipped length reaches a
target; a node is created at every pairwise segment crossing (segment
endpoints are nodes too); finally dangling interior chains are pruned,
nearby nodes are merged and the largest connected component is kept.

Determinism: segment i draws from its own Philox stream keyed (seed, i),
so the same configuration always produces byte-identical networks and
placement could be parallelized without changing the result.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import GenerationError, NetworkValidationError
from .network import SpatialNetwork

_PARALLEL_SIN_TOL = 1e-12   # |sin(angle)| below this: treat as non-crossing
_ON_SEGMENT_TOL = 1e-12     # parameter slack for endpoint-touching crossings


@dataclass(frozen=True)
class GeneratorConfig:
    """Fiber placement parameters.

    Exactly one of `density` (target total length per domain area) and
    `total_mass` (target total length) must be given.
    """

    domain: tuple[float, ...]
    segment_length: float
    seed: int
    density: float | None = None
    total_mass: float | None = None
    merge_tolerance: float | None = None      # default 0.01 * segment_length
    boundary_tag_tolerance: float | None = None  # default 1e-9 * max side
    prune_boundary_stubs: bool = False

    def __post_init__(self):
        if len(self.domain) != 2:
            raise GenerationError("fiber placement is planar; domain must be 2d")
        if self.segment_length <= 0:
            raise GenerationError("segment_length must be positive")
        if (self.density is None) == (self.total_mass is None):
            raise GenerationError("give exactly one of density and total_mass")
        if self.merge_tol >= self.segment_length:
            raise GenerationError("merge tolerance must be below the segment length")
        if self.target_length <= 0:
            raise GenerationError("target length must be positive")
        if self.segment_length >= min(self.domain):
            raise GenerationError("segment length must be below the domain size")

    @property
    def merge_tol(self) -> float:
        if self.merge_tolerance is not None:
            return self.merge_tolerance
        return 0.01 * self.segment_length

    @property
    def boundary_tol(self) -> float:
        if self.boundary_tag_tolerance is not None:
            return self.boundary_tag_tolerance
        return 1e-9 * max(self.domain)

    @property
    def target_length(self) -> float:
        if self.total_mass is not None:
            return self.total_mass
        area = float(np.prod(np.asarray(self.domain)))
        return self.density * area


@dataclass(frozen=True)
class GenerationReport:
    segments_placed: int
    target_length: float
    raw_length: float          # clipped length before cleanup
    final_length: float
    nodes_raw: int
    crossings: int
    nodes: int
    edges: int

    @property
    def mass_loss(self) -> float:
        return 1.0 - self.final_length / self.raw_length


def _segment_stream(seed: int, index: int) -> np.random.Generator:
    key = np.array([seed, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _clip_to_box(a: np.ndarray, b: np.ndarray, domain: np.ndarray):
    """Liang-Barsky clip of segment a-b to [0,l1]x[0,l2]; None if outside."""
    d = b - a
    t0, t1 = 0.0, 1.0
    for ax in range(2):
        if d[ax] == 0.0:
            if a[ax] < 0.0 or a[ax] > domain[ax]:
                return None
            continue
        ta = (0.0 - a[ax]) / d[ax]
        tb = (domain[ax] - a[ax]) / d[ax]
        lo, hi = (ta, tb) if ta < tb else (tb, ta)
        t0 = max(t0, lo)
        t1 = min(t1, hi)
        if t0 >= t1:
            return None
    return a + t0 * d, a + t1 * d


def place_segments(cfg: GeneratorConfig):
    """Step 1: place clipped segments until the length target is reached.

    Returns (starts, ends, raw_length, segments_drawn).
    """
    domain = np.asarray(cfg.domain, dtype=float)
    r = cfg.segment_length
    total = 0.0
    starts, ends = [], []
    index = 0
    # Generous cap: placement cannot stall since clipped lengths are positive
    # with probability bounded away from zero.
    max_segments = int(50 * cfg.target_length / r) + 10000
    while total < cfg.target_length:
        if index >= max_segments:
            raise GenerationError("placement target unreachable (too many segments)")
        rng = _segment_stream(cfg.seed, index)
        u = rng.uniform(size=3)
        mid = -r + u[:2] * (domain + 2 * r)
        angle = np.pi * u[2]
        half = 0.5 * r * np.array([np.cos(angle), np.sin(angle)])
        clipped = _clip_to_box(mid - half, mid + half, domain)
        index += 1
        if clipped is None:
            continue
        a, b = clipped
        length = float(np.linalg.norm(b - a))
        if length <= 0.0:
            continue
        starts.append(a)
        ends.append(b)
        total += length
    return np.array(starts), np.array(ends), total, index


def _segment_crossings(starts: np.ndarray, ends: np.ndarray, r: float):
    """All pairwise crossings; returns (i, j, t_i, t_j) arrays with i < j.

    Near-parallel pairs (|sin| below tolerance) never cross; endpoint
    touches count as crossings.
    """
    nseg = len(starts)
    if nseg < 2:
        return (np.empty(0, np.int64),) * 2 + (np.empty(0),) * 2
    mids = 0.5 * (starts + ends)
    pairs = cKDTree(mids).query_pairs(r + 1e-12, output_type="ndarray")
    if len(pairs) == 0:
        return (np.empty(0, np.int64),) * 2 + (np.empty(0),) * 2
    i, j = pairs[:, 0], pairs[:, 1]
    d1 = ends[i] - starts[i]
    d2 = ends[j] - starts[j]
    denom = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    scale = np.linalg.norm(d1, axis=1) * np.linalg.norm(d2, axis=1)
    ok = np.abs(denom) > _PARALLEL_SIN_TOL * scale
    rel = starts[j] - starts[i]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[:, 0] * d2[:, 1] - rel[:, 1] * d2[:, 0]) / denom
        s = (rel[:, 0] * d1[:, 1] - rel[:, 1] * d1[:, 0]) / denom
    tol = _ON_SEGMENT_TOL
    ok &= (t >= -tol) & (t <= 1 + tol) & (s >= -tol) & (s <= 1 + tol)
    i, j, t, s = i[ok], j[ok], np.clip(t[ok], 0, 1), np.clip(s[ok], 0, 1)
    order = np.lexsort((j, i))
    return i[order], j[order], t[order], s[order]


def _prune_dangling(num_nodes: int, edges: np.ndarray, exempt: np.ndarray) -> np.ndarray:
    """Iteratively remove degree-1 non-exempt nodes; returns alive-node mask."""
    deg = np.zeros(num_nodes, dtype=np.int64)
    np.add.at(deg, edges.ravel(), 1)
    incident: list[list[int]] = [[] for _ in range(num_nodes)]
    for eid, (a, b) in enumerate(edges):
        incident[a].append(eid)
        incident[b].append(eid)
    alive_node = np.ones(num_nodes, dtype=bool)
    alive_edge = np.ones(len(edges), dtype=bool)
    heap = [int(v) for v in np.flatnonzero((deg == 1) & ~exempt)]
    heapq.heapify(heap)
    while heap:
        v = heapq.heappop(heap)
        if not alive_node[v] or deg[v] != 1 or exempt[v]:
            continue
        alive_node[v] = False
        for eid in incident[v]:
            if not alive_edge[eid]:
                continue
            alive_edge[eid] = False
            a, b = edges[eid]
            w = int(b) if a == v else int(a)
            deg[v] -= 1
            deg[w] -= 1
            if alive_node[w] and deg[w] == 1 and not exempt[w]:
                heapq.heappush(heap, w)
    alive_node &= deg > 0
    return alive_node, alive_edge


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, a: int) -> int:
        root = a
        parent = self.parent
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return int(root)

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        # Lowest index wins so merged coordinates are reproducible.
        lo, hi = (ra, rb) if ra < rb else (rb, ra)
        self.parent[hi] = lo


def _merge_close_nodes(coords: np.ndarray, edges: np.ndarray, tol: float):
    """Union nodes closer than tol; representative is the lowest index.

    Merged clusters keep the representative's coordinate, so repeated runs
    cannot drift.  Returns (representative array, remapped edges) with
    self-loops dropped and duplicates removed.
    """
    uf = _UnionFind(len(coords))
    if len(coords) > 1 and tol > 0:
        pairs = cKDTree(coords).query_pairs(tol * (1 - 1e-12), output_type="ndarray")
        if len(pairs):
            for a, b in pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]:
                uf.union(int(a), int(b))
    rep = np.array([uf.find(i) for i in range(len(coords))], dtype=np.int64)
    mapped = rep[edges]
    keep = mapped[:, 0] != mapped[:, 1]
    mapped = np.sort(mapped[keep], axis=1)
    if len(mapped):
        mapped = np.unique(mapped, axis=0)
    return rep, mapped


def _compact(coords: np.ndarray, edges: np.ndarray, keep_mask: np.ndarray):
    """Drop masked-out nodes and renumber edges contiguously."""
    keep = np.flatnonzero(keep_mask)
    new_id = -np.ones(len(coords), dtype=np.int64)
    new_id[keep] = np.arange(keep.size)
    return coords[keep], new_id[edges]


def _largest_component(num_nodes: int, edges: np.ndarray) -> np.ndarray:
    """Mask of the largest connected component (ties: lowest root index)."""
    uf = _UnionFind(num_nodes)
    for a, b in edges:
        uf.union(int(a), int(b))
    labels = np.array([uf.find(i) for i in range(num_nodes)], dtype=np.int64)
    values, counts = np.unique(labels, return_counts=True)
    best = values[np.argmax(counts)]
    return labels == best


def network_from_segments(starts: np.ndarray, ends: np.ndarray, domain,
                          merge_tolerance: float, boundary_tolerance: float,
                          seed: int | None = None, prune: bool = True,
                          prune_boundary_stubs: bool = False,
                          keep_largest_component: bool = True,
                          segment_length_hint: float | None = None):
    """Steps 2-3 on explicit segments; returns (network, report fields).

    This is also the oracle entry used to check crossing geometry on
    hand-placed segments.
    """
    starts = np.asarray(starts, dtype=float)
    ends = np.asarray(ends, dtype=float)
    domain = np.asarray(domain, dtype=float)
    nseg = len(starts)
    seg_lengths = np.linalg.norm(ends - starts, axis=1)
    raw_length = float(seg_lengths.sum())
    hint = segment_length_hint if segment_length_hint is not None else float(seg_lengths.max())
    ci, cj, ti, tj = _segment_crossings(starts, ends, hint)

    # Node table: two endpoints per segment, then one node per crossing event.
    coords = np.concatenate([starts, ends], axis=0)
    endpoint_id = np.arange(2 * nseg).reshape(2, nseg)
    cross_coords = starts[ci] + ti[:, None] * (ends[ci] - starts[ci])
    cross_ids = 2 * nseg + np.arange(len(ci))
    coords = np.concatenate([coords, cross_coords], axis=0)
    coords = np.clip(coords, 0.0, domain[None, :])  # guard fp fuzz at the boundary

    # Split every segment at its crossing parameters.
    params_per_seg: list[list[tuple[float, int]]] = [
        [(0.0, int(endpoint_id[0, s])), (1.0, int(endpoint_id[1, s]))]
        for s in range(nseg)
    ]
    for idx in range(len(ci)):
        params_per_seg[ci[idx]].append((float(ti[idx]), int(cross_ids[idx])))
        params_per_seg[cj[idx]].append((float(tj[idx]), int(cross_ids[idx])))
    edge_list = []
    for s in range(nseg):
        chain = sorted(params_per_seg[s])
        for (_, a), (_, b) in zip(chain[:-1], chain[1:]):
            if a != b:
                edge_list.append((a, b))
    edges = np.array(sorted(set(tuple(sorted(e)) for e in edge_list)), dtype=np.int64)
    nodes_raw = len(coords)

    on_boundary = np.zeros(len(coords), dtype=bool)
    for ax in range(2):
        on_boundary |= np.abs(coords[:, ax]) <= boundary_tolerance
        on_boundary |= np.abs(coords[:, ax] - domain[ax]) <= boundary_tolerance

    if len(edges) == 0:
        raise GenerationError("network is empty after cleanup (no crossings)")

    # Stage: prune dangling interior chains, then compact to the survivors.
    if prune:
        exempt = np.zeros(len(coords), dtype=bool) if prune_boundary_stubs else on_boundary
        alive_node, alive_edge = _prune_dangling(len(coords), edges, exempt)
        edges = edges[alive_edge]
    else:
        alive_node = np.zeros(len(coords), dtype=bool)
        alive_node[edges.ravel()] = True
    coords, edges = _compact(coords, edges, alive_node)

    # Stage: merge node clusters within tolerance, keep cluster representatives.
    rep, edges = _merge_close_nodes(coords, edges, merge_tolerance)
    used = np.zeros(len(coords), dtype=bool)
    if len(edges) == 0:
        raise GenerationError("network is empty after cleanup (merged away)")
    used[edges.ravel()] = True
    coords, edges = _compact(coords, edges, used)

    # Stage: keep the largest connected component.
    if keep_largest_component:
        in_main = _largest_component(len(coords), edges)
        mask = in_main[edges[:, 0]] & in_main[edges[:, 1]]
        coords, edges = _compact(coords, edges[mask], in_main)
    try:
        net = SpatialNetwork(domain, coords, edges, seed=seed)
    except NetworkValidationError as exc:
        raise GenerationError(f"generated network invalid after cleanup: {exc}") from exc
    report = GenerationReport(
        segments_placed=nseg,
        target_length=raw_length,
        raw_length=raw_length,
        final_length=net.total_length,
        nodes_raw=nodes_raw,
        crossings=len(ci),
        nodes=net.num_nodes,
        edges=net.num_edges,
    )
    return net, report


def generate_with_report(cfg: GeneratorConfig):
    starts, ends, raw_length, drawn = place_segments(cfg)
    net, report = network_from_segments(
        starts, ends, cfg.domain,
        merge_tolerance=cfg.merge_tol,
        boundary_tolerance=cfg.boundary_tol,
        seed=cfg.seed,
        prune=True,
        prune_boundary_stubs=cfg.prune_boundary_stubs,
        keep_largest_component=True,
        segment_length_hint=cfg.segment_length,
    )
    report = GenerationReport(
        segments_placed=len(starts),
        target_length=cfg.target_length,
        raw_length=raw_length,
        final_length=report.final_length,
        nodes_raw=report.nodes_raw,
        crossings=report.crossings,
        nodes=report.nodes,
        edges=report.edges,
    )
    return net, report


def generate_fiber_network(cfg: GeneratorConfig) -> SpatialNetwork:
    """Generate a seeded random fiber network (see module docstring)."""
    return generate_with_report(cfg)[0]


def tag_dirichlet_nodes(net: SpatialNetwork, faces, tolerance: float | None = None):
    """Tag nodes lying on the listed domain faces as Dirichlet.

    `faces` is 'all' or an iterable of (axis, side) pairs.  Returns the
    tagged network together with the largest gap between consecutive tagged
    nodes along each face (a boundary-density report).  A requested face
    with no nodes on it is an error: the constrained problem would not see
    the boundary there.
    """
    from .mesh import parse_faces  # local import to avoid a module cycle

    face_set = sorted(parse_faces(faces, net.dim))
    tol = tolerance if tolerance is not None else 1e-9 * float(net.domain.max())
    tagged = set()
    gaps = {}
    for ax, side in face_set:
        target = 0.0 if side == 0 else float(net.domain[ax])
        sel = np.flatnonzero(np.abs(net.coords[:, ax] - target) <= tol)
        if sel.size == 0:
            raise NetworkValidationError(
                f"no nodes on requested Dirichlet face (axis {ax}, side {side})"
            )
        tagged.update(int(v) for v in sel)
        other = [a for a in range(net.dim) if a != ax]
        span = net.coords[sel][:, other[0]] if other else np.zeros(sel.size)
        span = np.sort(span)
        ends = np.concatenate([[0.0], span, [float(net.domain[other[0]])]]) \
            if other else span
        gaps[(ax, side)] = float(np.diff(ends).max()) if ends.size > 1 else 0.0
    out = net.with_dirichlet(np.array(sorted(tagged), dtype=np.int64))
    return out, gaps
