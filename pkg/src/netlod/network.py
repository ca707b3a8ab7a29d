"""Spatial network representation and JSON I/O.

A network is a connected graph embedded in a box domain
Omega = [0,l_1] x ... x [0,l_d].  Nodes carry coordinates, edges carry
their Euclidean length, and a subset of nodes is tagged as the Dirichlet
boundary.  Networks are immutable after construction; all arrays are
frozen so they can be shared freely between solver objects.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import NetworkValidationError


@dataclass(frozen=True)
class SpatialNetwork:
    """Connected graph with node coordinates in a box domain.

    Parameters
    ----------
    domain : ndarray, shape (d,)
        Side lengths of the box domain; the domain is [0,l_1]x...x[0,l_d].
    coords : ndarray, shape (num_nodes, d)
        Node coordinates, all inside the domain.
    edges : ndarray, shape (num_edges, 2), int
        Unordered, deduplicated node index pairs (stored with i < j).
    dirichlet : ndarray, int
        Sorted indices of Dirichlet-constrained nodes (may be empty).
    gamma : ndarray or None
        Optional per-edge coefficient (heat conductivity / axial stiffness).
    seed : int or None
        Generator seed, kept for provenance only.
    """

    domain: np.ndarray
    coords: np.ndarray
    edges: np.ndarray
    dirichlet: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    gamma: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        domain = np.asarray(self.domain, dtype=float)
        coords = np.asarray(self.coords, dtype=float)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        dirichlet = np.unique(np.asarray(self.dirichlet, dtype=np.int64))
        gamma = None if self.gamma is None else np.asarray(self.gamma, dtype=float)

        if domain.ndim != 1 or domain.size not in (2, 3):
            raise NetworkValidationError("domain must list 2 or 3 side lengths")
        if np.any(domain <= 0):
            raise NetworkValidationError("domain side lengths must be positive")
        if coords.ndim != 2 or coords.shape[1] != domain.size:
            raise NetworkValidationError(
                f"coords must be (num_nodes, {domain.size}), got {coords.shape}"
            )
        n = coords.shape[0]
        if n == 0:
            raise NetworkValidationError("network has no nodes")
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise NetworkValidationError("edge index out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise NetworkValidationError("self-loop edge")
        edges = np.sort(edges, axis=1)
        if len(np.unique(edges, axis=0)) != len(edges):
            raise NetworkValidationError("duplicate edges")
        tol = 1e-12 * max(1.0, float(domain.max()))
        if np.any(coords < -tol) or np.any(coords > domain[None, :] + tol):
            raise NetworkValidationError("node coordinates outside the domain box")
        if dirichlet.size and (dirichlet.min() < 0 or dirichlet.max() >= n):
            raise NetworkValidationError("dirichlet index out of range")
        if gamma is not None:
            if gamma.shape != (len(edges),):
                raise NetworkValidationError("gamma must have one value per edge")
            if np.any(gamma <= 0):
                raise NetworkValidationError("gamma values must be positive")

        lengths = np.linalg.norm(coords[edges[:, 0]] - coords[edges[:, 1]], axis=1)
        if edges.size and lengths.min() <= 0:
            raise NetworkValidationError("zero-length edge")

        deg = np.zeros(n, dtype=np.int64)
        np.add.at(deg, edges.ravel(), 1)
        if np.any(deg == 0):
            bad = int(np.flatnonzero(deg == 0)[0])
            raise NetworkValidationError(f"isolated node {bad} (degree 0)")
        if not _connected(n, edges):
            raise NetworkValidationError("network graph is not connected")

        for name, val in (
            ("domain", domain), ("coords", coords), ("edges", edges),
            ("dirichlet", dirichlet), ("gamma", gamma),
        ):
            if val is not None:
                val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "_lengths", lengths)
        object.__setattr__(self, "_degrees", deg)
        lengths.setflags(write=False)
        deg.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.domain.size

    @property
    def num_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def edge_lengths(self) -> np.ndarray:
        return self._lengths

    @property
    def degrees(self) -> np.ndarray:
        return self._degrees

    @property
    def total_length(self) -> float:
        """Sum of all edge lengths (the network 'mass' (M1,1))."""
        return float(self._lengths.sum())

    @property
    def max_edge_length(self) -> float:
        """Operational locality scale: the longest edge in the network."""
        return float(self._lengths.max())

    @property
    def free_nodes(self) -> np.ndarray:
        mask = np.ones(self.num_nodes, dtype=bool)
        mask[self.dirichlet] = False
        return np.flatnonzero(mask)

    def adjacency_lists(self) -> list[np.ndarray]:
        """Neighbor index array per node (computed on demand)."""
        nbrs: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for a, b in self.edges:
            nbrs[a].append(int(b))
            nbrs[b].append(int(a))
        return [np.array(sorted(v), dtype=np.int64) for v in nbrs]

    def with_dirichlet(self, dirichlet: np.ndarray) -> "SpatialNetwork":
        return SpatialNetwork(self.domain, self.coords, self.edges,
                              dirichlet=dirichlet, gamma=self.gamma, seed=self.seed)

    def with_gamma(self, gamma: np.ndarray) -> "SpatialNetwork":
        return SpatialNetwork(self.domain, self.coords, self.edges,
                              dirichlet=self.dirichlet, gamma=gamma, seed=self.seed)

    def canonical_json(self) -> str:
        """Deterministic serialization used for hashing and file output."""
        obj = {
            "d": int(self.dim),
            "domain": [float(v) for v in self.domain],
            "nodes": [[float(c) for c in row] for row in self.coords],
            "edges": [[int(a), int(b)] for a, b in self.edges],
        }
        if self.gamma is not None:
            obj["gamma"] = [float(g) for g in self.gamma]
        obj["dirichlet"] = [int(i) for i in self.dirichlet]
        if self.seed is not None:
            obj["seed"] = int(self.seed)
        return json.dumps(obj)


def _connected(n: int, edges: np.ndarray) -> bool:
    if n == 1:
        return True
    if edges.size == 0:
        return False
    # BFS over CSR-style neighbor layout; avoids Python-level adjacency lists.
    idx = np.concatenate([edges[:, 0], edges[:, 1]])
    nbr = np.concatenate([edges[:, 1], edges[:, 0]])
    order = np.argsort(idx, kind="stable")
    idx, nbr = idx[order], nbr[order]
    starts = np.searchsorted(idx, np.arange(n + 1))
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        v = stack.pop()
        for w in nbr[starts[v]:starts[v + 1]]:
            if not seen[w]:
                seen[w] = True
                stack.append(int(w))
    return bool(seen.all())


def write_network(net: SpatialNetwork, path: str | os.PathLike) -> None:
    """Write a network file atomically (temp file + rename)."""
    payload = net.canonical_json()
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_network(path: str | os.PathLike) -> SpatialNetwork:
    """Read a network file; raises NetworkValidationError on malformed input."""
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise NetworkValidationError(f"malformed network file {path}: {exc}") from exc
    try:
        d = int(obj["d"])
        domain = np.asarray(obj["domain"], dtype=float)
        coords = np.asarray(obj["nodes"], dtype=float)
        edges = np.asarray(obj["edges"], dtype=np.int64).reshape(-1, 2)
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkValidationError(f"malformed network file {path}: {exc}") from exc
    if domain.size != d or (coords.size and coords.shape[1] != d):
        raise NetworkValidationError(f"inconsistent dimension in {path}")
    gamma = obj.get("gamma")
    dirichlet = np.asarray(obj.get("dirichlet", []), dtype=np.int64)
    seed = obj.get("seed")
    return SpatialNetwork(domain, coords, edges, dirichlet=dirichlet,
                          gamma=None if gamma is None else np.asarray(gamma, float),
                          seed=None if seed is None else int(seed))
