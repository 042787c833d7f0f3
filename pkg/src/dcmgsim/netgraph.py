"""Weighted undirected graph shared by the electrical and communication layers.

The same node/edge structure carries three weight sets: electrical line
conductances (1/R_ij, siemens), consensus weights (equal to the conductances
by construction), and the averaging-filter weights used by the distributed
voltage estimator (dimensionless, perturbed independently by the moving
target defense).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TopologyError(ValueError):
    """Raised for malformed or disconnected graphs."""


@dataclass(frozen=True)
class Topology:
    """Undirected weighted graph over unit ids 1..N.

    edges maps (i, j) with i < j to the line conductance a_ij > 0.
    dac_weights maps the same keys to the averaging-filter weight of the
    edge; defaults to the conductance when not given.
    """

    nodes: tuple[int, ...]
    edges: dict[tuple[int, int], float]
    dac_weights: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        nodes = tuple(sorted(self.nodes))
        object.__setattr__(self, "nodes", nodes)
        if len(set(nodes)) != len(nodes):
            raise TopologyError("duplicate node ids")
        if len(nodes) < 2:
            raise TopologyError("at least two units are required")
        norm = {}
        for (i, j), a in self.edges.items():
            if i == j:
                raise TopologyError(f"self-loop on node {i}")
            if i not in nodes or j not in nodes:
                raise TopologyError(f"edge ({i},{j}) references unknown node")
            key = (min(i, j), max(i, j))
            if key in norm:
                raise TopologyError(f"duplicate edge {key}")
            if not a > 0:
                raise TopologyError(f"edge {key} weight must be > 0, got {a}")
            norm[key] = float(a)
        object.__setattr__(self, "edges", norm)
        dac = {}
        for (i, j), a in self.dac_weights.items():
            key = (min(i, j), max(i, j))
            if key not in norm:
                raise TopologyError(f"dac weight for unknown edge {key}")
            if not a > 0:
                raise TopologyError(f"dac weight of {key} must be > 0")
            dac[key] = float(a)
        for key, a in norm.items():
            dac.setdefault(key, a)
        object.__setattr__(self, "dac_weights", dac)
        comps = connected_components(nodes, list(norm))
        if len(comps) > 1:
            raise TopologyError(
                "graph is disconnected; components: "
                + ", ".join(str(sorted(c)) for c in comps)
            )

    @property
    def n(self) -> int:
        return len(self.nodes)

    def index(self, node: int) -> int:
        return self.nodes.index(node)

    def neighbors(self, node: int) -> list[int]:
        out = []
        for i, j in self.edges:
            if i == node:
                out.append(j)
            elif j == node:
                out.append(i)
        return sorted(out)

    def subgraph(self, keep: set[int]) -> "Topology":
        """Topology induced by the node subset (used for plug-out checks)."""
        edges = {e: a for e, a in self.edges.items() if e[0] in keep and e[1] in keep}
        dac = {e: self.dac_weights[e] for e in edges}
        return Topology(tuple(sorted(keep)), edges, dac)


def connected_components(nodes, edges) -> list[set[int]]:
    """BFS components of an undirected edge list."""
    adj = {n: set() for n in nodes}
    for i, j in edges:
        adj[i].add(j)
        adj[j].add(i)
    seen: set[int] = set()
    comps = []
    for start in nodes:
        if start in seen:
            continue
        comp = {start}
        queue = [start]
        while queue:
            u = queue.pop()
            for v in adj[u]:
                if v not in comp:
                    comp.add(v)
                    queue.append(v)
        seen |= comp
        comps.append(comp)
    return comps


def build_laplacian(topology: Topology, weights: dict | None = None) -> np.ndarray:
    """Weighted Laplacian L = P W P^T, orientation independent.

    weights defaults to the electrical conductances; pass
    topology.dac_weights for the averaging-filter graph.
    """
    if weights is None:
        weights = topology.edges
    n = topology.n
    lap = np.zeros((n, n))
    for (i, j), a in weights.items():
        ii, jj = topology.index(i), topology.index(j)
        lap[ii, ii] += a
        lap[jj, jj] += a
        lap[ii, jj] -= a
        lap[jj, ii] -= a
    return lap


def incidence_matrix(topology: Topology) -> np.ndarray:
    """Oriented incidence matrix with edges oriented low id -> high id.

    Only used internally to cross-check L = P W P^T; the orientation never
    leaks into any public quantity.
    """
    n, m = topology.n, len(topology.edges)
    P = np.zeros((n, m))
    for col, (i, j) in enumerate(sorted(topology.edges)):
        P[topology.index(i), col] = 1.0
        P[topology.index(j), col] = -1.0
    return P


@dataclass(frozen=True)
class SpectralQ:
    """Consensus-coupling matrix Q = k_I * L * diag(1/I^s) * M and its spectrum.

    With identical electrical/communication weights the product is symmetric
    PSD, the zero eigenvalue is simple, and its eigenvector is the all-ones
    direction (the average of the secondary inputs is invariant).
    """

    Q: np.ndarray
    eigenvalues: np.ndarray          # ascending, eigenvalues[0] == 0
    eigenvectors: np.ndarray         # columns, orthonormal when Q symmetric
    rated_current_inverse: np.ndarray  # diag entries of D
    weighted_laplacian: np.ndarray   # k_I * L

    def decompose(self, vec: np.ndarray) -> np.ndarray:
        """Coordinates of vec in the eigenvector basis."""
        return np.linalg.solve(self.eigenvectors, vec)


def build_Q(topology: Topology, k_I: float, rated_currents: np.ndarray,
            tol: float = 1e-8) -> SpectralQ:
    """Assemble Q and verify its spectral structure numerically.

    Raises TopologyError if the eigendecomposition residual exceeds tol
    (relative) or the zero eigenvalue is not simple.
    """
    rated = np.asarray(rated_currents, dtype=float)
    if rated.shape != (topology.n,):
        raise TopologyError("rated_currents must have one entry per node")
    if np.any(rated <= 0):
        raise TopologyError("rated currents must be positive")
    lap = build_laplacian(topology)
    lt = k_I * lap
    D = np.diag(1.0 / rated)
    Q = lt @ D @ lap

    if np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, abs(Q).max())):
        evals, evecs = np.linalg.eigh((Q + Q.T) / 2)
    else:
        # only reachable when communication weights are overridden away from
        # the electrical ones; fall back to the general solver
        evals_c, evecs_c = np.linalg.eig(Q)
        if np.abs(evals_c.imag).max() > tol * max(1.0, np.abs(evals_c).max()):
            raise TopologyError("Q has non-real eigenvalues beyond tolerance")
        order = np.argsort(evals_c.real)
        evals, evecs = evals_c.real[order], evecs_c[:, order].real

    scale = max(1.0, abs(evals).max())
    resid = np.linalg.norm(Q @ evecs - evecs * evals) / scale
    if resid > tol:
        raise TopologyError(f"eigendecomposition residual {resid:.2e} > {tol:.1e}")
    if abs(evals[0]) > tol * scale:
        raise TopologyError("Q lacks a zero eigenvalue (graph inconsistency)")
    if topology.n > 1 and evals[1] <= tol * scale:
        raise TopologyError("zero eigenvalue of Q is not simple")
    evals = evals.copy()
    evals[0] = 0.0
    return SpectralQ(Q=Q, eigenvalues=evals, eigenvectors=evecs,
                     rated_current_inverse=np.diag(D).copy(),
                     weighted_laplacian=lt)
