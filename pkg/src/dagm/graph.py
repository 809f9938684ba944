"""Agent networks, mixing matrices and their spectral properties."""

from __future__ import annotations

import csv
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Graph",
    "MixingMatrix",
    "ValidationReport",
    "GraphError",
    "MixingError",
    "MixingWarning",
    "random_connected_graph",
    "path_graph",
    "cycle_graph",
    "complete_graph",
    "star_graph",
    "metropolis_weights",
    "max_degree_weights",
    "uniform_weights",
    "spectral_gap",
    "laplacian_spectrum",
    "validate_mixing",
    "read_edge_list",
    "write_edge_list",
    "write_mixing_csv",
]

SIMPLICITY_TOL = 1e-10
STOCHASTIC_TOL = 1e-12


class GraphError(ValueError):
    pass


class MixingError(ValueError):
    """Raised when a weight matrix cannot be built for the given graph."""


class MixingWarning(UserWarning):
    """A constructed matrix violates the self-weight bounds 0 < theta <= Theta < 1."""


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on nodes ``0..n-1``.

    Edges are stored as sorted ``(i, j)`` tuples with ``i < j``.
    """

    n: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.n < 1:
            raise GraphError(f"need at least one node, got n={self.n}")
        normalized = set()
        for e in self.edges:
            i, j = (int(v) for v in e)
            if i == j:
                raise GraphError(f"self-loop at node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise GraphError(f"edge ({i}, {j}) outside 0..{self.n - 1}")
            normalized.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(normalized))

    @classmethod
    def from_edges(cls, n, edges):
        edges = list(edges)
        seen = set()
        for i, j in edges:
            key = (min(i, j), max(i, j))
            if key in seen:
                raise GraphError(f"duplicate edge {key}")
            seen.add(key)
        return cls(n, frozenset(seen))

    @property
    def neighbors(self) -> list[list[int]]:
        nbrs = [[] for _ in range(self.n)]
        for i, j in sorted(self.edges):
            nbrs[i].append(j)
            nbrs[j].append(i)
        return [sorted(v) for v in nbrs]

    @property
    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    @property
    def n_directed_edges(self) -> int:
        """Number of (sender, receiver) pairs, i.e. sum of degrees."""
        return 2 * len(self.edges)

    @property
    def connected(self) -> bool:
        # breadth-first traversal from node 0
        nbrs = self.neighbors
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in nbrs[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == self.n

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def relabel(self, perm) -> "Graph":
        """Return the graph with node ``i`` renamed to ``perm[i]``."""
        perm = [int(p) for p in perm]
        return Graph(self.n, frozenset((perm[i], perm[j]) for i, j in self.edges))


@dataclass(frozen=True)
class MixingMatrix:
    w: np.ndarray
    theta: float
    Theta: float

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def self_weights(self) -> np.ndarray:
        return np.diag(self.w).copy()


@dataclass
class ValidationReport:
    checks: dict[str, bool]
    details: dict[str, float | str]

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def failed(self) -> list[str]:
        return [k for k, v in self.checks.items() if not v]

    def __str__(self):
        lines = []
        for name, passed in self.checks.items():
            lines.append(f"{'PASS' if passed else 'FAIL'}  {name}")
        for name, val in self.details.items():
            lines.append(f"      {name} = {val}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# construction

def random_connected_graph(n: int, r: float, seed: int) -> Graph:
    """Random spanning tree plus independent Bernoulli(r) extra edges.

    The tree is built by attaching each node of a random permutation to a
    uniformly chosen earlier node, so the result is always connected.
    """
    if n < 1:
        raise GraphError(f"need at least one node, got n={n}")
    if not (0.0 < r <= 1.0):
        raise GraphError(f"connectivity ratio must lie in (0, 1], got {r}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    edges = set()
    for k in range(1, n):
        parent = order[rng.integers(0, k)]
        child = order[k]
        edges.add((int(min(parent, child)), int(max(parent, child))))
    # one coin per remaining pair, visited in a fixed order
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) in edges:
                continue
            if rng.random() < r:
                edges.add((i, j))
    return Graph(n, frozenset(edges))


def path_graph(n: int) -> Graph:
    return Graph(n, frozenset((i, i + 1) for i in range(n - 1)))


def cycle_graph(n: int) -> Graph:
    if n < 3:
        return path_graph(n)
    return Graph(n, frozenset((min(i, (i + 1) % n), max(i, (i + 1) % n)) for i in range(n)))


def complete_graph(n: int) -> Graph:
    return Graph(n, frozenset((i, j) for i in range(n) for j in range(i + 1, n)))


def star_graph(n: int, center: int = 0) -> Graph:
    return Graph(n, frozenset((min(center, j), max(center, j)) for j in range(n) if j != center))


def _require_connected(g: Graph):
    if not g.connected:
        raise MixingError("graph is disconnected; mixing weights require a connected network")


def _finish(w: np.ndarray) -> MixingMatrix:
    d = np.diag(w)
    theta, Theta = float(d.min()), float(d.max())
    if not (0.0 < theta and Theta < 1.0):
        warnings.warn(
            f"A4 violated: self-weights need 0 < theta <= Theta < 1, got theta={theta}, Theta={Theta}",
            MixingWarning,
            stacklevel=3,
        )
    return MixingMatrix(w=w, theta=theta, Theta=Theta)


def metropolis_weights(g: Graph) -> MixingMatrix:
    """Metropolis weights: ``1 / (1 + max(deg i, deg j))`` on each edge.

    For ``n = 1`` this returns ``[[1.0]]`` and emits a
    :class:`MixingWarning`, since the self-weight bound ``Theta < 1``
    cannot hold on a single node.

    Raises
    ------
    MixingError
        If the graph is disconnected.
    """
    _require_connected(g)
    deg = g.degrees
    w = np.zeros((g.n, g.n))
    for i, j in g.edges:
        # one value written to both slots keeps w bit-symmetric
        v = 1.0 / (1.0 + max(deg[i], deg[j]))
        w[i, j] = v
        w[j, i] = v
    for i in range(g.n):
        w[i, i] = 1.0 - w[i].sum()
    return _finish(w)


def max_degree_weights(g: Graph) -> MixingMatrix:
    """Uniform weight ``1/n`` on edges, self-weight ``1 - deg(i)/n``."""
    if g.n <= 2:
        raise MixingError(
            f"maximum-degree weights are only defined here for n > 2 (got n={g.n}); "
            "the self-weight bounds theta = 1/n, Theta = 1 - 1/n assume at least three nodes"
        )
    _require_connected(g)
    deg = g.degrees
    w = np.zeros((g.n, g.n))
    for i, j in g.edges:
        w[i, j] = w[j, i] = 1.0 / g.n
    for i in range(g.n):
        w[i, i] = 1.0 - deg[i] / g.n
    return _finish(w)


def uniform_weights(n: int) -> MixingMatrix:
    """Exact averaging matrix ``(1/n) 11^T`` on the complete graph."""
    if n < 2:
        raise MixingError("uniform weights need n >= 2")
    return _finish(np.full((n, n), 1.0 / n))


# --------------------------------------------------------------------------
# spectra

def _weights(W) -> np.ndarray:
    return W.w if isinstance(W, MixingMatrix) else np.asarray(W, dtype=float)


def laplacian_spectrum(W) -> np.ndarray:
    """Ascending eigenvalues of ``I - W``."""
    w = _weights(W)
    return np.linalg.eigvalsh(np.eye(w.shape[0]) - w)


def spectral_gap(W) -> float:
    """Mixing rate ``sigma = ||W - 11^T/n||``, i.e. max(|lambda_2|, |lambda_n|).

    Returns 0 for a single node. The name follows common usage; the
    actual spectral gap is ``1 - sigma``.
    """
    w = _weights(W)
    n = w.shape[0]
    if n == 1:
        return 0.0
    try:
        lam = np.linalg.eigvalsh(w - np.full((n, n), 1.0 / n))
    except np.linalg.LinAlgError as exc:
        raise MixingError(f"eigensolver failed: {exc}") from exc
    return float(max(abs(lam[0]), abs(lam[-1])))


def validate_mixing(W, g: Graph) -> ValidationReport:
    """Check nonnegativity, A1 sparsity, A2 double stochasticity,
    A3 null-space simplicity and A4 self-weight bounds. Never raises."""
    checks: dict[str, bool] = {}
    details: dict[str, float | str] = {}
    try:
        w = _weights(W)
        n = w.shape[0]
        if w.shape != (n, n) or n != g.n:
            checks["shape"] = False
            details["shape"] = f"{w.shape} for graph with n={g.n}"
            return ValidationReport(checks, details)
        checks["finite"] = bool(np.all(np.isfinite(w)))
        checks["nonnegative"] = bool(np.all(w >= 0.0))
        checks["symmetric"] = bool(np.array_equal(w, w.T))
        mask = np.ones((n, n), dtype=bool)
        np.fill_diagonal(mask, False)
        for i, j in g.edges:
            mask[i, j] = mask[j, i] = False
        checks["A1_sparsity"] = bool(np.all(w[mask] == 0.0))
        row_err = float(np.max(np.abs(w.sum(axis=1) - 1.0)))
        col_err = float(np.max(np.abs(w.sum(axis=0) - 1.0)))
        details["row_sum_err"] = row_err
        details["col_sum_err"] = col_err
        checks["A2_doubly_stochastic"] = row_err <= STOCHASTIC_TOL and col_err <= STOCHASTIC_TOL
        if checks["finite"]:
            lam = np.sort(np.linalg.eigvalsh((w + w.T) / 2.0))[::-1]
            lam2 = float(lam[1]) if n > 1 else float("nan")
            details["lambda_2"] = lam2
            details["lambda_n"] = float(lam[-1])
            # eigenvalue 1 must be simple
            checks["A3_null_space"] = n == 1 or lam2 < 1.0 - SIMPLICITY_TOL
            checks["eigs_in_(-1,1]"] = bool(lam[-1] > -1.0 + SIMPLICITY_TOL and lam[0] <= 1.0 + SIMPLICITY_TOL)
        else:
            checks["A3_null_space"] = False
        d = np.diag(w)
        details["theta"] = float(d.min())
        details["Theta"] = float(d.max())
        checks["A4_self_weights"] = bool(d.min() > 0.0 and d.max() < 1.0)
    except Exception as exc:  # report-only
        checks["evaluated"] = False
        details["error"] = repr(exc)
    return ValidationReport(checks, details)


# --------------------------------------------------------------------------
# text formats

def write_edge_list(g: Graph, path):
    lines = [str(g.n)] + [f"{i} {j}" for i, j in sorted(g.edges)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path) -> Graph:
    """Parse ``n`` on the first line and one ``i j`` pair per following line."""
    rows = [ln.split("#")[0].strip() for ln in Path(path).read_text().splitlines()]
    rows = [r for r in rows if r]
    if not rows:
        raise GraphError(f"{path}: empty edge list")
    try:
        n = int(rows[0])
        edges = [tuple(int(t) for t in r.split()) for r in rows[1:]]
    except ValueError as exc:
        raise GraphError(f"{path}: malformed edge list ({exc})") from exc
    if any(len(e) != 2 for e in edges):
        raise GraphError(f"{path}: each edge line needs exactly two node ids")
    return Graph.from_edges(n, edges)


def write_mixing_csv(W, path):
    w = _weights(W)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in w:
            writer.writerow([repr(float(v)) for v in row])
