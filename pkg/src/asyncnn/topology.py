"""Communication graphs and the consensus matrix built on top of them.

The consensus matrix is always ``W = I - L / (d_max + 1)`` with ``L`` the
graph Laplacian, so it is symmetric, row-stochastic and shares the sparsity
pattern of the adjacency plus the diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
import re

import numpy as np

__all__ = [
    "GRAPH_KINDS",
    "Graph",
    "ConsensusMatrix",
    "GraphGenerationError",
    "Check",
    "ValidationReport",
    "build_graph",
    "build_consensus",
    "validate_consensus",
    "parse_kind",
    "write_edge_list",
    "read_edge_list",
]

GRAPH_KINDS = ("complete", "ring", "path", "cyclic_k_regular", "erdos_renyi")

ER_RETRY_BUDGET = 1000


class GraphGenerationError(RuntimeError):
    """Raised when a graph of the requested kind cannot be produced."""


@dataclass(frozen=True)
class Graph:
    n: int
    edges: frozenset[tuple[int, int]]
    kind: str
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for i, j in self.edges:
            if not (0 <= i < j < self.n):
                raise ValueError(f"edge ({i}, {j}) must satisfy 0 <= i < j < n={self.n}")

    @classmethod
    def from_pairs(cls, n, pairs, kind="custom", **params):
        edges = set()
        for i, j in pairs:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            edges.add((min(i, j), max(i, j)))
        return cls(n, frozenset(edges), kind, params)

    @property
    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        for i, j in self.edges:
            A[i, j] = A[j, i] = 1.0
        return A

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def neighbors(self, i: int) -> list[int]:
        return sorted({j for a, b in self.edges for j in (a, b) if i in (a, b) and j != i})

    def laplacian(self) -> np.ndarray:
        A = self.adjacency
        return np.diag(A.sum(axis=1)) - A

    def is_connected(self) -> bool:
        seen = {0}
        stack = [0]
        adj = {i: [] for i in range(self.n)}
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        while stack:
            for j in adj[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == self.n

    def algebraic_connectivity(self) -> float:
        """Second-smallest Laplacian eigenvalue (dense solve)."""
        return float(np.linalg.eigvalsh(self.laplacian())[1]) if self.n > 1 else 0.0


_KIND_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*([0-9.eE+-]+)\s*\))?\s*$")


def parse_kind(text: str) -> tuple[str, dict]:
    """Parse ``"erdos_renyi(0.3)"`` / ``"cyclic_k_regular(4)"`` / ``"ring"``.

    ``"cyclic"`` is accepted as shorthand for the 4-regular cyclic graph.
    """
    m = _KIND_RE.match(text)
    if not m:
        raise ValueError(f"unrecognized graph kind {text!r}")
    name, arg = m.group(1), m.group(2)
    if name == "cyclic":
        name = "cyclic_k_regular"
    if name not in GRAPH_KINDS:
        raise ValueError(f"unknown graph kind {name!r}; expected one of {GRAPH_KINDS}")
    params = {}
    if name == "cyclic_k_regular":
        params["k"] = int(float(arg)) if arg is not None else 4
    elif name == "erdos_renyi":
        params["p"] = float(arg) if arg is not None else 0.5
    elif arg is not None:
        raise ValueError(f"graph kind {name!r} takes no parameter")
    return name, params


def _circulant(n, offsets):
    pairs = set()
    for i in range(n):
        for o in offsets:
            j = (i + o) % n
            if j != i:
                pairs.add((min(i, j), max(i, j)))
    return pairs


def build_graph(kind: str, n: int, seed: int | None = 0, *, k: int | None = None,
                p: float | None = None) -> Graph:
    """Generate a connected graph on ``n`` nodes.

    Parameters
    ----------
    kind : str
        One of ``complete``, ``ring``, ``path``, ``cyclic_k_regular`` (each
        node linked to the ``k/2`` nearest nodes on either side; complete when
        ``n <= k``) or ``erdos_renyi``. A parameterized form such as
        ``"erdos_renyi(0.3)"`` is also accepted.
    n : int
        Number of agents, at least 2.
    seed : int, optional
        Only used by ``erdos_renyi``, which resamples until connected.
    k, p : optional
        Degree of the cyclic graph (even, default 4) and the Erdos-Renyi edge
        probability (default 0.5). Override any value given inside ``kind``.
    """
    name, params = parse_kind(kind)
    if k is not None:
        params["k"] = int(k)
    if p is not None:
        params["p"] = float(p)
    if n < 2:
        raise ValueError(f"need n >= 2 agents, got {n}")

    if name == "complete":
        pairs = {(i, j) for i in range(n) for j in range(i + 1, n)}
    elif name == "ring":
        pairs = _circulant(n, [1])
    elif name == "path":
        pairs = {(i, i + 1) for i in range(n - 1)}
    elif name == "cyclic_k_regular":
        kk = params["k"]
        if kk < 2 or kk % 2:
            raise ValueError(f"cyclic_k_regular needs an even k >= 2, got {kk}")
        pairs = _circulant(n, range(1, kk // 2 + 1))
    else:
        prob = params["p"]
        if not 0.0 < prob <= 1.0:
            raise ValueError(f"edge probability must lie in (0, 1], got {prob}")
        rng = np.random.default_rng(seed)
        iu = np.triu_indices(n, 1)
        for _ in range(ER_RETRY_BUDGET):
            keep = rng.random(iu[0].size) < prob
            g = Graph.from_pairs(n, zip(iu[0][keep], iu[1][keep]), name, **params)
            if g.is_connected():
                return g
        raise GraphGenerationError(
            f"no connected erdos_renyi(p={prob}) graph on {n} nodes after "
            f"{ER_RETRY_BUDGET} draws (seed={seed})")

    return Graph.from_pairs(n, pairs, name, **params)


@dataclass(frozen=True, eq=False)
class ConsensusMatrix:
    W: np.ndarray
    delta: float
    Delta: float
    d_max: int

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def neighbors(self, i: int) -> np.ndarray:
        row = self.W[i].copy()
        row[i] = 0.0
        return np.flatnonzero(row > 0)


def build_consensus(g: Graph) -> ConsensusMatrix:
    L = g.laplacian()
    d_max = int(round(L.diagonal().max()))
    W = np.eye(g.n) - L / (d_max + 1)
    diag = W.diagonal()
    return ConsensusMatrix(W, float(diag.min()), float(diag.max()), d_max)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    residual: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<34s} residual={self.residual:.3e}{extra}"


@dataclass
class ValidationReport:
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def __str__(self) -> str:
        return "\n".join(c.line() for c in self.checks)


def validate_consensus(cm: ConsensusMatrix | np.ndarray, *, graph: Graph | None = None,
                       row_tol: float = 1e-12, null_tol: float = 1e-9) -> ValidationReport:
    """Check every consensus-matrix property; failures are reported, not raised."""
    W = cm.W if isinstance(cm, ConsensusMatrix) else np.asarray(cm, dtype=float)
    n = W.shape[0]
    checks = []

    sym = float(np.abs(W - W.T).max())
    checks.append(Check("symmetry", sym == 0.0, sym))

    rows = float(np.abs(W.sum(axis=1) - 1.0).max())
    checks.append(Check("row_sums", rows <= row_tol, rows))

    lo = float(W.min())
    hi = float(W.max())
    checks.append(Check("entries_in_[0,1)", lo >= 0.0 and hi < 1.0,
                        max(0.0, -lo, hi - 1.0 if hi >= 1.0 else 0.0),
                        f"min={lo:.3g} max={hi:.3g}"))

    diag = W.diagonal()
    ok = bool(diag.min() > 0.0 and diag.max() < 1.0)
    checks.append(Check("diagonal_bounds", ok, 0.0,
                        f"delta={diag.min():.6g} Delta={diag.max():.6g}"))

    if graph is not None:
        pattern = (graph.adjacency + np.eye(n)) > 0
        mismatch = int(np.count_nonzero((W > 0) != pattern))
        checks.append(Check("sparsity_pattern", mismatch == 0, float(mismatch)))

    ev = np.linalg.eigvalsh((np.eye(n) - (W + W.T) / 2))
    null_dim = int(np.count_nonzero(np.abs(ev) <= null_tol))
    gap = float(np.sort(ev)[1]) if n > 1 else 0.0
    checks.append(Check("nullspace_dim", null_dim == 1, float(abs(null_dim - 1)),
                        f"dim={null_dim} second_eig={gap:.3e}"))
    return ValidationReport(checks)


def write_edge_list(g: Graph, path: str | Path) -> None:
    lines = [f"n {g.n}"] + [f"{i} {j}" for i, j in sorted(g.edges)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path: str | Path) -> Graph:
    text = Path(path).read_text().split("\n")
    header = text[0].split()
    if len(header) != 2 or header[0] != "n":
        raise ValueError(f"{path}: first line must be 'n <count>', got {text[0]!r}")
    n = int(header[1])
    pairs = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'i j', got {line!r}")
        pairs.append((int(parts[0]), int(parts[1])))
    return Graph.from_pairs(n, pairs, "custom")
