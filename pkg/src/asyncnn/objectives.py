"""Local objectives, the penalized global objective and LIBSVM input.

Two local families are supported:

* quadratic ``f_i(x) = c_i ||x - b_i||^2``
* regularized logistic
  ``f_i(x) = (upsilon / 2n) ||x||^2 + (1/K) sum_j log(1 + exp(-v_j <u_j, x>))``
  where ``K`` is the global sample count shared by all agents.

The penalized objective couples the agents' blocks through the consensus
matrix: ``F(x) = 1/2 x'((I - W) kron I)x + alpha sum_i f_i(x_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import io
import math
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from .topology import ConsensusMatrix

__all__ = [
    "QuadraticObjective",
    "LogisticObjective",
    "LocalObjective",
    "ProblemSpec",
    "Dataset",
    "LibsvmParseError",
    "UnsupportedConfigurationError",
    "SIGMA2_SUP",
    "sigmoid",
    "softplus",
    "local_value",
    "local_gradient",
    "local_hessian",
    "curvature_constants",
    "make_problem",
    "penalized_value",
    "penalized_gradient",
    "penalized_hessian",
    "parse_libsvm",
    "load_libsvm",
    "partition_uniform",
    "quadratic_locals",
]

# sup |sigma''| over the real line, attained at sigma = 1/2 -+ 1/(2 sqrt 3)
SIGMA2_SUP = 1.0 / (6.0 * math.sqrt(3.0))


class LibsvmParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class UnsupportedConfigurationError(ValueError):
    pass


def sigmoid(z):
    """Overflow-free logistic function."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    """``log(1 + exp(z))`` without overflow."""
    z = np.asarray(z, dtype=float)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


@dataclass(frozen=True, eq=False)
class QuadraticObjective:
    c: float
    b: np.ndarray

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"curvature weight must be positive, got {self.c}")
        object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, dtype=float)))

    family = "quadratic"

    @property
    def dim(self) -> int:
        return self.b.size

    def value(self, x):
        r = x - self.b
        return self.c * float(r @ r)

    def gradient(self, x):
        return 2.0 * self.c * (x - self.b)

    def hessian(self, x):
        return 2.0 * self.c * np.eye(self.dim)


@dataclass(frozen=True, eq=False)
class LogisticObjective:
    features: np.ndarray
    labels: np.ndarray
    upsilon: float
    K_total: int
    n_agents: int

    family = "logistic"

    def __post_init__(self):
        U = np.atleast_2d(np.asarray(self.features, dtype=float))
        v = np.asarray(self.labels, dtype=float).ravel()
        if U.shape[0] != v.size:
            raise ValueError("one label per feature row required")
        if not np.all(np.isin(v, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        if not self.upsilon > 0:
            raise ValueError(f"regularizer weight must be positive, got {self.upsilon}")
        if self.K_total < 1 or self.n_agents < 1:
            raise ValueError("K_total and n_agents must be positive")
        object.__setattr__(self, "features", U)
        object.__setattr__(self, "labels", v)
        # rows pre-multiplied by their label: margin_j = <v_j u_j, x>
        object.__setattr__(self, "_signed", U * v[:, None])

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def reg(self) -> float:
        return self.upsilon / self.n_agents

    def value(self, x):
        margins = self._signed @ x
        return 0.5 * self.reg * float(x @ x) + float(softplus(-margins).sum()) / self.K_total

    def gradient(self, x):
        margins = self._signed @ x
        w = sigmoid(-margins)
        return self.reg * x - (self._signed.T @ w) / self.K_total

    def hessian(self, x):
        s = sigmoid(self.features @ x)
        curv = s * (1.0 - s)
        U = self.features
        A = (U.T * curv) @ U / self.K_total
        # matmul rounding can break exact symmetry; downstream uses eigh
        return self.reg * np.eye(self.dim) + 0.5 * (A + A.T)


LocalObjective = QuadraticObjective | LogisticObjective


def _check_dim(f, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (f.dim,):
        raise ValueError(f"expected a vector of length {f.dim}, got shape {x.shape}")
    return x


def local_value(f: LocalObjective, x) -> float:
    return f.value(_check_dim(f, x))


def local_gradient(f: LocalObjective, x) -> np.ndarray:
    return f.gradient(_check_dim(f, x))


def local_hessian(f: LocalObjective, x) -> np.ndarray:
    return f.hessian(_check_dim(f, x))


def curvature_constants(locals_: list) -> tuple[float, float, float]:
    """Global bounds ``(m, M, L)`` with ``m I <= hess f_i <= M I`` and
    ``L`` a Lipschitz constant of every ``hess f_i``.

    For the logistic family ``m`` is the regularizer floor and ``L`` uses the
    supremum of ``|sigma''|``; both are valid but conservative.
    """
    if not locals_:
        raise ValueError("need at least one local objective")
    families = {f.family for f in locals_}
    if len(families) > 1:
        raise UnsupportedConfigurationError(f"mixed objective families: {sorted(families)}")
    if families == {"quadratic"}:
        curv = [2.0 * f.c for f in locals_]
        return min(curv), max(curv), 0.0
    m = min(f.reg for f in locals_)
    M = max(f.reg + float((f.features ** 2).sum()) / (4.0 * f.K_total) for f in locals_)
    L = max(SIGMA2_SUP * float((np.linalg.norm(f.features, axis=1) ** 3).sum()) / f.K_total
            for f in locals_)
    return m, M, L


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    locals: tuple
    alpha: float
    W: ConsensusMatrix
    m: float
    M: float
    L: float

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative")
        if len(self.locals) != self.W.n:
            raise ValueError(f"{len(self.locals)} local objectives for {self.W.n} agents")
        dims = {f.dim for f in self.locals}
        if len(dims) != 1:
            raise ValueError(f"local objectives disagree on block dimension: {sorted(dims)}")
        if not 0 < self.m <= self.M:
            raise ValueError(f"need 0 < m <= M, got m={self.m}, M={self.M}")

    @property
    def n(self) -> int:
        return self.W.n

    @property
    def dim(self) -> int:
        return self.locals[0].dim

    @property
    def family(self) -> str:
        return self.locals[0].family

    @property
    def laplacian_part(self) -> np.ndarray:
        """``I - W`` (n x n)."""
        return np.eye(self.n) - self.W.W

    def blocks(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.size != self.n * self.dim:
            raise ValueError(f"expected {self.n * self.dim} entries, got {x.size}")
        return x.reshape(self.n, self.dim)

    def to_dict(self) -> dict:
        return {"family": self.family, "n": self.n, "dim": self.dim, "alpha": self.alpha,
                "m": self.m, "M": self.M, "L": self.L,
                "delta": self.W.delta, "Delta": self.W.Delta, "d_max": self.W.d_max}


def make_problem(locals_, W: ConsensusMatrix, alpha: float = 1.0) -> ProblemSpec:
    m, M, L = curvature_constants(list(locals_))
    return ProblemSpec(tuple(locals_), float(alpha), W, m, M, L)


def quadratic_locals(c, b) -> list[QuadraticObjective]:
    """Quadratic blocks from a sequence of weights and a sequence of targets."""
    return [QuadraticObjective(float(ci), np.atleast_1d(np.asarray(bi, dtype=float))) for ci, bi in zip(c, b)]


def penalized_value(spec: ProblemSpec, x) -> float:
    X = spec.blocks(x)
    coupling = 0.5 * float(np.sum(X * (spec.laplacian_part @ X)))
    return coupling + spec.alpha * sum(f.value(xi) for f, xi in zip(spec.locals, X))


def penalized_gradient(spec: ProblemSpec, x) -> np.ndarray:
    X = spec.blocks(x)
    G = spec.laplacian_part @ X
    G += spec.alpha * np.array([f.gradient(xi) for f, xi in zip(spec.locals, X)])
    return G.ravel()


def penalized_hessian(spec: ProblemSpec, x) -> np.ndarray:
    """Dense ``(I - W) kron I + alpha blockdiag(hess f_i)``."""
    X = spec.blocks(x)
    d = spec.dim
    H = np.kron(spec.laplacian_part, np.eye(d))
    for i, (f, xi) in enumerate(zip(spec.locals, X)):
        H[i * d:(i + 1) * d, i * d:(i + 1) * d] += spec.alpha * f.hessian(xi)
    return H


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    source: str = field(default="", compare=False)

    def __post_init__(self):
        if self.features.shape[0] == 0:
            raise ValueError("empty dataset")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


def _parse_label(tok: str, lineno: int, zero_as_negative: bool) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise LibsvmParseError(lineno, f"bad label {tok!r}") from None
    if v == 1.0:
        return 1.0
    if v == -1.0 or (v == 0.0 and zero_as_negative):
        return -1.0
    raise LibsvmParseError(lineno, f"label {tok!r} is not +1/-1"
                           + ("" if zero_as_negative else " (0 allowed with zero_as_negative)"))


def parse_libsvm(stream: TextIO | Iterable[str] | str, *, zero_as_negative: bool = False,
                 dim: int | None = None) -> Dataset:
    """Read ``label idx:val idx:val ...`` lines into a dense dataset.

    Indices are 1-based and may appear in any order. Blank lines and ``#``
    comments are skipped. ``dim`` defaults to the largest index seen.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    rows, labels = [], []
    max_idx = 0
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        labels.append(_parse_label(toks[0], lineno, zero_as_negative))
        entries = {}
        for tok in toks[1:]:
            idx, sep, val = tok.partition(":")
            if not sep:
                raise LibsvmParseError(lineno, f"expected idx:val, got {tok!r}")
            try:
                k, value = int(idx), float(val)
            except ValueError:
                raise LibsvmParseError(lineno, f"bad feature {tok!r}") from None
            if k < 1:
                raise LibsvmParseError(lineno, f"feature index {k} is not 1-based")
            if k in entries:
                raise LibsvmParseError(lineno, f"duplicate feature index {k}")
            entries[k] = value
            max_idx = max(max_idx, k)
        rows.append(entries)
    if not rows:
        raise LibsvmParseError(0, "no samples")
    width = max_idx if dim is None else dim
    if width < max_idx:
        raise ValueError(f"dim={dim} is smaller than the largest index {max_idx}")
    U = np.zeros((len(rows), width))
    for r, entries in enumerate(rows):
        for k, value in entries.items():
            U[r, k - 1] = value
    return Dataset(U, np.array(labels), getattr(stream, "name", ""))


def load_libsvm(path: str | Path, **kw) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with path.open() as fh:
        ds = parse_libsvm(fh, **kw)
    return Dataset(ds.features, ds.labels, str(path))


def partition_uniform(ds: Dataset, n: int, seed=0, *, upsilon: float) -> list[LogisticObjective]:
    """Shuffle and deal ``floor(K/n)`` samples to each agent.

    The ``K mod n`` leftover samples are dropped; every agent still weights
    its loss by ``1/K`` with ``K`` the full dataset size.
    """
    K = len(ds)
    if n > K:
        raise ValueError(f"cannot split {K} samples over {n} agents")
    per = K // n
    order = np.random.default_rng(seed).permutation(K)
    out = []
    for i in range(n):
        idx = order[i * per:(i + 1) * per]
        out.append(LogisticObjective(ds.features[idx], ds.labels[idx], upsilon, K, n))
    return out
