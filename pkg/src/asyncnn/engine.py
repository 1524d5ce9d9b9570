"""Sequential event simulation of the asynchronous network Newton method.

One agent is active per activation. It refreshes its gradient block and
zeroth-order direction from its buffers, takes a Newton step, and broadcasts
``x_i`` and ``d0_i`` to its neighbors. Each neighbor then refreshes its own
``g_j`` and ``d0_j`` and broadcasts ``d0_j`` to its own neighbors, who store it
passively. Agents' buffers are overwritten on every receipt.

Baselines: synchronous network Newton with a K-term series, and pairwise
gossip with a ``1/t`` stepsize driven by each agent's own update count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
import io
from pathlib import Path

import numpy as np

from .newton_core import AgentState, distributed_directions, theory_constants
from .objectives import ProblemSpec, penalized_value

__all__ = [
    "ActivationSchedule",
    "RunConfig",
    "Trace",
    "AsyncNewtonSimulator",
    "OneStepExpectation",
    "run_async_newton",
    "run_sync_newton",
    "run_gossip",
    "enumerate_one_step_expectation",
    "slow_agent_costs",
    "TRACE_COLUMNS",
]

TRACE_COLUMNS = ("t", "active_agent", "F", "rel_err", "weighted_err", "elapsed_time_units")

MODES = ("scaled", "uniform_unscaled")


@dataclass(frozen=True, eq=False)
class ActivationSchedule:
    """Activation probabilities plus the stepsize convention.

    ``scaled`` uses ``eps / p_i`` for the active agent; ``uniform_unscaled``
    uses ``eps`` for everybody (intended for uniform ``p`` but not enforced).
    """

    p: np.ndarray
    mode: str = "scaled"
    seed: int = 0

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).ravel()
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"activation probabilities sum to {p.sum()}, not 1")
        if np.any(p <= 0):
            raise ValueError("every agent needs a positive activation probability")
        if p.size > 1 and np.any(p >= 1):
            raise ValueError("activation probabilities must be < 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "p", p)

    @classmethod
    def uniform(cls, n, mode="scaled", seed=0):
        return cls(np.full(n, 1.0 / n), mode, seed)

    @property
    def n(self) -> int:
        return self.p.size

    @property
    def is_uniform(self) -> bool:
        return bool(np.ptp(self.p) <= 1e-15)

    def with_seed(self, seed):
        return ActivationSchedule(self.p, self.mode, seed)

    def step_sizes(self, eps: float) -> np.ndarray:
        if self.mode == "scaled":
            return eps / self.p
        return np.full(self.n, float(eps))

    def scaled_equivalent_eps(self, eps: float) -> float | None:
        """Stepsize parameter of the scaled convention producing the same steps.

        ``None`` when no such value exists (unscaled steps with nonuniform ``p``).
        """
        if self.mode == "scaled":
            return float(eps)
        if self.is_uniform:
            return float(eps) * float(self.p[0])
        return None

    def draw(self, T: int) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        return rng.choice(self.n, size=T, p=self.p)


def slow_agent_costs(n: int, agent: int = 0, factor: float = 100.0) -> np.ndarray:
    costs = np.ones(n)
    costs[agent] = factor
    return costs


@dataclass(eq=False)
class RunConfig:
    spec: ProblemSpec
    schedule: ActivationSchedule
    eps: float
    T: int
    record_every: int = 1
    x0: np.ndarray | None = None
    costs: np.ndarray | None = None
    reference: object | None = None
    stop_rel_err: float | None = None
    backend: str = "auto"

    def __post_init__(self):
        if self.backend not in ("auto", "python", "compiled"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.T < 0:
            raise ValueError("T must be nonnegative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.schedule.n != self.spec.n:
            raise ValueError("schedule and problem disagree on the number of agents")

    def initial_point(self) -> np.ndarray:
        if self.x0 is None:
            return np.zeros(self.spec.n * self.spec.dim)
        x0 = np.asarray(self.x0, dtype=float).ravel()
        if x0.size != self.spec.n * self.spec.dim:
            raise ValueError("x0 has the wrong size")
        return x0.copy()

    def agent_costs(self) -> np.ndarray:
        if self.costs is None:
            return np.ones(self.spec.n)
        c = np.asarray(self.costs, dtype=float)
        if c.shape != (self.spec.n,) or np.any(c <= 0):
            raise ValueError("need one positive cost per agent")
        return c


@dataclass(eq=False)
class Trace:
    algorithm: str
    t: np.ndarray
    active_agent: np.ndarray
    F: np.ndarray
    rel_err: np.ndarray
    weighted_err: np.ndarray
    elapsed: np.ndarray
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    final_state: np.ndarray | None = None
    F_star: float | None = None

    def __len__(self) -> int:
        return self.t.size

    @property
    def gap(self) -> np.ndarray:
        if self.F_star is None:
            raise ValueError("trace was produced without a reference optimum")
        return np.abs(self.F - self.F_star)

    def write_csv(self, target) -> None:
        """Write one row per activation; floats use round-trip precision."""
        own = isinstance(target, (str, Path))
        fh = open(target, "w", newline="") if own else target
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for row in zip(self.t, self.active_agent, self.F, self.rel_err,
                           self.weighted_err, self.elapsed):
                w.writerow([int(row[0]), int(row[1])] + [repr(float(v)) for v in row[2:]])
        finally:
            if own:
                fh.close()

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    @classmethod
    def read_csv(cls, path, algorithm="") -> "Trace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda k, typ=float: np.array([typ(r[k]) for r in rows])
        return cls(algorithm, col("t", int), col("active_agent", int), col("F"),
                   col("rel_err"), col("weighted_err"), col("elapsed_time_units"))


class _Recorder:
    def __init__(self, algorithm, T, reference, record_every):
        self.algorithm = algorithm
        self.ref = reference
        self.every = record_every
        size = T + 1
        self.t = np.zeros(size, dtype=np.int64)
        self.agent = np.full(size, -1, dtype=np.int64)
        self.F = np.zeros(size)
        self.rel = np.full(size, np.nan)
        self.werr = np.full(size, np.nan)
        self.elapsed = np.zeros(size)
        self.snapshots = {}
        self.k = 0
        self.denom = None

    def push(self, t, agent, F, elapsed, x, weighted=np.nan):
        k = self.k
        self.t[k], self.agent[k], self.F[k], self.elapsed[k] = t, agent, F, elapsed
        if self.ref is not None:
            if self.denom is None:
                self.denom = abs(F - self.ref.F_star)
            num = abs(F - self.ref.F_star)
            self.rel[k] = num / self.denom if self.denom > 0 else (0.0 if num == 0 else np.inf)
            self.werr[k] = weighted
        if t % self.every == 0:
            self.snapshots[int(t)] = x.copy()
        self.k += 1
        return self.rel[k]

    def finish(self, x):
        k = self.k
        return Trace(self.algorithm, self.t[:k].copy(), self.agent[:k].copy(), self.F[:k].copy(),
                     self.rel[:k].copy(), self.werr[:k].copy(), self.elapsed[:k].copy(),
                     self.snapshots, x.copy(),
                     None if self.ref is None else float(self.ref.F_star))


class AsyncNewtonSimulator:
    """Mutable network state for the asynchronous method.

    Buffers are dense ``(n, n, dim)`` arrays where ``buf_x[j, k]`` is agent
    ``j``'s latest copy of ``x_k``; only neighbor slots are ever read or
    written. Use :meth:`agent_state` for a per-agent view.
    """

    def __init__(self, spec: ProblemSpec, x0=None):
        self.spec = spec
        n, d = spec.n, spec.dim
        W = spec.W.W
        self.n, self.d = n, d
        self.alpha = spec.alpha
        self.Wd = W.diagonal().copy()
        self.Woff = W - np.diag(self.Wd)
        self.adj = self.Woff > 0
        self.nbrs = [np.flatnonzero(self.adj[i]) for i in range(n)]
        self.IW = np.eye(n) - W
        self.constant_hessian = spec.family == "quadratic"

        x0 = np.zeros(n * d) if x0 is None else np.asarray(x0, dtype=float)
        self.x = x0.reshape(n, d).copy()
        self.gradf = np.empty((n, d))
        self.fval = np.empty(n)
        self.D = np.empty((n, d, d))
        self.Dinv = np.empty((n, d, d))
        for i in range(n):
            self._refresh_local(i)

        # initialization: every agent computes g_i, d0_i and exchanges with neighbors
        self.buf_x = np.zeros((n, n, d))
        self.buf_d0 = np.zeros((n, n, d))
        for i in range(n):
            self.buf_x[self.nbrs[i], i] = self.x[i]
        self.g = self._gradient_blocks(np.arange(n))
        self.d0 = -np.einsum("kab,kb->ka", self.Dinv, self.g)
        for i in range(n):
            self.buf_d0[self.nbrs[i], i] = self.d0[i]

    def _refresh_local(self, i):
        f = self.spec.locals[i]
        xi = self.x[i]
        self.gradf[i] = f.gradient(xi)
        self.fval[i] = f.value(xi)
        if self.constant_hessian and hasattr(self, "_D_ready"):
            return
        Dii = self.alpha * f.hessian(xi) + 2.0 * (1.0 - self.Wd[i]) * np.eye(self.d)
        self.D[i] = Dii
        self.Dinv[i] = np.linalg.inv(Dii)
        if self.constant_hessian and i == self.n - 1:
            self._D_ready = True

    def _gradient_blocks(self, idx):
        """``g_j`` for agents ``idx`` from their own iterate and buffered neighbors."""
        nb_sum = np.einsum("kn,knd->kd", self.Woff[idx], self.buf_x[idx])
        return (1.0 - self.Wd[idx])[:, None] * self.x[idx] + self.alpha * self.gradf[idx] - nb_sum

    def objective(self) -> float:
        return 0.5 * float(np.vdot(self.x, self.IW @ self.x)) + self.alpha * float(self.fval.sum())

    def direction(self, i) -> np.ndarray:
        """Step 4 for agent ``i``: refresh ``g_i``, ``d0_i`` and return ``d_i``."""
        nb = self.nbrs[i]
        w = self.Woff[i, nb]
        g = (1.0 - self.Wd[i]) * self.x[i] + self.alpha * self.gradf[i] - w @ self.buf_x[i, nb]
        d0 = -self.Dinv[i] @ g
        self.g[i], self.d0[i] = g, d0
        return self.Dinv[i] @ ((1.0 - self.Wd[i]) * d0 - g + w @ self.buf_d0[i, nb])

    def activate(self, i: int, step: float) -> np.ndarray:
        """Run one activation of agent ``i``; returns the pre-update ``D_ii``."""
        d = self.direction(i)
        D_prev = self.D[i].copy()
        self.x[i] = self.x[i] + step * d
        self._refresh_local(i)
        nb = self.nbrs[i]
        self.g[i] = ((1.0 - self.Wd[i]) * self.x[i] + self.alpha * self.gradf[i]
                     - self.Woff[i, nb] @ self.buf_x[i, nb])
        self.d0[i] = -self.Dinv[i] @ self.g[i]
        # active agent broadcasts x_i and d0_i
        self.buf_x[nb, i] = self.x[i]
        self.buf_d0[nb, i] = self.d0[i]
        if nb.size:
            # neighbors refresh g_j, d0_j and broadcast d0_j; two-hop agents store it
            self.g[nb] = self._gradient_blocks(nb)
            self.d0[nb] = -np.einsum("kab,kb->ka", self.Dinv[nb], self.g[nb])
            mask = self.adj[:, nb][..., None]
            self.buf_d0[:, nb] = np.where(mask, self.d0[nb][None, :, :], self.buf_d0[:, nb])
        return D_prev

    def agent_state(self, i: int) -> AgentState:
        nb = [int(j) for j in self.nbrs[i]]
        return AgentState(i, self.x[i].copy(), self.D[i].copy(), self.g[i].copy(),
                          self.d0[i].copy(), {j: self.buf_x[i, j].copy() for j in nb},
                          {j: self.buf_d0[i, j].copy() for j in nb})

    def stacked_x(self) -> np.ndarray:
        return self.x.ravel().copy()


def _weighted_sq(D, E):
    return np.einsum("kab,ka,kb->k", D, E, E)


def run_async_newton(cfg: RunConfig) -> Trace:
    """Simulate ``cfg.T`` activations of the asynchronous network Newton method."""
    spec = cfg.spec
    sim = AsyncNewtonSimulator(spec, cfg.initial_point())
    steps = cfg.schedule.step_sizes(cfg.eps)
    costs = cfg.agent_costs()
    ref = cfg.reference
    xs = None if ref is None else np.asarray(ref.x_star).reshape(spec.n, spec.dim)

    rec = _Recorder("async_newton", cfg.T, ref, cfg.record_every)
    wq = None
    if ref is not None:
        wq = _weighted_sq(sim.D, sim.x - xs)
    rec.push(0, -1, sim.objective(), 0.0, sim.x.ravel(),
             np.sqrt(wq.sum()) if wq is not None else np.nan)
    agents = cfg.schedule.draw(cfg.T)
    use_kernel = cfg.backend == "compiled" or (cfg.backend == "auto" and sim.constant_hessian)
    if use_kernel:
        _run_compiled(sim, agents, steps, costs, cfg, rec, xs)
        return rec.finish(sim.x.ravel())
    elapsed = 0.0
    stop = cfg.stop_rel_err
    for t in range(1, cfg.T + 1):
        i = int(agents[t - 1])
        D_pre = sim.D.copy() if (ref is not None and not sim.constant_hessian) else sim.D
        sim.activate(i, steps[i])
        elapsed += costs[i]
        werr = np.nan
        if ref is not None:
            werr = float(np.sqrt(_weighted_sq(D_pre, sim.x - xs).sum()))
        rel = rec.push(t, i, sim.objective(), elapsed, sim.x.ravel(), werr)
        if stop is not None and rel < stop:
            break
    return rec.finish(sim.x.ravel())


def _run_compiled(sim, agents, steps, costs, cfg, rec, xs):
    """Drive the compiled loop in chunks that end on snapshot boundaries."""
    from ._kernels import quadratic_chunk

    if not sim.constant_hessian:
        raise ValueError("the compiled backend only supports quadratic objectives")
    spec = sim.spec
    ref = cfg.reference
    c = np.array([f.c for f in spec.locals])
    b = np.stack([np.broadcast_to(f.b, (spec.dim,)) for f in spec.locals]).astype(float)
    ptr = np.zeros(sim.n + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([nb.size for nb in sim.nbrs])
    idx = np.concatenate(sim.nbrs + [np.zeros(0, dtype=np.int64)]).astype(np.int64)
    has_ref = ref is not None
    xs_arr = xs if has_ref else np.zeros((sim.n, sim.d))
    F_star = float(ref.F_star) if has_ref else 0.0
    denom = float(rec.denom) if has_ref else 0.0
    stop = -np.inf if cfg.stop_rel_err is None else float(cfg.stop_rel_err)
    agents = agents.astype(np.int64)

    T, every = agents.size, rec.every
    pos, elapsed = 0, 0.0
    while pos < T:
        end = min(T, (pos // every + 1) * every)
        k0 = rec.k
        ran = quadratic_chunk(agents[pos:end], steps, costs, sim.x, sim.gradf, sim.fval, c, b,
                              sim.Wd, sim.Woff, sim.IW, ptr, idx, sim.D, sim.Dinv, sim.buf_x,
                              sim.buf_d0, sim.g, sim.d0, sim.alpha, xs_arr, has_ref, F_star,
                              denom, stop, elapsed, rec.F[k0:], rec.rel[k0:], rec.werr[k0:],
                              rec.elapsed[k0:])
        rec.t[k0:k0 + ran] = np.arange(pos + 1, pos + ran + 1)
        rec.agent[k0:k0 + ran] = agents[pos:pos + ran]
        rec.k += ran
        pos += ran
        elapsed = rec.elapsed[rec.k - 1]
        if pos % every == 0:
            rec.snapshots[pos] = sim.x.ravel().copy()
        if has_ref and rec.rel[rec.k - 1] < stop:
            break


def run_sync_newton(cfg: RunConfig, K: int = 1) -> Trace:
    """Synchronous network Newton: every agent steps each iteration.

    The direction uses ``K + 1`` series terms, built by the recursion
    ``d <- D^{-1}(B d - g)`` started from ``d = -D^{-1} g`` (one neighbor
    exchange per term). Each iteration costs the slowest agent's time.
    """
    if K < 0:
        raise ValueError("K must be >= 0")
    spec = cfg.spec
    n, dim = spec.n, spec.dim
    W = spec.W.W
    Bmat = np.eye(n) - 2.0 * np.diag(W.diagonal()) + W
    Wd = W.diagonal()
    x = cfg.initial_point().reshape(n, dim)
    costs = cfg.agent_costs()
    ref = cfg.reference
    xs = None if ref is None else np.asarray(ref.x_star).reshape(n, dim)

    def local_D(x):
        return np.stack([spec.alpha * f.hessian(xi) + 2.0 * (1.0 - w) * np.eye(dim)
                         for f, xi, w in zip(spec.locals, x, Wd)])

    rec = _Recorder(f"sync_newton_K{K}", cfg.T, ref, cfg.record_every)
    D = local_D(x)
    werr0 = np.sqrt(_weighted_sq(D, x - xs).sum()) if ref is not None else np.nan
    rec.push(0, -1, penalized_value(spec, x.ravel()), 0.0, x.ravel(), werr0)
    elapsed = 0.0
    constant = spec.family == "quadratic"
    Dinv = np.linalg.inv(D)
    IW = np.eye(n) - W
    for t in range(1, cfg.T + 1):
        if not constant:
            D = local_D(x)
            Dinv = np.linalg.inv(D)
        g = IW @ x + spec.alpha * np.array(
            [f.gradient(xi) for f, xi in zip(spec.locals, x)])
        d = -np.einsum("kab,kb->ka", Dinv, g)
        for _ in range(K):
            d = np.einsum("kab,kb->ka", Dinv, Bmat @ d - g)
        x = x + cfg.eps * d
        elapsed += costs.max()
        werr = np.sqrt(_weighted_sq(D, x - xs).sum()) if ref is not None else np.nan
        rel = rec.push(t, -1, penalized_value(spec, x.ravel()), elapsed, x.ravel(), werr)
        if cfg.stop_rel_err is not None and rel < cfg.stop_rel_err:
            break
    return rec.finish(x.ravel())


def run_gossip(cfg: RunConfig) -> Trace:
    """Pairwise gossip for the constrained problem ``min sum_i f_i(x)``.

    The active agent averages with a uniformly chosen neighbor; both then take
    a gradient step of length ``1 / (own update count)`` at the average. ``F``
    is the unpenalized sum of local objectives and ``cfg.eps`` is unused.
    """
    spec = cfg.spec
    n, dim = spec.n, spec.dim
    nbrs = [spec.W.neighbors(i) for i in range(n)]
    x = cfg.initial_point().reshape(n, dim)
    costs = cfg.agent_costs()
    counts = np.zeros(n, dtype=np.int64)
    fval = np.array([f.value(xi) for f, xi in zip(spec.locals, x)])
    ref = cfg.reference

    rng = np.random.default_rng(cfg.schedule.seed)
    agents = rng.choice(n, size=cfg.T, p=cfg.schedule.p)
    picks = rng.random(cfg.T)

    rec = _Recorder("gossip", cfg.T, ref, cfg.record_every)
    rec.push(0, -1, float(fval.sum()), 0.0, x.ravel())
    elapsed = 0.0
    for t in range(1, cfg.T + 1):
        i = int(agents[t - 1])
        nb = nbrs[i]
        j = int(nb[min(int(picks[t - 1] * nb.size), nb.size - 1)])
        avg = 0.5 * (x[i] + x[j])
        for a in (i, j):
            counts[a] += 1
            f = spec.locals[a]
            x[a] = avg - f.gradient(avg) / counts[a]
            fval[a] = f.value(x[a])
        elapsed += max(costs[i], costs[j])
        rel = rec.push(t, i, float(fval.sum()), elapsed, x.ravel())
        if cfg.stop_rel_err is not None and rel < cfg.stop_rel_err:
            break
    return rec.finish(x.ravel())


@dataclass(frozen=True)
class OneStepExpectation:
    F: float
    expected_F: float
    descent_rhs: float
    grad_norm: float
    weighted_pre: float
    expected_weighted: float
    recursion_rhs: float
    constants: object
    applicable: bool

    @property
    def descent_slack(self) -> float:
        """``rhs - E[F(x+)]``; nonnegative when the descent inequality holds."""
        return self.descent_rhs - self.expected_F

    @property
    def recursion_slack(self) -> float:
        return self.recursion_rhs - self.expected_weighted


def enumerate_one_step_expectation(spec: ProblemSpec, schedule: ActivationSchedule, eps: float,
                                   x, reference, *, x_prev=None, t: int = 2,
                                   gap0: float | None = None) -> OneStepExpectation:
    """Exact conditional expectation of one activation from a synchronized state.

    Every outcome ``i`` (probability ``p_i``) is evaluated; nothing is sampled.
    Returns both sides of the expected-descent inequality and of the
    weighted-error recursion. The recursion's previous state is ``x_prev``
    (defaults to ``x``); ``gap0`` defaults to ``F(x_prev) - F*``.
    """
    n, dim = spec.n, spec.dim
    x = np.asarray(x, dtype=float).ravel()
    x_prev = x if x_prev is None else np.asarray(x_prev, dtype=float).ravel()
    d = distributed_directions(spec, x).reshape(n, dim)
    steps = schedule.step_sizes(eps)
    xs = np.asarray(reference.x_star).reshape(n, dim)
    X = x.reshape(n, dim)

    from .newton_core import assemble_D_blocks
    D_now = assemble_D_blocks(spec, x)
    D_prev = assemble_D_blocks(spec, x_prev)

    exp_F = 0.0
    exp_w = 0.0
    for i in range(n):
        Xp = X.copy()
        Xp[i] = Xp[i] + steps[i] * d[i]
        exp_F += schedule.p[i] * penalized_value(spec, Xp.ravel())
        exp_w += schedule.p[i] * np.sqrt(_weighted_sq(D_now, Xp - xs).sum())

    F_x = penalized_value(spec, x)
    from .objectives import penalized_gradient
    gnorm = float(np.linalg.norm(penalized_gradient(spec, x)))
    eps_eq = schedule.scaled_equivalent_eps(eps)
    applicable = eps_eq is not None
    if gap0 is None:
        gap0 = penalized_value(spec, x_prev) - reference.F_star
    tc = theory_constants(spec.m, spec.M, spec.L, spec.W.delta, spec.W.Delta, spec.alpha,
                          schedule.p, eps_eq if applicable else eps, gap0=gap0)
    e = float(np.sqrt(_weighted_sq(D_prev, X - xs).sum()))
    return OneStepExpectation(
        F=F_x, expected_F=float(exp_F), descent_rhs=F_x - tc.descent_coef * gnorm ** 2,
        grad_norm=gnorm, weighted_pre=e, expected_weighted=float(exp_w),
        recursion_rhs=tc.Gamma1 * e ** 2 + tc.gamma_t(t) * e, constants=tc,
        applicable=applicable)
