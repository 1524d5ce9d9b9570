"""Reference optima, error metrics and multi-seed rate summaries."""

from __future__ import annotations

from dataclasses import dataclass, asdict
import warnings

import numpy as np

from .newton_core import assemble_D_blocks
from .objectives import (ProblemSpec, penalized_gradient, penalized_hessian, penalized_value)

__all__ = [
    "Reference",
    "ReferenceSolveError",
    "RateReport",
    "solve_reference",
    "solve_constrained_reference",
    "weighted_error",
    "aggregate_rates",
    "rate_report_from_gaps",
    "steps_to_epsilon",
    "mean_steps_to_epsilon",
    "centered_quadratic",
    "numerical_floor",
]

RESIDUAL_TOL = 1e-11
ENVELOPE_SLACK = 1.05
QUAD_WINDOW_TOL = 0.05
MIN_SEEDS = 30
# F(x) - F* is not resolvable below this many ulps of |F*|
FLOOR_ULPS = 1000


class ReferenceSolveError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class Reference:
    x_star: np.ndarray
    F_star: float
    solver_residual: float
    kind: str = "penalized"


def _residual_tol(size):
    # absolute 1e-11 at unit size, grown mildly with the number of blocks
    return RESIDUAL_TOL * max(1.0, np.sqrt(size))


def _newton(value, grad, hess, x0, *, max_iter=200, what=""):
    x = np.asarray(x0, dtype=float).copy()
    tol = _residual_tol(x.size)
    for _ in range(max_iter):
        g = grad(x)
        r = float(np.linalg.norm(g))
        if r <= tol:
            return x, r
        step = np.linalg.solve(hess(x), g)
        f0 = value(x)
        s = 1.0
        # Armijo backtracking; near the optimum the full step is always taken
        while s > 1e-10 and value(x - s * step) > f0 - 1e-4 * s * float(g @ step):
            s *= 0.5
        x_new = x - s * step
        if np.array_equal(x_new, x):
            break
        x = x_new
    r = float(np.linalg.norm(grad(x)))
    if r <= tol:
        return x, r
    raise ReferenceSolveError(f"{what} Newton solve did not converge", r)


def solve_reference(spec: ProblemSpec) -> Reference:
    """Minimizer of the penalized objective.

    Quadratics use a direct linear solve (plus one refinement pass); logistic
    problems use damped Newton on the full penalized objective.
    """
    size = spec.n * spec.dim
    if spec.family == "quadratic":
        c = np.array([f.c for f in spec.locals])
        b = np.concatenate([np.broadcast_to(f.b, (spec.dim,)) for f in spec.locals])
        A = np.kron(spec.laplacian_part, np.eye(spec.dim)) + 2 * spec.alpha * np.kron(
            np.diag(c), np.eye(spec.dim))
        rhs = 2 * spec.alpha * np.repeat(c, spec.dim) * b
        x = np.linalg.solve(A, rhs)
        for _ in range(3):
            r = penalized_gradient(spec, x)
            if np.linalg.norm(r) <= _residual_tol(size):
                break
            x = x - np.linalg.solve(A, r)
        res = float(np.linalg.norm(penalized_gradient(spec, x)))
        if res > _residual_tol(size):
            raise ReferenceSolveError("linear solve inaccurate", res)
    else:
        x, res = _newton(lambda z: penalized_value(spec, z), lambda z: penalized_gradient(spec, z),
                         lambda z: penalized_hessian(spec, z), np.zeros(size), what="penalized")
    return Reference(x, penalized_value(spec, x), res)


def solve_constrained_reference(spec: ProblemSpec) -> Reference:
    """Optimum of ``sum_i f_i(z)`` over a common ``z``; ``x_star`` stacks ``n`` copies."""
    fs = spec.locals
    if spec.family == "quadratic":
        c = np.array([f.c for f in fs])
        b = np.stack([np.broadcast_to(f.b, (spec.dim,)) for f in fs])
        z = (c[:, None] * b).sum(axis=0) / c.sum()
    else:
        z, _ = _newton(lambda z: sum(f.value(z) for f in fs),
                       lambda z: sum(f.gradient(z) for f in fs),
                       lambda z: sum(f.hessian(z) for f in fs), np.zeros(spec.dim),
                       what="constrained")
    res = float(np.linalg.norm(sum(f.gradient(z) for f in fs)))
    return Reference(np.tile(z, spec.n), float(sum(f.value(z) for f in fs)), res, "constrained")


def weighted_error(spec: ProblemSpec, x, x_prev, ref: Reference) -> float:
    """``||D(x_prev)^{1/2} (x - x*)||`` with ``D`` assembled at ``x_prev``."""
    D = assemble_D_blocks(spec, x_prev)
    E = (np.asarray(x, dtype=float) - ref.x_star).reshape(spec.n, spec.dim)
    return float(np.sqrt(np.einsum("kab,ka,kb->", D, E, E)))


@dataclass(frozen=True)
class RateReport:
    empirical_rate: float
    beta_bound: float
    bound_satisfied: float | None
    quad_window: tuple[int, int] | None
    n_seeds: int
    max_envelope_ratio: float

    def text(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in asdict(self).items())

    def csv_row(self) -> list:
        qw = "" if self.quad_window is None else f"{self.quad_window[0]}-{self.quad_window[1]}"
        return [repr(self.empirical_rate), repr(self.beta_bound),
                "" if self.bound_satisfied is None else repr(self.bound_satisfied), qw,
                self.n_seeds, repr(self.max_envelope_ratio)]


def _fit_rate(t, gap, floor=0.0, tail=0.5):
    ok = gap > floor
    t, gap = t[ok], gap[ok]
    if t.size < 2:
        return 1.0
    start = int(t.size * (1 - tail))
    tt, lg = t[start:], np.log(gap[start:])
    if tt.size < 2 or np.ptp(tt) == 0:
        tt, lg = t, np.log(gap)
    slope = np.polyfit(tt.astype(float), lg, 1)[0]
    return float(min(1.0, np.exp(slope)))


def _quad_window(werr):
    """Longest run where the second difference of ``log werr`` is below ``-tol``."""
    w = np.asarray(werr, dtype=float)
    ok = np.isfinite(w) & (w > 0)
    if ok.sum() < 3:
        return None
    lw = np.log(np.where(ok, w, np.nan))
    dd = np.diff(lw, 2)
    flag = np.nan_to_num(dd, nan=0.0) < -QUAD_WINDOW_TOL
    best, run_start, best_span = None, None, 0
    for k, f in enumerate(np.append(flag, False)):
        if f and run_start is None:
            run_start = k
        elif not f and run_start is not None:
            if k - run_start > best_span:
                best, best_span = (run_start, k + 1), k - run_start
            run_start = None
    return best


def numerical_floor(F_star: float) -> float:
    """Smallest objective gap that ``F(x) - F*`` can resolve in double precision."""
    return FLOOR_ULPS * np.finfo(float).eps * abs(F_star)


def rate_report_from_gaps(t, mean_gap, beta, *, n_seeds, mean_werr=None,
                          floor: float = 0.0) -> RateReport:
    """Envelope check and rate fit; steps whose envelope is below ``floor`` are skipped."""
    t = np.asarray(t)
    mean_gap = np.asarray(mean_gap, dtype=float)
    gap0 = mean_gap[0]
    env = (1.0 - beta) ** t * gap0
    keep = env > floor
    t, mean_gap, env = t[keep], mean_gap[keep], env[keep]
    ratio = float(np.max(mean_gap / np.where(env > 0, env, np.inf))) if gap0 > 0 else 0.0
    if n_seeds < MIN_SEEDS:
        warnings.warn(f"only {n_seeds} seeds (< {MIN_SEEDS}); envelope check skipped",
                      stacklevel=3)
        satisfied = None
    else:
        satisfied = float(np.mean(mean_gap <= ENVELOPE_SLACK * env)) if gap0 > 0 else 1.0
    qw = None if mean_werr is None else _quad_window(mean_werr)
    return RateReport(_fit_rate(t, mean_gap, floor), float(1.0 - beta), satisfied, qw, n_seeds,
                      ratio)


def aggregate_rates(traces, constants) -> RateReport:
    """Mean gap across seeds checked against the ``(1-beta)^t`` envelope.

    Traces are truncated to the shortest one. ``max_envelope_ratio`` is the
    largest ``mean_gap / ((1-beta)^t gap0)`` seen (without the slack). Steps
    where the envelope drops below the resolution of ``F - F*`` are skipped.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("no traces")
    k = min(len(tr) for tr in traces)
    gaps = np.stack([tr.gap[:k] for tr in traces])
    werr = np.stack([tr.weighted_err[:k] for tr in traces])
    return rate_report_from_gaps(traces[0].t[:k], gaps.mean(axis=0), constants.beta,
                                 n_seeds=len(traces), mean_werr=werr.mean(axis=0),
                                 floor=numerical_floor(traces[0].F_star))


def steps_to_epsilon(trace, eps_rel: float) -> int | None:
    """First recorded ``t`` with relative error below ``eps_rel``; ``None`` if never."""
    rel = trace.rel_err
    if rel.size and trace.F_star is not None and abs(trace.F[0] - trace.F_star) == 0:
        return int(trace.t[0])
    hit = np.flatnonzero(rel < eps_rel)
    return int(trace.t[hit[0]]) if hit.size else None


def mean_steps_to_epsilon(traces, eps_rel: float) -> tuple[float, int]:
    """Mean over seeds that reached the threshold, and how many did not."""
    vals = [steps_to_epsilon(tr, eps_rel) for tr in traces]
    hit = [v for v in vals if v is not None]
    return (float(np.mean(hit)) if hit else float("nan")), len(vals) - len(hit)


def centered_quadratic(spec: ProblemSpec, ref: Reference, x0=None):
    """Same quadratic problem expressed in the error coordinate ``y = x - x*``.

    The method commutes with this translation (gradients depend on ``x`` only
    through ``H (x - x*)``), so iterates on the returned problem are exactly
    ``x(t) - x*`` while ``F`` on it is the gap ``F(x) - F*`` with full relative
    precision, instead of a difference of two nearly equal numbers.
    Returns ``(spec0, y0, ref0)``.
    """
    if spec.family != "quadratic":
        raise ValueError("centering only applies to quadratic objectives")
    from .objectives import QuadraticObjective, make_problem
    locals0 = [QuadraticObjective(f.c, np.zeros(spec.dim)) for f in spec.locals]
    spec0 = make_problem(locals0, spec.W, spec.alpha)
    x0 = np.zeros(spec.n * spec.dim) if x0 is None else np.asarray(x0, dtype=float)
    ref0 = Reference(np.zeros(spec.n * spec.dim), 0.0, 0.0, "centered")
    return spec0, x0 - ref.x_star, ref0
