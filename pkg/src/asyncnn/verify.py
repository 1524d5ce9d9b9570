"""Invariant checks behind ``asyncnn verify``.

Each check reports PASS, FAIL or N/A (convergence checks whose stepsize
hypothesis does not hold) together with the measured residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analysis import centered_quadratic, numerical_floor, solve_reference
from .config import ExperimentConfig, build_problem, resolve_probabilities
from .engine import ActivationSchedule, RunConfig, enumerate_one_step_expectation, run_async_newton
from .newton_core import (dense_B, dense_D, dense_hatH_inverse, distributed_directions,
                          error_identity_residual, scaled_splitting, theory_constants)
from .objectives import penalized_gradient, penalized_hessian, penalized_value
from .topology import validate_consensus

PASS, FAIL, NA = "PASS", "FAIL", "N/A"


@dataclass(frozen=True)
class VerifyResult:
    name: str
    status: str
    residual: float
    detail: str = ""

    def line(self) -> str:
        extra = f"  {self.detail}" if self.detail else ""
        return f"{self.status:<4s}  {self.name:<30s} residual={self.residual:.3e}{extra}"


def _check(name, residual, tol, detail=""):
    return VerifyResult(name, PASS if residual <= tol else FAIL, float(residual), detail)


def run_checks(cfg: ExperimentConfig) -> list[VerifyResult]:
    g, cm, spec = build_problem(cfg)
    out = []

    W = cm.W.copy()
    if cfg.verify.tamper_row_sum:
        # test hook: shift a diagonal entry so row 0 no longer sums to one
        W[0, 0] += cfg.verify.tamper_row_sum
    rep = validate_consensus(W, graph=g)
    for c in rep.checks:
        out.append(VerifyResult(f"consensus.{c.name}", PASS if c.passed else FAIL, c.residual,
                                c.detail))
    if not rep.passed:
        return out

    p = resolve_probabilities(cfg)
    ref = solve_reference(spec)
    x0 = np.zeros(spec.n * spec.dim)
    gap0 = penalized_value(spec, x0) - ref.F_star
    base = theory_constants(spec.m, spec.M, spec.L, cm.delta, cm.Delta, spec.alpha, p, gap0=gap0)
    eps = 2.0 * base.eps_as_max if cfg.verify.invalid_eps else base.eps
    tc = theory_constants(spec.m, spec.M, spec.L, cm.delta, cm.Delta, spec.alpha, p, eps=eps,
                          gap0=gap0)

    rng = np.random.default_rng(cfg.topology.seed)
    scale = max(1.0, float(np.abs(ref.x_star).max()))
    states = [ref.x_star + rng.normal(scale=scale, size=ref.x_star.size)
              for _ in range(cfg.verify.states)]

    split = spec_lo = spec_hi = hinv_lo = hinv_hi = ident = direc = 0.0
    B = dense_B(spec)
    for x in states:
        H = penalized_hessian(spec, x)
        split = max(split, float(np.abs(H - (dense_D(spec, x) - B)).max()))
        ev = np.linalg.eigvalsh(scaled_splitting(spec, x))
        spec_lo, spec_hi = min(spec_lo, ev.min()), max(spec_hi, ev.max() - tc.rho)
        Hi = dense_hatH_inverse(spec, x)
        hv = np.linalg.eigvalsh(0.5 * (Hi + Hi.T))
        hinv_lo = max(hinv_lo, tc.lam - hv.min())
        hinv_hi = max(hinv_hi, hv.max() - tc.Lam)
        ident = max(ident, error_identity_residual(spec, x))
        want = -Hi @ penalized_gradient(spec, x)
        direc = max(direc, float(np.abs(distributed_directions(spec, x) - want).max()))
    out.append(_check("splitting_identity", split, 1e-14))
    out.append(_check("scaled_splitting_spectrum", max(0.0, -spec_lo, spec_hi), 1e-10,
                      f"rho={tc.rho:.6g}"))
    out.append(_check("approx_inverse_spectrum", max(hinv_lo, hinv_hi), 1e-10,
                      f"[lambda, Lambda]=[{tc.lam:.6g}, {tc.Lam:.6g}]"))
    out.append(_check("error_identity", ident, 1e-10))
    out.append(_check("direction_equivalence", direc, 1e-10))

    sched = ActivationSchedule(p, "scaled")
    enum = []
    if tc.eps_valid_as:
        enum = [enumerate_one_step_expectation(spec, sched, eps, x, ref) for x in states]
    if not tc.eps_valid_as:
        out.append(VerifyResult("expected_descent", NA, 0.0, f"eps={eps:.6g} above bound"))
    else:
        worst = max(-e.descent_slack for e in enum)
        out.append(_check("expected_descent", max(worst, 0.0), 1e-10, f"max(lhs-rhs)={worst:.3e}"))
    if not tc.eps_valid_lin:
        out.append(VerifyResult("weighted_error_recursion", NA, 0.0, f"eps={eps:.6g} above bound"))
    else:
        worst = max(-e.recursion_slack for e in enum)
        out.append(_check("weighted_error_recursion", max(worst, 0.0), 1e-9,
                          f"max(lhs-rhs)={worst:.3e}"))

    if not tc.eps_valid_lin:
        out.append(VerifyResult("linear_envelope", NA, 0.0, f"eps={eps:.6g} above bound"))
    else:
        out.append(_envelope(cfg, spec, ref, p, eps, tc, gap0))
    return out


def _envelope(cfg, spec, ref, p, eps, tc, gap0):
    T, seeds = cfg.verify.T, cfg.verify.seeds
    if spec.family == "quadratic":
        run_spec, x0, run_ref = centered_quadratic(spec, ref)
        floor = 0.0
    else:
        run_spec, x0, run_ref = spec, None, ref
        floor = numerical_floor(ref.F_star)
    gaps = []
    for s in range(seeds):
        tr = run_async_newton(RunConfig(run_spec, ActivationSchedule(p, "scaled", s), eps, T,
                                        record_every=max(T, 1), x0=x0, reference=run_ref))
        gaps.append(tr.gap)
    mean = np.mean(gaps, axis=0)
    env = (1.0 - tc.beta) ** np.arange(mean.size) * gap0
    # t = 0 is equal by construction
    use = (env > floor) & (np.arange(mean.size) > 0)
    ratio = float(np.max(mean[use] / env[use])) if use.any() else 0.0
    return _check("linear_envelope", ratio, 1.05,
                  f"max mean_gap/envelope over {int(use.sum())} steps, {seeds} seeds")
