"""Hessian splitting, per-agent Newton directions and the theory constants.

The Hessian of the penalized objective is split as ``H = D - B`` with

    D = alpha * blockdiag(hess f_i) + 2 (I - W_d)      (block diagonal)
    B = I - 2 W_d + W                                  (graph structured)

so that ``H^{-1} = sum_k (D^{-1} B)^k D^{-1}``. The asynchronous method keeps
the first two terms, ``Hhat^{-1} = D^{-1} + D^{-1} B D^{-1}``, which each
agent can evaluate from one-hop information.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .objectives import ProblemSpec

__all__ = [
    "AgentState",
    "TheoryConstants",
    "DENSE_SIZE_BUDGET",
    "compute_D_ii",
    "compute_g_i",
    "compute_d0_i",
    "compute_newton_dir_i",
    "step_active_agent",
    "assemble_D_blocks",
    "block_diag",
    "block_inv_sqrt",
    "block_sqrt",
    "dense_B",
    "dense_D",
    "scaled_splitting",
    "dense_hatH_inverse",
    "series_inverse_K",
    "distributed_directions",
    "error_identity_residual",
    "theory_constants",
    "linear_rate_beta",
]

DENSE_SIZE_BUDGET = 500


@dataclass
class AgentState:
    """What agent ``i`` holds locally: its block and the latest neighbor values."""

    i: int
    x: np.ndarray
    D: np.ndarray
    g: np.ndarray
    d0: np.ndarray
    buf_x: dict[int, np.ndarray] = field(default_factory=dict)
    buf_d0: dict[int, np.ndarray] = field(default_factory=dict)


def compute_D_ii(f, x_i, alpha: float, W_ii: float) -> np.ndarray:
    if not 0.0 < W_ii < 1.0:
        raise ValueError(f"diagonal consensus weight must lie in (0, 1), got {W_ii}")
    x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
    return alpha * f.hessian(x_i) + 2.0 * (1.0 - W_ii) * np.eye(x_i.size)


def _neighbor_sum(weights_row, buf, i):
    total = 0.0
    for j, w in enumerate(weights_row):
        if j == i or w == 0.0:
            continue
        if j not in buf:
            raise RuntimeError(f"agent {i} has no buffered value from neighbor {j}")
        total = total + w * buf[j]
    return total


def compute_g_i(state: AgentState, f, alpha: float, W_row) -> np.ndarray:
    """Local gradient block from the agent's own iterate and buffered ``x_j``."""
    i = state.i
    W_row = np.asarray(W_row, dtype=float)
    g = (1.0 - W_row[i]) * state.x + alpha * f.gradient(state.x)
    return g - _neighbor_sum(W_row, state.buf_x, i)


def compute_d0_i(state: AgentState) -> np.ndarray:
    """Zeroth-order direction ``-D_ii^{-1} g_i``."""
    try:
        np.linalg.cholesky(state.D)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"D block of agent {state.i} is not positive definite") from exc
    return -np.linalg.solve(state.D, state.g)


def compute_newton_dir_i(state: AgentState, W_row) -> np.ndarray:
    """``D_ii^{-1} [B_ii d0_i - g_i + sum_j B_ij d0_j]`` with buffered ``d0_j``.

    ``B_ii = 1 - W_ii`` and ``B_ij = W_ij`` follow from ``B = I - 2 W_d + W``.
    """
    i = state.i
    W_row = np.asarray(W_row, dtype=float)
    rhs = (1.0 - W_row[i]) * state.d0 - state.g + _neighbor_sum(W_row, state.buf_d0, i)
    return np.linalg.solve(state.D, rhs)


def step_active_agent(x_i, d_i, eps: float, p_i: float, *, scaled: bool = True):
    """Newton step of the active agent; ``eps / p_i`` in scaled mode, ``eps`` otherwise."""
    return x_i + (eps / p_i if scaled else eps) * d_i


# dense assembly (verification scale)

def assemble_D_blocks(spec: ProblemSpec, x) -> np.ndarray:
    X = spec.blocks(x)
    Wd = spec.W.W.diagonal()
    return np.stack([compute_D_ii(f, xi, spec.alpha, w) for f, xi, w in zip(spec.locals, X, Wd)])


def block_diag(blocks: np.ndarray) -> np.ndarray:
    n, d, _ = blocks.shape
    out = np.zeros((n * d, n * d))
    for i in range(n):
        out[i * d:(i + 1) * d, i * d:(i + 1) * d] = blocks[i]
    return out


def _block_power(blocks, power):
    vals, vecs = np.linalg.eigh(blocks)
    return np.einsum("kab,kb,kcb->kac", vecs, vals ** power, vecs)


def block_sqrt(blocks: np.ndarray) -> np.ndarray:
    return _block_power(blocks, 0.5)


def block_inv_sqrt(blocks: np.ndarray) -> np.ndarray:
    return _block_power(blocks, -0.5)


def _check_budget(spec):
    size = spec.n * spec.dim
    if size > DENSE_SIZE_BUDGET:
        raise ValueError(f"dense verification limited to {DENSE_SIZE_BUDGET} unknowns, got {size}")


def dense_D(spec: ProblemSpec, x) -> np.ndarray:
    return block_diag(assemble_D_blocks(spec, x))


def dense_B(spec: ProblemSpec) -> np.ndarray:
    W = spec.W.W
    B = np.eye(spec.n) - 2.0 * np.diag(W.diagonal()) + W
    return np.kron(B, np.eye(spec.dim))


def scaled_splitting(spec: ProblemSpec, x) -> np.ndarray:
    """``D^{-1/2} B D^{-1/2}``; its spectrum lies in ``[0, rho]``."""
    _check_budget(spec)
    R = block_diag(block_inv_sqrt(assemble_D_blocks(spec, x)))
    return R @ dense_B(spec) @ R


def dense_hatH_inverse(spec: ProblemSpec, x) -> np.ndarray:
    return series_inverse_K(spec, x, 1)


def series_inverse_K(spec: ProblemSpec, x, K: int) -> np.ndarray:
    """``sum_{k=0..K} (D^{-1} B)^k D^{-1}``, the K-term truncated Hessian inverse."""
    if K < 0:
        raise ValueError("truncation order must be >= 0")
    _check_budget(spec)
    Dinv = block_diag(np.linalg.inv(assemble_D_blocks(spec, x)))
    DinvB = Dinv @ dense_B(spec)
    term = Dinv
    total = Dinv.copy()
    for _ in range(K):
        term = DinvB @ term
        total += term
    return total


def error_identity_residual(spec: ProblemSpec, x) -> float:
    """Frobenius residual of ``D^{1/2}(I - Hhat^{-1} H) = S^2 D^{1/2}``, ``S = D^{-1/2} B D^{-1/2}``."""
    from .objectives import penalized_hessian

    blocks = assemble_D_blocks(spec, x)
    Dh = block_diag(block_sqrt(blocks))
    S = scaled_splitting(spec, x)
    H = penalized_hessian(spec, x)
    lhs = Dh @ (np.eye(H.shape[0]) - dense_hatH_inverse(spec, x) @ H)
    return float(np.linalg.norm(lhs - S @ S @ Dh))


def distributed_directions(spec: ProblemSpec, x) -> np.ndarray:
    """Stack of per-agent directions computed with synchronized buffers.

    Every agent evaluates ``g_i`` and ``d0_i`` from exact neighbor values, then
    ``d_i`` from the neighbors' ``d0_j``; the result equals ``-Hhat^{-1} g``.
    """
    X = spec.blocks(x)
    W = spec.W.W
    states = []
    for i, f in enumerate(spec.locals):
        nb = spec.W.neighbors(i)
        st = AgentState(i, X[i].copy(), compute_D_ii(f, X[i], spec.alpha, W[i, i]),
                        np.zeros(spec.dim), np.zeros(spec.dim),
                        buf_x={int(j): X[j].copy() for j in nb})
        st.g = compute_g_i(st, f, spec.alpha, W[i])
        st.d0 = compute_d0_i(st)
        states.append(st)
    for st in states:
        st.buf_d0 = {j: states[j].d0 for j in st.buf_x}
    return np.concatenate([compute_newton_dir_i(st, W[st.i]) for st in states])


# theory constants

def linear_rate_beta(eps, alpha, m, lam, Lam, pi_min):
    """Per-activation contraction ``beta`` of the expected objective gap."""
    return alpha * m * eps * (2.0 * pi_min * lam ** 2 - eps * Lam ** 2) / (lam * pi_min)


@dataclass(frozen=True)
class TheoryConstants:
    rho: float
    lam: float
    Lam: float
    pi_min: float
    Pi_max: float
    eps: float
    eps_as_max: float
    eps_lin_max: float
    beta: float
    C1: float
    C2: float
    C3: float
    Gamma1: float
    t_quad_onset: float
    eps_valid_as: bool
    eps_valid_lin: bool
    descent_coef: float
    gap0: float | None = None

    def gamma_t(self, t) -> float:
        """Linear coefficient of the weighted-error recursion at activation ``t``."""
        if self.C3 == 0.0:
            return self.C1
        return self.C1 * (1.0 + self.C3 * (1.0 - self.beta) ** ((t - 2) / 4.0))

    def theta_upper(self, t) -> float:
        """Upper end of the admissible ``theta`` range, ``(1 - Gamma(t)) / (Gamma1 Gamma(t))``."""
        G = self.gamma_t(t)
        if self.Gamma1 == 0.0:
            return math.inf if G < 1 else 0.0
        return (1.0 - G) / (self.Gamma1 * G)

    def quad_interval(self, theta: float, t) -> tuple[float, float]:
        """Band ``[theta Gamma(t), theta / (theta Gamma1 + 1))`` on the weighted error
        inside which it decreases quadratically, for a user-chosen ``theta``."""
        return theta * self.gamma_t(t), theta / (theta * self.Gamma1 + 1.0)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def report(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            lines.append(f"{k} = {v!r}" if not isinstance(v, float) else f"{k} = {v:.17g}")
        return "\n".join(lines) + "\n"


def theory_constants(m, M, L, delta, Delta, alpha, p, eps=None, gap0=None) -> TheoryConstants:
    """Closed-form constants for the convergence guarantees.

    Parameters
    ----------
    m, M, L : float
        Curvature bounds and Hessian Lipschitz constant of the local objectives.
    delta, Delta : float
        Smallest and largest diagonal entries of ``W``.
    alpha : float
        Penalty weight.
    p : array_like
        Activation probabilities (must sum to one).
    eps : float, optional
        Stepsize parameter (scaled convention ``eps / p_i``). Defaults to
        ``0.9 * eps_as_max``. Out-of-range values are accepted; the validity
        flags report them.
    gap0 : float, optional
        ``F(x0) - F*``. Needed for ``C3``, ``Gamma(t)`` and the onset bound;
        those are NaN when it is missing.
    """
    p = np.asarray(p, dtype=float)
    if abs(p.sum() - 1.0) > 1e-9 or np.any(p <= 0):
        raise ValueError("activation probabilities must be positive and sum to 1")
    pi_min, Pi_max = float(p.min()), float(p.max())

    d_hi = 2.0 * (1.0 - delta) + alpha * M
    d_lo = 2.0 * (1.0 - Delta) + alpha * m
    rho = 2.0 * (1.0 - delta) / (2.0 * (1.0 - delta) + alpha * m)
    lam = 1.0 / d_hi
    Lam = (1.0 + rho) / d_lo

    eps_as_max = 2.0 * pi_min * (lam / Lam) ** 2
    eps_lin_max = min(0.5, eps_as_max)
    if eps is None:
        eps = 0.9 * eps_as_max
    eps = float(eps)
    valid_as = 0.0 < eps <= eps_as_max
    valid_lin = 0.0 < eps < eps_lin_max

    beta = linear_rate_beta(eps, alpha, m, lam, Lam, pi_min)
    worst = max(eps / pi_min - 2.0,
                eps * (1.0 - rho ** 2) ** 2 / pi_min - 2.0 * (1.0 - rho ** 2))
    c1_sq = 1.0 + eps * worst
    C1 = math.sqrt(c1_sq) if c1_sq >= 0 else math.nan
    C2 = math.sqrt(eps * alpha * L * Lam / (pi_min * d_lo))
    Gamma1 = math.sqrt(d_hi) * alpha * L * eps * Lam / (2.0 * pi_min ** 2 * d_lo)

    if gap0 is None:
        C3 = 0.0 if C2 == 0.0 else math.nan
    else:
        C3 = C2 * (2.0 * max(gap0, 0.0) / (lam * pi_min ** 2)) ** 0.25

    if C3 == 0.0:
        onset = -math.inf
    elif not (0.0 < beta < 1.0) or math.isnan(C3) or not C1 < 1.0:
        onset = math.nan
    else:
        onset = 4.0 * math.log((1.0 - C1) / (C3 * C1)) / math.log(1.0 - beta) + 2.0

    descent = eps * lam - eps ** 2 * Lam ** 2 / (2.0 * lam * pi_min)
    return TheoryConstants(rho, lam, Lam, pi_min, Pi_max, eps, eps_as_max, eps_lin_max, beta,
                           C1, C2, C3, Gamma1, onset, valid_as, valid_lin, descent, gap0)
