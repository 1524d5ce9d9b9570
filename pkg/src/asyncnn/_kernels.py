"""Compiled activation loop for quadratic local objectives.

Mirrors ``AsyncNewtonSimulator.activate`` event for event; only valid when
the local Hessians (hence the ``D`` blocks) are constant.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _matvec(A, v, out):
    d = v.shape[0]
    for a in range(d):
        s = 0.0
        for b in range(d):
            s += A[a, b] * v[b]
        out[a] = s


@njit(cache=True)
def _grad_block(j, x, gradf, Wd, Woff, nbr_ptr, nbr_idx, buf_x, alpha, out):
    d = x.shape[1]
    for a in range(d):
        out[a] = (1.0 - Wd[j]) * x[j, a] + alpha * gradf[j, a]
    for q in range(nbr_ptr[j], nbr_ptr[j + 1]):
        k = nbr_idx[q]
        w = Woff[j, k]
        for a in range(d):
            out[a] -= w * buf_x[j, k, a]


@njit(cache=True)
def _objective(x, IW, fval, alpha):
    n, d = x.shape
    s = 0.0
    for i in range(n):
        for j in range(n):
            w = IW[i, j]
            if w != 0.0:
                for a in range(d):
                    s += w * x[i, a] * x[j, a]
    return 0.5 * s + alpha * fval.sum()


@njit(cache=True)
def quadratic_chunk(agents, steps, costs, x, gradf, fval, c, b, Wd, Woff, IW, nbr_ptr, nbr_idx,
                    D, Dinv, buf_x, buf_d0, g, d0, alpha, xs, has_ref, F_star, denom, stop,
                    elapsed, out_F, out_rel, out_werr, out_el):
    """Run activations in order; returns how many ran (stops early on ``stop``)."""
    n, d = x.shape
    r = np.empty(d)
    di = np.empty(d)
    tmp = np.empty(d)
    for k in range(agents.shape[0]):
        i = agents[k]
        # direction from current buffers
        _grad_block(i, x, gradf, Wd, Woff, nbr_ptr, nbr_idx, buf_x, alpha, tmp)
        _matvec(Dinv[i], tmp, r)
        for a in range(d):
            g[i, a] = tmp[a]
            d0[i, a] = -r[a]
        for a in range(d):
            r[a] = (1.0 - Wd[i]) * d0[i, a] - g[i, a]
        for q in range(nbr_ptr[i], nbr_ptr[i + 1]):
            j = nbr_idx[q]
            w = Woff[i, j]
            for a in range(d):
                r[a] += w * buf_d0[i, j, a]
        _matvec(Dinv[i], r, di)
        # local update
        s = 0.0
        for a in range(d):
            x[i, a] += steps[i] * di[a]
            e = x[i, a] - b[i, a]
            gradf[i, a] = 2.0 * c[i] * e
            s += e * e
        fval[i] = c[i] * s
        _grad_block(i, x, gradf, Wd, Woff, nbr_ptr, nbr_idx, buf_x, alpha, tmp)
        _matvec(Dinv[i], tmp, r)
        for a in range(d):
            g[i, a] = tmp[a]
            d0[i, a] = -r[a]
        # broadcast x_i, d0_i
        for q in range(nbr_ptr[i], nbr_ptr[i + 1]):
            j = nbr_idx[q]
            for a in range(d):
                buf_x[j, i, a] = x[i, a]
                buf_d0[j, i, a] = d0[i, a]
        # neighbors refresh and broadcast their d0
        for q in range(nbr_ptr[i], nbr_ptr[i + 1]):
            j = nbr_idx[q]
            _grad_block(j, x, gradf, Wd, Woff, nbr_ptr, nbr_idx, buf_x, alpha, tmp)
            _matvec(Dinv[j], tmp, r)
            for a in range(d):
                g[j, a] = tmp[a]
                d0[j, a] = -r[a]
        for q in range(nbr_ptr[i], nbr_ptr[i + 1]):
            j = nbr_idx[q]
            for q2 in range(nbr_ptr[j], nbr_ptr[j + 1]):
                l = nbr_idx[q2]
                for a in range(d):
                    buf_d0[l, j, a] = d0[j, a]

        elapsed += costs[i]
        F = _objective(x, IW, fval, alpha)
        out_F[k] = F
        out_el[k] = elapsed
        if has_ref:
            num = abs(F - F_star)
            if denom > 0.0:
                rel = num / denom
            elif num == 0.0:
                rel = 0.0
            else:
                rel = np.inf
            out_rel[k] = rel
            wq = 0.0
            for j in range(n):
                for a in range(d):
                    ea = x[j, a] - xs[j, a]
                    for bb in range(d):
                        wq += ea * D[j, a, bb] * (x[j, bb] - xs[j, bb])
            out_werr[k] = np.sqrt(wq)
            if rel < stop:
                return k + 1
    return agents.shape[0]
