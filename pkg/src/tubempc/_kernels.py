"""Hot numeric kernels: primal active-set QP iteration.

The kernel is written in nopython-compatible numpy and compiled with numba
unless TUBEMPC_PURE_NUMPY is set (or numba is unavailable), in which case the
identical pure-numpy function runs.  `benchmarks/bench_kernels.py` compares
the two paths.

The kernel requires a feasible starting point (phase 1 lives in qp.py) and a
positive definite Hessian (regularization lives in qp.py).  Each working-set
iteration solves the equality-constrained subproblem through the Cholesky
factor of H computed once per call, with a fresh small Cholesky of the Schur
complement of the working rows.
"""

from __future__ import annotations

import os

import numpy as np

STATUS_OPTIMAL = 0
STATUS_MAX_ITER = 1
STATUS_DEGENERATE = 2


def _forward_sub(L, b):
    n = L.shape[0]
    x = np.empty(n)
    for i in range(n):
        s = b[i]
        for j in range(i):
            s -= L[i, j] * x[j]
        x[i] = s / L[i, i]
    return x


def _backward_sub(L, b):
    # solves L.T x = b
    n = L.shape[0]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = b[i]
        for j in range(i + 1, n):
            s -= L[j, i] * x[j]
        x[i] = s / L[i, i]
    return x


def _chol_solve(L, b):
    return _backward_sub(L, _forward_sub(L, b))


def _active_set_core(H, f, A, b, Aeq, beq, x0, act0, max_iter, tol):
    """Primal active-set method for min 1/2 x'Hx + f'x, A x <= b, Aeq x = beq.

    x0 must be feasible.  act0 seeds the working set (will be pruned to keep
    the working rows independent).  Returns (x, lam_in, lam_eq, status, iters).
    """
    n = H.shape[0]
    m_in = A.shape[0]
    m_eq = Aeq.shape[0]
    L = np.linalg.cholesky(H)
    x = x0.copy()

    act = np.zeros(m_in, dtype=np.bool_)
    # seed working set from act0, capped so m_eq + n_act < n stays solvable
    n_act = 0
    for i in range(m_in):
        if act0[i] and m_eq + n_act < n:
            act[i] = True
            n_act += 1

    W = np.empty((n, n))        # working rows buffer (rows m_eq + n_act)
    lam_in = np.zeros(m_in)
    lam_eq = np.zeros(m_eq)
    status = STATUS_MAX_ITER
    it = 0
    # scale for rank decisions in the Schur complement
    hscale = 0.0
    for i in range(n):
        if H[i, i] > hscale:
            hscale = H[i, i]

    while it < max_iter:
        it += 1
        m_w = m_eq + n_act
        for i in range(m_eq):
            W[i, :] = Aeq[i, :]
        r = m_eq
        for i in range(m_in):
            if act[i]:
                W[r, :] = A[i, :]
                r += 1

        g = H @ x + f
        h = _chol_solve(L, g)
        if m_w > 0:
            Wv = W[:m_w, :].copy()
            # step targets the working surface: W p = r with r the current
            # residual, so factorization ridge error cannot accumulate
            r_res = np.empty(m_w)
            for i in range(m_eq):
                r_res[i] = beq[i] - Aeq[i, :] @ x
            rr = m_eq
            for i in range(m_in):
                if act[i]:
                    r_res[rr] = b[i] - A[i, :] @ x
                    rr += 1
            Y = np.empty((n, m_w))
            for j in range(m_w):
                Y[:, j] = _chol_solve(L, Wv[j, :])
            S0 = Wv @ Y
            S = S0.copy()
            # ridge keeps nearly dependent working rows solvable
            ridge = 1e-12 * (np.trace(S0) / m_w + 1.0)
            for j in range(m_w):
                S[j, j] += ridge
            Ls = np.linalg.cholesky(S)
            rhs = -(Wv @ h) - r_res
            lam = _backward_sub(Ls, _forward_sub(Ls, rhs))
            # one refinement step removes the first-order ridge error
            lam = lam + _backward_sub(Ls, _forward_sub(Ls, rhs - S0 @ lam))
            p = -h - Y @ lam
        else:
            lam = np.zeros(0)
            p = -h

        pnorm = 0.0
        for i in range(n):
            if abs(p[i]) > pnorm:
                pnorm = abs(p[i])
        xscale = 1.0
        for i in range(n):
            if abs(x[i]) > xscale:
                xscale = abs(x[i])

        if pnorm <= tol * xscale:
            # stationary on the working set: check inequality multipliers
            min_lam = 0.0
            min_idx = -1
            r = m_eq
            for i in range(m_in):
                if act[i]:
                    if lam[r] < min_lam:
                        min_lam = lam[r]
                        min_idx = i
                    r += 1
            if min_idx < 0 or min_lam >= -tol * max(1.0, hscale * xscale):
                for i in range(m_eq):
                    lam_eq[i] = lam[i]
                r = m_eq
                for i in range(m_in):
                    lam_in[i] = 0.0
                for i in range(m_in):
                    if act[i]:
                        lam_in[i] = max(lam[r], 0.0)
                        r += 1
                if m_w > 0:
                    # polish: exact least-norm restoration onto the working
                    # surface kills the remaining boundary residual
                    G = Wv @ Wv.T
                    gr = 1e-14 * (np.trace(G) / m_w + 1.0)
                    for j in range(m_w):
                        G[j, j] += gr
                    Lg = np.linalg.cholesky(G)
                    x = x + Wv.T @ _backward_sub(Lg, _forward_sub(Lg, r_res))
                status = STATUS_OPTIMAL
                break
            act[min_idx] = False
            n_act -= 1
            continue

        # largest step keeping all inactive rows feasible
        alpha = 1.0
        block = -1
        for i in range(m_in):
            if not act[i]:
                ap = 0.0
                ax = 0.0
                for j in range(n):
                    ap += A[i, j] * p[j]
                    ax += A[i, j] * x[j]
                if ap > 1e-13 * (1.0 + abs(ax)):
                    ai = (b[i] - ax) / ap
                    if ai < alpha - 1e-14:
                        alpha = ai
                        block = i
        if alpha < 0.0:
            alpha = 0.0
        x = x + alpha * p
        if block >= 0:
            if m_eq + n_act >= n:
                # full working set at a degenerate vertex: drop the working
                # inequality with the most negative multiplier estimate
                drop_i = -1
                drop_lam = np.inf
                r = m_eq
                for i in range(m_in):
                    if act[i]:
                        if lam[r] < drop_lam:
                            drop_lam = lam[r]
                            drop_i = i
                        r += 1
                if drop_i < 0:
                    status = STATUS_DEGENERATE
                    break
                act[drop_i] = False
                n_act -= 1
            act[block] = True
            n_act += 1

    return x, lam_in, lam_eq, status, it


def _use_numba() -> bool:
    if os.environ.get("TUBEMPC_PURE_NUMPY", ""):
        return False
    try:
        import numba  # noqa: F401
        return True
    except ImportError:
        return False


NUMBA_ENABLED = _use_numba()

if NUMBA_ENABLED:
    from numba import njit

    _forward_sub_jit = njit(cache=True)(_forward_sub)
    _backward_sub_jit = njit(cache=True)(_backward_sub)

    def _rebind(fn, mapping):
        g = dict(fn.__globals__)
        g.update(mapping)
        import types
        return types.FunctionType(fn.__code__, g, fn.__name__,
                                  fn.__defaults__, fn.__closure__)

    _chol_solve_jit = njit(cache=True)(_rebind(_chol_solve, {
        "_forward_sub": _forward_sub_jit, "_backward_sub": _backward_sub_jit}))
    active_set_kernel = njit(cache=True)(_rebind(_active_set_core, {
        "_chol_solve": _chol_solve_jit, "_forward_sub": _forward_sub_jit,
        "_backward_sub": _backward_sub_jit}))
else:
    active_set_kernel = _active_set_core

active_set_numpy = _active_set_core
