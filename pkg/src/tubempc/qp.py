"""Dense convex quadratic programming by a primal active-set method.

One solver backs the planner QPs, the linear tracking MPC, and every SQP
subproblem.  Problems are small (tens of variables, a few hundred rows), so
a dense method with explicit KKT certification is the right tradeoff.
Feasible starting points come from the caller's warm start when possible and
from a phase-1 LP otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from ._kernels import (NUMBA_ENABLED, STATUS_DEGENERATE, STATUS_MAX_ITER,
                       STATUS_OPTIMAL, active_set_kernel, active_set_numpy)

DEFAULT_MAX_ITER = 500
DEFAULT_TOL = 1e-8
FEAS_TOL = 1e-8
KKT_TOL = 1e-7
H_REG = 1e-9


class QpError(ValueError):
    """Construction-time problem defects: dimension mismatch, NaN/Inf data."""


@dataclass
class QpProblem:
    """min 1/2 x'Hx + f'x  s.t.  A_in x <= b_in, A_eq x = b_eq."""

    H: np.ndarray
    f: np.ndarray
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    warm: np.ndarray | None = None
    warm_act: np.ndarray | None = None   # seed working set (same row order)

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        if self.H.shape[1] != n:
            raise QpError("H must be square")
        self.f = np.asarray(self.f, dtype=float).ravel()
        if self.f.size != n:
            raise QpError("f length must match H")
        if self.A_in is None:
            self.A_in = np.zeros((0, n))
            self.b_in = np.zeros(0)
        else:
            self.A_in = np.atleast_2d(np.asarray(self.A_in, dtype=float))
            self.b_in = np.asarray(self.b_in, dtype=float).ravel()
            if self.A_in.shape != (self.b_in.size, n):
                raise QpError("inequality dimensions inconsistent")
        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        else:
            self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
            self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
            if self.A_eq.shape != (self.b_eq.size, n):
                raise QpError("equality dimensions inconsistent")
        for arr in (self.H, self.f, self.A_in, self.b_in, self.A_eq, self.b_eq):
            if arr.size and not np.all(np.isfinite(arr)):
                raise QpError("NaN or Inf in problem data")
        if self.warm is not None:
            self.warm = np.asarray(self.warm, dtype=float).ravel()
            if self.warm.size != n:
                raise QpError("warm start length must match H")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def to_dict(self) -> dict:
        return {"H": self.H.tolist(), "f": self.f.tolist(),
                "A_in": self.A_in.tolist(), "b_in": self.b_in.tolist(),
                "A_eq": self.A_eq.tolist(), "b_eq": self.b_eq.tolist()}


@dataclass
class QpResult:
    x: np.ndarray
    objective: float
    status: str                  # optimal | infeasible | max_iter
    iterations: int
    kkt_residual: float
    lam_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lam_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max_violation: float = 0.0   # diagnostic for infeasible problems
    act: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _phase1_point(A, b, Aeq, beq, n) -> np.ndarray | None:
    """Feasible point via an LP minimizing one joint slack variable."""
    # min s  s.t.  A x - s <= b,  Aeq x = beq,  s >= 0
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A1 = np.hstack([A, -np.ones((A.shape[0], 1))]) if A.shape[0] else None
    rows = [A1] if A1 is not None else []
    rows.append(np.concatenate([np.zeros(n), [-1.0]])[None, :])
    A_ub = np.vstack(rows)
    b_ub = np.concatenate([b, [0.0]]) if A.shape[0] else np.zeros(1)
    A_e = np.hstack([Aeq, np.zeros((Aeq.shape[0], 1))]) if Aeq.shape[0] else None
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_e,
                  b_eq=beq if Aeq.shape[0] else None,
                  bounds=(None, None), method="highs")
    if res.status != 0 or res.x is None:
        return None
    if res.x[-1] > 1e-7:
        return None
    return res.x[:n]


def _violation(pb: QpProblem, x: np.ndarray) -> float:
    v = 0.0
    if pb.A_in.shape[0]:
        v = max(v, float(np.max(pb.A_in @ x - pb.b_in)))
    if pb.A_eq.shape[0]:
        v = max(v, float(np.max(np.abs(pb.A_eq @ x - pb.b_eq))))
    return v


def _kkt_residual(pb, x, lam_in, lam_eq) -> float:
    g = pb.H @ x + pb.f
    if pb.A_in.shape[0]:
        g = g + pb.A_in.T @ lam_in
    if pb.A_eq.shape[0]:
        g = g + pb.A_eq.T @ lam_eq
    scale = max(1.0, float(np.linalg.norm(pb.H @ x + pb.f, np.inf)))
    stat = float(np.linalg.norm(g, np.inf)) / scale
    comp = 0.0
    if pb.A_in.shape[0]:
        comp = float(np.max(np.abs(lam_in * (pb.A_in @ x - pb.b_in)))) / scale
    return max(stat, comp)


def solve_qp(problem: QpProblem, settings: dict | None = None,
             use_numba: bool | None = None) -> QpResult:
    """Solve the QP; deterministic for identical inputs and settings.

    H is symmetrized and, when not positive definite, regularized by adding
    H_REG-scaled identity until a Cholesky factorization exists.
    """
    settings = settings or {}
    max_iter = int(settings.get("max_iter", DEFAULT_MAX_ITER))
    tol = float(settings.get("tol", DEFAULT_TOL))

    H = 0.5 * (problem.H + problem.H.T)
    n = problem.n
    reg = H_REG * max(1.0, float(np.trace(H)) / n)
    for _ in range(40):
        try:
            np.linalg.cholesky(H)
            break
        except np.linalg.LinAlgError:
            H = H + reg * np.eye(n)
            reg *= 10.0
    else:
        raise QpError("could not regularize H to positive definite")

    # symmetric diagonal (Jacobi) column scaling tames the conditioning of
    # long-horizon condensed problems
    dscale = np.sqrt(np.diag(H))
    dscale[dscale < 1e-12] = 1.0
    Dinv = 1.0 / dscale
    H = H * Dinv[None, :] * Dinv[:, None]
    f_s = problem.f * Dinv

    # row-normalize constraints for scale-free tolerances
    A, b = problem.A_in, problem.b_in
    if A.shape[0]:
        A = A * Dinv[None, :]
        norms = np.linalg.norm(A, axis=1)
        norms[norms < 1e-14] = 1.0
        A = A / norms[:, None]
        b = b / norms
    Aeq, beq = problem.A_eq, problem.b_eq
    if Aeq.shape[0]:
        Aeq = Aeq * Dinv[None, :]
        enorms = np.linalg.norm(Aeq, axis=1)
        enorms[enorms < 1e-14] = 1.0
        Aeq = Aeq / enorms[:, None]
        beq = beq / enorms

    scaled = QpProblem(H, f_s, A, b, Aeq, beq)

    x0 = None
    if problem.warm is not None:
        w_s = problem.warm * dscale
        if _violation(scaled, w_s) <= FEAS_TOL:
            x0 = w_s
    if x0 is None:
        x0 = _phase1_point(A, b, Aeq, beq, n)
    if x0 is None:
        # infeasible: report the best achievable max violation as diagnostic
        res = linprog(np.concatenate([np.zeros(n), [1.0]]),
                      A_ub=np.vstack([np.hstack([A, -np.ones((A.shape[0], 1))]),
                                      np.hstack([Aeq, -np.ones((Aeq.shape[0], 1))]),
                                      np.hstack([-Aeq, -np.ones((Aeq.shape[0], 1))])]),
                      b_ub=np.concatenate([b, beq, -beq]),
                      bounds=(None, None), method="highs")
        worst = float(res.x[-1]) if res.status == 0 and res.x is not None else np.inf
        return QpResult(x=np.full(n, np.nan), objective=np.nan,
                        status="infeasible", iterations=0,
                        kkt_residual=np.inf, max_violation=worst)

    act0 = np.zeros(A.shape[0], dtype=bool)
    if A.shape[0]:
        act0 = (b - A @ x0) <= 1e-10 * (1.0 + np.abs(b))
        if problem.warm_act is not None and problem.warm_act.size == A.shape[0]:
            act0 |= problem.warm_act.astype(bool)

    kernel = active_set_kernel
    if use_numba is False or (use_numba is None and not NUMBA_ENABLED):
        kernel = active_set_numpy
    xs, lam_in, lam_eq, code, iters = kernel(
        np.ascontiguousarray(H), np.ascontiguousarray(f_s, dtype=float),
        np.ascontiguousarray(A), np.ascontiguousarray(b),
        np.ascontiguousarray(Aeq), np.ascontiguousarray(beq),
        np.ascontiguousarray(x0, dtype=float), act0, max_iter, 0.05 * tol)

    x = xs * Dinv
    obj = float(0.5 * x @ problem.H @ x + problem.f @ x)
    resid = _kkt_residual(scaled, xs, lam_in, lam_eq)
    viol = _violation(scaled, xs)
    if code == STATUS_OPTIMAL and resid <= KKT_TOL and viol <= FEAS_TOL:
        status = "optimal"
    elif code in (STATUS_MAX_ITER, STATUS_DEGENERATE, STATUS_OPTIMAL):
        status = "max_iter"
    else:
        status = "max_iter"
    act = np.zeros(A.shape[0], dtype=bool)
    if A.shape[0]:
        act = (b - A @ xs) <= 1e-9 * (1.0 + np.abs(b))
    return QpResult(x=x, objective=obj, status=status, iterations=iters,
                    kkt_residual=resid, lam_in=lam_in, lam_eq=lam_eq,
                    max_violation=max(viol, 0.0), act=act)
