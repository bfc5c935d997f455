"""Sequential quadratic programming for the nonlinear tracking problems.

Dynamics enter as equality defects (multiple shooting), which keeps every
inequality affine in the decision vector, so a feasible warm start stays
feasible for all subproblems.  The objective is quadratic, so its own
Hessian is the (exact) Gauss-Newton model; only the dynamics are linearized.
Globalization is a backtracking line search on an l1 merit function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .qp import QpProblem, QpResult, solve_qp

DEFAULT_MAX_ITER = 30
DEFAULT_TOL = 1e-8
DEFAULT_MERIT_PENALTY = 1e3
ARMIJO_C1 = 1e-4
BACKTRACK = 0.5
MAX_BACKTRACKS = 30
FEAS_TOL = 1e-6
WARM_TOL = 1e-8


class SqpError(ValueError):
    """NaN callbacks or warm starts violating the affine constraints."""


@dataclass
class NlpProblem:
    """min 1/2 x'Hx + f'x  s.t.  c(x) = 0 (dynamics defects), A x <= b.

    The objective is quadratic by construction (H, f); eq_constraints
    returns (c, J) for the defect vector and its Jacobian.  eq_correction,
    when given, maps the current point to a step zeroing the linearized
    defects without touching the inputs (cascaded state correction); it is
    used to seed each subproblem QP with an equality-feasible point.
    """

    decision_dim: int
    H: np.ndarray
    f: np.ndarray
    eq_constraints: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    ineq_A: np.ndarray
    ineq_b: np.ndarray
    warm: np.ndarray
    eq_correction: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    warm_act: np.ndarray | None = None   # working-set seed, stable row order

    def objective(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        g = self.H @ x + self.f
        return float(0.5 * x @ (self.H @ x) + self.f @ x), g


@dataclass
class NlpResult:
    x: np.ndarray
    objective: float
    status: str                    # optimal | feasible_suboptimal | infeasible
    iterations: int
    constraint_violation: float
    qp_iterations: int = 0
    act: np.ndarray | None = None
    _warm_objective: float = field(default=np.nan)


def _total_violation(pb: NlpProblem, x: np.ndarray, c: np.ndarray) -> float:
    v = float(np.max(np.abs(c))) if c.size else 0.0
    if pb.ineq_A.shape[0]:
        v = max(v, float(np.max(pb.ineq_A @ x - pb.ineq_b)))
    return v


def solve_sqp(problem: NlpProblem, settings: dict | None = None) -> NlpResult:
    """SQP with l1 merit line search.

    Never returns a point with worse merit than the warm start: the warm
    start itself is the fallback iterate, so callers relying on a feasible
    warm start always get at least that solution back.
    """
    settings = settings or {}
    max_iter = int(settings.get("max_iter", DEFAULT_MAX_ITER))
    tol = float(settings.get("tol", DEFAULT_TOL))
    mu = float(settings.get("merit_penalty", DEFAULT_MERIT_PENALTY))

    x = np.asarray(problem.warm, dtype=float).copy()
    if x.size != problem.decision_dim:
        raise SqpError("warm start has wrong dimension")
    if problem.ineq_A.shape[0]:
        v0 = float(np.max(problem.ineq_A @ x - problem.ineq_b))
        if v0 > WARM_TOL * max(1.0, float(np.max(np.abs(problem.ineq_b)))):
            raise SqpError(f"warm start violates affine constraints by {v0:.2e}")

    def merit(xv, cv):
        ob, _ = problem.objective(xv)
        pen = float(np.sum(np.abs(cv))) if cv.size else 0.0
        return ob + mu * pen, ob

    c, J = problem.eq_constraints(x)
    if not np.all(np.isfinite(c)):
        raise SqpError("NaN in equality constraint callback")
    phi, obj = merit(x, c)
    warm_obj = obj
    warm_feasible = _total_violation(problem, x, c) <= FEAS_TOL

    best_x, best_obj = x.copy(), obj
    best_viol = _total_violation(problem, x, c)
    qp_iters = 0
    status = "feasible_suboptimal"
    it = 0
    act = problem.warm_act

    for it in range(1, max_iter + 1):
        _, g = problem.objective(x)
        # p0 seeds the subproblem with an equality-feasible point
        p0 = None
        if problem.eq_correction is not None and np.max(np.abs(c)) > 0:
            p0 = problem.eq_correction(x, c)
            if problem.ineq_A.shape[0] and \
               np.max(problem.ineq_A @ (x + p0) - problem.ineq_b) > WARM_TOL:
                p0 = None
        elif np.max(np.abs(c)) <= 1e-12:
            p0 = np.zeros_like(x)
        qp = QpProblem(H=problem.H, f=g,
                       A_in=problem.ineq_A,
                       b_in=problem.ineq_b - problem.ineq_A @ x
                       if problem.ineq_A.shape[0] else None,
                       A_eq=J, b_eq=-c, warm=p0, warm_act=act)
        res: QpResult = solve_qp(qp, {"tol": tol})
        qp_iters += res.iterations
        if res.act.size:
            act = res.act
        if res.status == "infeasible":
            status = "infeasible" if best_viol > FEAS_TOL else "feasible_suboptimal"
            break
        p = res.x

        step = float(np.max(np.abs(p)))
        if step <= tol * max(1.0, float(np.max(np.abs(x)))):
            if best_viol <= FEAS_TOL:
                status = "optimal"
            break

        # keep the penalty dominating the multipliers
        if res.lam_eq.size:
            lam_max = float(np.max(np.abs(res.lam_eq)))
            if mu < 2.0 * lam_max:
                mu = 2.0 * lam_max
                phi, _ = merit(x, c)

        deriv = float(g @ p) - mu * (float(np.sum(np.abs(c))) if c.size else 0.0)
        alpha = 1.0
        accepted = False
        for _ in range(MAX_BACKTRACKS):
            x_try = x + alpha * p
            c_try, J_try = problem.eq_constraints(x_try)
            if np.all(np.isfinite(c_try)):
                phi_try, obj_try = merit(x_try, c_try)
                if phi_try <= phi + ARMIJO_C1 * alpha * deriv:
                    accepted = True
                    break
            alpha *= BACKTRACK
        if not accepted:
            if best_viol <= FEAS_TOL:
                status = "feasible_suboptimal"
            break
        x, c, J, phi = x_try, c_try, J_try, phi_try
        viol = _total_violation(problem, x, c)
        if viol <= FEAS_TOL and (best_viol > FEAS_TOL or obj_try < best_obj):
            best_x, best_obj, best_viol = x.copy(), obj_try, viol
        if it == max_iter and best_viol <= FEAS_TOL:
            status = "feasible_suboptimal"

    # never worse than the warm start in objective among feasible iterates
    out_x, out_obj = best_x, best_obj
    viol_out = best_viol
    if viol_out > FEAS_TOL:
        return NlpResult(x=x, objective=float(problem.objective(x)[0]),
                         status="infeasible", iterations=it,
                         constraint_violation=viol_out, qp_iterations=qp_iters,
                         act=act, _warm_objective=warm_obj)
    if warm_feasible and out_obj > warm_obj + 1e-12 * max(1.0, abs(warm_obj)):
        out_x = np.asarray(problem.warm, dtype=float).copy()
        out_obj = warm_obj
    return NlpResult(x=out_x, objective=out_obj, status=status, iterations=it,
                     constraint_violation=viol_out, qp_iterations=qp_iters,
                     act=act, _warm_objective=warm_obj)
