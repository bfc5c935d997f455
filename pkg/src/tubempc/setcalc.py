"""Offline design computations for the tube controllers.

Everything here runs before any closed-loop step: feedback gains (Riccati),
terminal costs (discrete Lyapunov), robust positive invariant tube cross
sections, maximal invariant terminal sets, and N-step controllable sets.
All set outputs are certified by explicit support-function checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .polytope import Polytope, PolytopeError, minkowski_sum

DLYAP_TOL = 1e-10
DARE_TOL = 1e-10
DARE_ITER_CAP = 100_000
RPI_CHECK_TOL = 1e-7
SET_RECURSION_TOL = 1e-7


class DesignError(ValueError):
    """Raised when an offline design step cannot be certified."""


@dataclass(frozen=True)
class TubeDesign:
    """Ancillary gain, tube cross section and the closed loop it certifies.

    The certificate is robust positive invariance: closed_loop * cross_section
    (+) disturbance stays inside cross_section.
    """

    gain: np.ndarray
    cross_section: Polytope
    closed_loop: np.ndarray
    disturbance: Polytope | None = None

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.closed_loop))))

    def check(self, tol: float = RPI_CHECK_TOL) -> None:
        if self.spectral_radius() >= 1.0:
            raise DesignError("tube closed loop is not Schur stable")
        mapped = self.cross_section.affine_map(self.closed_loop)
        if self.disturbance is not None and not self.disturbance.is_empty():
            mapped = minkowski_sum(mapped, self.disturbance)
        if not mapped.subset_of(self.cross_section, tol):
            raise DesignError("tube cross section is not robust invariant")


@dataclass(frozen=True)
class TerminalDesign:
    """Terminal gain, quadratic cost matrix, level and terminal set."""

    gain_f: np.ndarray
    cost_matrix: np.ndarray
    set: Polytope
    level: float = 1.0
    lyap_residual: float = field(default=0.0)


def solve_dlyap(Acl, Qbar) -> np.ndarray:
    """Solve Acl' P Acl + Qbar = P for stable Acl.

    Uses the vectorized (Kronecker) linear solve; the residual must meet
    DLYAP_TOL or the result is rejected.
    """
    Acl = np.atleast_2d(np.asarray(Acl, dtype=float))
    Qbar = np.atleast_2d(np.asarray(Qbar, dtype=float))
    rho = np.max(np.abs(np.linalg.eigvals(Acl)))
    if rho >= 1.0:
        raise DesignError(f"dlyap requires a Schur stable matrix (rho={rho:.4f})")
    # scipy solves a X a' - X + q = 0; our equation is A' P A - P + Q = 0
    P = solve_discrete_lyapunov(Acl.T, Qbar)
    P = 0.5 * (P + P.T)
    res = np.linalg.norm(Acl.T @ P @ Acl + Qbar - P)
    if res > DLYAP_TOL * max(1.0, np.linalg.norm(P)):
        raise DesignError(f"dlyap residual {res:.2e} too large")
    return P


def solve_dare(A, B, Q, R, iter_cap: int = DARE_ITER_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-point iteration for the discrete algebraic Riccati equation.

    Returns (P, K) with K = -(R + B'PB)^-1 B'PA, so A + B K is the stable
    closed loop of the error-feedback law u = v + K e.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if np.any(np.linalg.eigvalsh(R) <= 0):
        raise DesignError("R must be positive definite")
    P = Q.copy()
    for _ in range(iter_cap):
        BtP = B.T @ P
        G = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ G
        P_next = 0.5 * (P_next + P_next.T)
        if np.linalg.norm(P_next - P) <= DARE_TOL * max(1.0, np.linalg.norm(P_next)):
            P = P_next
            break
        P = P_next
    else:
        raise DesignError("DARE iteration did not converge within the cap")
    BtP = B.T @ P
    K = -np.linalg.solve(R + BtP @ B, BtP @ A)
    res = np.linalg.norm(A.T @ P @ A - P + Q
                         - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A))
    if res > 1e-8 * max(1.0, np.linalg.norm(P)):
        raise DesignError(f"DARE residual {res:.2e} too large")
    return P, K


def dare_residual(A, B, Q, R, P) -> float:
    BtP = B.T @ P
    return float(np.linalg.norm(
        A.T @ P @ A - P + Q - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)))


def rpi_outer(Acl, W: Polytope, alpha_max: float = 0.1, eps: float = RPI_CHECK_TOL,
              iter_cap: int = 200) -> Polytope:
    """Invariant outer approximation F = (1-a)^-1 (W + Acl W + ... + Acl^(s-1) W).

    s is the smallest power with Acl^s W inside a*W for some a <= alpha_max.
    The returned set is certified robust positive invariant for (Acl, W).
    """
    Acl = np.atleast_2d(np.asarray(Acl, dtype=float))
    rho = np.max(np.abs(np.linalg.eigvals(Acl)))
    if rho >= 1.0:
        raise DesignError(f"rpi_outer requires a Schur stable matrix (rho={rho:.4f})")
    if not W.contains(np.zeros(W.dim), 1e-9):
        raise DesignError("disturbance set must contain the origin")

    def alpha_for(power_map: np.ndarray) -> float:
        # smallest a with Acl^s W inside a*W; rows with zero offset must
        # already be satisfied at level zero
        mapped = W.affine_map(power_map)
        a = 0.0
        for n, b in zip(W.normals, W.offsets):
            h = mapped.support(n)
            if b <= 1e-12:
                if h > 1e-10:
                    return np.inf
                continue
            a = max(a, h / b)
        return a

    F = W.reduce()
    M = Acl.copy()
    s = 1
    while True:
        alpha = alpha_for(M)
        if alpha <= alpha_max:
            break
        F = minkowski_sum(F, W.affine_map(M))
        M = M @ Acl
        s += 1
        if s > iter_cap:
            raise DesignError("alpha criterion unreachable within iteration cap")
    if alpha > 0.0:
        F = F.scale(1.0 / (1.0 - alpha))
    F = F.reduce()
    TubeDesign(np.zeros((1, W.dim)), F, Acl, W).check(max(eps, RPI_CHECK_TOL))
    return F


def max_control_invariant(A, B, X: Polytope, U: Polytope | None,
                          iter_cap: int = 200) -> tuple[Polytope, bool]:
    """Maximal control invariant subset of X via backward reachability.

    Omega_{j+1} = {x in Omega_j : exists u in U with A x + B u in Omega_j}.
    Pass B = 0 (or U = None) for the autonomous case.  Returns (set,
    converged); on iter_cap exhaustion the best iterate is returned flagged.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if X.is_empty():
        raise DesignError("state constraint set is empty")
    B = None if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    autonomous = B is None or not np.any(B) or U is None
    omega = X.reduce()
    for _ in range(iter_cap):
        pre = _pre_set(A, B, U, omega, autonomous)
        nxt = pre.intersect(omega)
        if nxt.is_empty():
            return nxt, True
        if nxt.subset_of(omega, SET_RECURSION_TOL) and \
           omega.subset_of(nxt, SET_RECURSION_TOL):
            return nxt, True
        omega = nxt
    return omega, False


def _pre_set(A, B, U, target: Polytope, autonomous: bool) -> Polytope:
    """{x : exists u in U with A x + B u in target} (H-rep, exact)."""
    F, g = target.normals, target.offsets
    if autonomous:
        return Polytope(F @ A, g)
    # eliminate the input coordinates from  [F A, F B; 0, Hu] [x; u] <= [g; hu]
    m = B.shape[1]
    Ax = np.hstack([F @ A, F @ B])
    Hu = np.hstack([np.zeros((U.normals.shape[0], A.shape[1])), U.normals])
    rows = np.vstack([Ax, Hu])
    offs = np.concatenate([g, U.offsets])
    for _ in range(m):
        rows, offs = _fourier_motzkin_last(rows, offs)
        p = Polytope(rows, offs).reduce()
        rows, offs = p.normals, p.offsets
    return Polytope(rows, offs)


def _fourier_motzkin_last(rows: np.ndarray, offs: np.ndarray):
    """Eliminate the last column by Fourier-Motzkin."""
    c = rows[:, -1]
    pos = c > 1e-12
    neg = c < -1e-12
    zero = ~(pos | neg)
    out_rows = [rows[zero, :-1]]
    out_offs = [offs[zero]]
    P, pn = rows[pos, :-1] / c[pos, None], offs[pos] / c[pos]
    N, nn = rows[neg, :-1] / (-c[neg, None]), offs[neg] / (-c[neg])
    for i in range(P.shape[0]):
        out_rows.append(P[i] + N)
        out_offs.append(pn[i] + nn)
    return np.vstack(out_rows), np.concatenate(out_offs)


def controllable_set_n(A, B, g_bound: Polytope | None, Xt: Polytope,
                       U: Polytope, target: Polytope, N: int) -> Polytope:
    """N-step controllable set K_N to `target` under x+ = A x + B u (+ g).

    A nonzero g_bound G makes each backward step use target (-) G, a
    conservative (inner) treatment of the nonlinearity as bounded disturbance.
    Empty intermediate sets are returned empty.
    """
    if target.is_empty():
        raise DesignError("controllable-set target is empty")
    K = target.reduce()
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    for _ in range(N):
        shrunk = K if g_bound is None else K.pontryagin_diff(g_bound)
        if shrunk.is_empty():
            return shrunk
        pre = _pre_set(A, B, U, shrunk, autonomous=False)
        K = pre.intersect(Xt)
        if K.is_empty():
            return K
    return K


def levelset_polytope(P, c: float, facets: int) -> Polytope:
    """Inner polyhedral approximation of the ellipse {z : z' P z <= c}.

    Vertices are placed on the ellipse boundary at uniformly spread angles,
    so membership in the polytope certifies z' P z <= c.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n = P.shape[0]
    if c <= 0:
        raise DesignError("level must be positive")
    evals = np.linalg.eigvalsh(P)
    if np.any(evals <= 0):
        raise DesignError("cost matrix must be positive definite")
    if facets < 2 * n:
        raise DesignError("need at least 2*dim facets")
    L = np.linalg.cholesky(P)
    Linv = np.linalg.inv(L)
    if n == 2:
        theta = np.linspace(0.0, 2.0 * np.pi, facets, endpoint=False)
        unit = np.column_stack([np.cos(theta), np.sin(theta)])
    else:
        # cross-polytope vertices: exact inner approximation in any dim
        unit = np.vstack([np.eye(n), -np.eye(n)])
    pts = np.sqrt(c) * unit @ Linv.T
    from .polytope import hull_of_points
    return hull_of_points(pts).reduce()


def symmetrize_box(p: Polytope) -> Polytope:
    """Axis-aligned symmetric interval hull using the smaller bound per axis.

    Used before terminal-set recursions when tightened boxes are asymmetric.
    """
    n = p.dim
    lo = np.empty(n)
    hi = np.empty(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        hi[i] = p.support(e)
        lo[i] = -p.support(-e)
    half = np.minimum(np.abs(lo), np.abs(hi))
    return Polytope.from_box(-half, half)
