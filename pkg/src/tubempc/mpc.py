"""Controllers: tube MPC, the hierarchical planner/tracker pair, scheduling.

Layer semantics: one or more long-horizon linear planner layers ("parents")
produce nominal plans plus invariant tubes; the short-horizon tracker
("child") steers the plant inside the lowest tube with no terminal
constraint.  A conventional short-horizon tube MPC takes over once the
tracker's nominal state enters the untranslated bottom tube cross section.

The planner QPs are solved in condensed form (initial state + held input
blocks as decisions; states eliminated exactly through the linear dynamics).
The tracker solves a multiple-shooting SQP warm-started from the planner's
ancillary rollout, re-anchored each step at the tracker's own one-step-ahead
nominal prediction so the warm start satisfies every constraint whenever the
planner problem was feasible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .polytope import Polytope, minkowski_sum
from .qp import QpProblem, QpResult, solve_qp
from .setcalc import TubeDesign
from .sqp import NlpProblem, NlpResult, solve_sqp


class ControllerError(RuntimeError):
    """Protocol violations that indicate a design or implementation bug."""


class InfeasibleError(RuntimeError):
    """Controller problem infeasible at the current state (reported, not a bug)."""


@dataclass
class LipschitzSystem:
    """x+ = A x + g(x) + B u + w with g Lipschitz, g(0) = 0."""

    A: np.ndarray
    B: np.ndarray
    W: Polytope
    X: Polytope
    U: Polytope
    g: Callable[[np.ndarray], np.ndarray] | None = None
    g_jac: Callable[[np.ndarray], np.ndarray] | None = None
    L: float = 0.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def g_eval(self, x: np.ndarray) -> np.ndarray:
        return self.g(x) if self.g is not None else np.zeros(self.n)

    def g_jac_eval(self, x: np.ndarray) -> np.ndarray:
        if self.g is None:
            return np.zeros((self.n, self.n))
        if self.g_jac is not None:
            return self.g_jac(x)
        # central differences, step 1e-7
        J = np.zeros((self.n, self.n))
        h = 1e-7
        for j in range(self.n):
            e = np.zeros(self.n)
            e[j] = h
            J[:, j] = (self.g(x + e) - self.g(x - e)) / (2 * h)
        return J

    def f_nominal(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A @ x + self.g_eval(x) + self.B @ np.atleast_1d(u)

    def check_lipschitz(self, rng: np.random.Generator, samples: int = 200) -> bool:
        if self.g is None:
            return True
        lo = np.array([-self.X.support(-e) for e in np.eye(self.n)])
        hi = np.array([self.X.support(e) for e in np.eye(self.n)])
        for _ in range(samples):
            x1 = rng.uniform(lo, hi)
            x2 = rng.uniform(lo, hi)
            d = np.linalg.norm(x1 - x2)
            if d > 1e-12 and np.linalg.norm(self.g(x1) - self.g(x2)) > self.L * d * (1 + 1e-9):
                return False
        return True


@dataclass
class LayerConfig:
    """All design data one MPC layer needs at run time."""

    horizon: int
    Q: np.ndarray
    R: np.ndarray
    P_term: np.ndarray
    tube: TubeDesign
    tightened_state: Polytope
    tightened_input: Polytope
    terminal_set: Polytope | None = None
    input_hold: int = 1
    update_period: int = 1
    target_offset: np.ndarray | None = None
    ancillary: str = "linear"           # linear | cancel

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.P_term = np.atleast_2d(np.asarray(self.P_term, dtype=float))
        if self.target_offset is None:
            self.target_offset = np.zeros(self.Q.shape[0])
        else:
            self.target_offset = np.asarray(self.target_offset, dtype=float).ravel()
        if self.horizon % self.input_hold != 0:
            raise ControllerError("horizon must be divisible by input_hold")


@dataclass
class ParentState:
    """One planner layer's solution, consumed by index shifting between solves."""

    z_traj: np.ndarray           # (N+1, n)
    v_traj: np.ndarray           # (N, m), base-step expanded
    x_virtual: np.ndarray        # (N+1, n) ancillary rollout from solve-time anchor
    u_virtual: np.ndarray        # (N, m)
    solved_at: int
    age: int = 0
    feasible: bool = True
    objective: float = 0.0
    act: np.ndarray | None = None


@dataclass
class ChildState:
    z_traj: np.ndarray           # (N+1, n)
    v_traj: np.ndarray           # (N, m) total nominal inputs
    dv_traj: np.ndarray          # (N, m) increments relative to the rollout law
    feasible: bool = True
    objective: float = 0.0
    warm_objective: float = 0.0
    act: np.ndarray | None = None


PHASE_PRIMARY = "primary"
PHASE_SECONDARY = "secondary"


# --------------------------------------------------------------------------
# condensed linear MPC (planner layers and linear tube MPC)


class CondensedLinearMpc:
    """Dense condensed QP for linear dynamics with held input blocks.

    Decision vector q = [z0; u_0; ...; u_{nb-1}] with each u block applied
    for `hold` base steps.  States are eliminated exactly:
    z_i = A^i z0 + sum_j G_ij u_j.
    """

    def __init__(self, A, B, cfg: LayerConfig, anchor_set: Polytope,
                 stage_tube: Polytope | None = None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.cfg = cfg
        self.anchor_set = anchor_set
        self.stage_tube = stage_tube
        n, m = self.A.shape[0], self.B.shape[1]
        N, hold = cfg.horizon, cfg.input_hold
        nb = N // hold
        self.n, self.m, self.N, self.nb, self.hold = n, m, N, nb, hold
        nq = n + m * nb
        self.nq = nq

        # state maps: Z[i] = Phi_i z0 + Gam_i u,  i = 0..N
        powers = [np.eye(n)]
        for _ in range(N):
            powers.append(self.A @ powers[-1])
        Phi = powers
        Gam = [np.zeros((n, m * nb)) for _ in range(N + 1)]
        for i in range(1, N + 1):
            Gam[i] = self.A @ Gam[i - 1]
            blk = (i - 1) // hold
            Gam[i][:, blk * m:(blk + 1) * m] += self.B
        self.Phi, self.Gam = Phi, Gam

        t = cfg.target_offset
        H = np.zeros((nq, nq))
        f = np.zeros(nq)
        const = 0.0
        for i in range(N + 1):
            Wt = cfg.Q if i < N else cfg.P_term
            Map = np.hstack([Phi[i], Gam[i]])
            H += 2.0 * Map.T @ Wt @ Map
            f += -2.0 * Map.T @ Wt @ t
            const += float(t @ Wt @ t)
        for blk in range(nb):
            S = np.zeros((m, nq))
            S[:, n + blk * m:n + (blk + 1) * m] = np.eye(m)
            H += 2.0 * hold * S.T @ cfg.R @ S
        self.H, self.f, self.cost_const = H, f, const

        rows, offs, kinds = [], [], []
        # anchor rows: anchor - z0 in anchor_set  (b filled per solve)
        Ea = anchor_set.normals
        Ra = np.zeros((Ea.shape[0], nq))
        Ra[:, :n] = -Ea
        rows.append(Ra)
        offs.append(anchor_set.offsets.copy())
        kinds.extend(["anchor"] * Ea.shape[0])
        # state rows for i = 1..N
        Xt = cfg.tightened_state
        for i in range(1, N + 1):
            Map = np.hstack([Phi[i], Gam[i]])
            rows.append(Xt.normals @ Map)
            offs.append(Xt.offsets.copy())
            kinds.extend(["state"] * Xt.normals.shape[0])
        # terminal or stage-tube rows
        self._tube_rows_start = sum(r.shape[0] for r in rows)
        if stage_tube is not None:
            Et = stage_tube.normals
            for i in range(0, N + 1):
                Map = np.hstack([Phi[i], Gam[i]])
                rows.append(Et @ Map)
                offs.append(stage_tube.offsets.copy())
                kinds.extend([f"tube{i}"] * Et.shape[0])
        if cfg.terminal_set is not None:
            MapN = np.hstack([Phi[N], Gam[N]])
            rows.append(cfg.terminal_set.normals @ MapN)
            offs.append(cfg.terminal_set.offsets.copy())
            kinds.extend(["terminal"] * cfg.terminal_set.normals.shape[0])
        # input rows per block
        Vt = cfg.tightened_input
        for blk in range(nb):
            S = np.zeros((Vt.normals.shape[1], nq))
            S[:, n + blk * m:n + (blk + 1) * m] = np.eye(m)
            rows.append(Vt.normals @ S)
            offs.append(Vt.offsets.copy())
            kinds.extend(["input"] * Vt.normals.shape[0])
        self.A_in = np.vstack(rows)
        self.b_base = np.concatenate(offs)
        self.kinds = np.array(kinds)
        self.anchor_rows = slice(0, Ea.shape[0])

    def build_b(self, anchor: np.ndarray,
                tube_refs: np.ndarray | None = None) -> np.ndarray:
        b = self.b_base.copy()
        Ea = self.anchor_set.normals
        b[self.anchor_rows] = self.anchor_set.offsets - Ea @ anchor
        if self.stage_tube is not None:
            if tube_refs is None:
                raise ControllerError("stage-tube layer needs reference states")
            Et = self.stage_tube
            r = self._tube_rows_start
            for i in range(self.N + 1):
                nr = Et.normals.shape[0]
                b[r:r + nr] = Et.offsets + Et.normals @ tube_refs[i]
                r += nr
        return b

    def solve(self, anchor: np.ndarray, warm: np.ndarray | None = None,
              tube_refs: np.ndarray | None = None,
              settings: dict | None = None,
              warm_act: np.ndarray | None = None
              ) -> tuple[np.ndarray, np.ndarray, QpResult]:
        b = self.build_b(anchor, tube_refs)
        res = solve_qp(QpProblem(self.H, self.f, self.A_in, b, warm=warm,
                                 warm_act=warm_act),
                       settings or {"max_iter": 2000})
        if res.status == "infeasible":
            return np.zeros((self.N + 1, self.n)), np.zeros((self.N, self.m)), res
        q = res.x
        z = np.array([self.Phi[i] @ q[:self.n] + self.Gam[i] @ q[self.n:]
                      for i in range(self.N + 1)])
        u_blocks = q[self.n:].reshape(self.nb, self.m)
        v = np.repeat(u_blocks, self.hold, axis=0)
        return z, v, res

    def warm_from_plan(self, z0: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Decision vector for a given initial state and base-step inputs."""
        blocks = v.reshape(self.nb, self.hold, self.m).mean(axis=1)
        return np.concatenate([z0, blocks.ravel()])


# --------------------------------------------------------------------------
# planner layer


def ancillary_rollout(sys: LipschitzSystem, gain: np.ndarray,
                      z_traj: np.ndarray, v_traj: np.ndarray,
                      anchor: np.ndarray, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Roll the planner's error-feedback law on the disturbance-free model.

    x+ = A x + g(x) + B (v_i + K (x - z_i)) from x0 = anchor.  The rollout is
    the tracker's warm start and stays inside the planner tube whenever the
    tube's invariance certificate holds and g stays inside the disturbance
    set used for the tube design.
    """
    n, m = sys.n, sys.m
    xs = np.zeros((steps + 1, n))
    us = np.zeros((steps, m))
    xs[0] = anchor
    for i in range(steps):
        e = xs[i] - z_traj[i]
        us[i] = v_traj[i] + gain @ e
        xs[i + 1] = sys.f_nominal(xs[i], us[i])
    return xs, us


def parent_solve(sys: LipschitzSystem, cfg: LayerConfig,
                 builder: CondensedLinearMpc, z_child_pred: np.ndarray,
                 k: int, warm: np.ndarray | None = None,
                 tube_refs: np.ndarray | None = None,
                 rollout_steps: int | None = None,
                 warm_act: np.ndarray | None = None) -> ParentState:
    """One planner solve anchored at the layer below's predicted nominal state."""
    z, v, res = builder.solve(z_child_pred, warm=warm, tube_refs=tube_refs,
                              warm_act=warm_act)
    if res.status == "infeasible":
        st = ParentState(z_traj=z, v_traj=v, x_virtual=z, u_virtual=v,
                         solved_at=k, feasible=False)
        return st
    steps = cfg.horizon if rollout_steps is None else rollout_steps
    xs, us = ancillary_rollout(sys, cfg.tube.gain, z, v, z_child_pred, steps)
    st = ParentState(z_traj=z, v_traj=v, x_virtual=xs, u_virtual=us,
                     solved_at=k, feasible=True, objective=res.objective)
    st.act = res.act
    return st


def schedule_parent(parent: ParentState, cfg: LayerConfig,
                    child_horizon: int) -> str:
    """reuse_shifted | resolve, per the update-period schedule."""
    if cfg.update_period <= 1 or parent.age + 1 >= cfg.update_period:
        return "resolve"
    if parent.age + 1 + child_horizon > cfg.horizon:
        raise AssertionError("shifted planner trajectory exhausted")
    return "reuse_shifted"


# --------------------------------------------------------------------------
# tracker (child) problem


def build_child_nlp(sys: LipschitzSystem, cfg: LayerConfig,
                    parent_cfg: LayerConfig, z_par: np.ndarray,
                    v_par: np.ndarray, x_roll: np.ndarray,
                    u_roll: np.ndarray, x: np.ndarray) -> NlpProblem:
    """Multiple-shooting tracker problem constrained to the planner tube.

    Decisions: [z_0..z_N, dv_0..dv_{N-1}].  The tracker input is
    v_i = u_roll_i + dv_i where u_roll is the planner rollout law, and the
    increment bound keeps v_par_i + dv_i inside the planner's tightened
    input set.  Warm start: z = rollout states, dv = 0.
    """
    n, m, N = sys.n, sys.m, cfg.horizon
    EP = parent_cfg.tube.cross_section
    EC = cfg.tube.cross_section
    VP = parent_cfg.tightened_input
    t = cfg.target_offset
    nz = (N + 1) * n
    nq = nz + N * m

    H = np.zeros((nq, nq))
    f = np.zeros(nq)
    for i in range(N + 1):
        Wt = cfg.Q if i < N else cfg.P_term
        sl = slice(i * n, (i + 1) * n)
        H[sl, sl] = 2.0 * Wt
        f[sl.start:sl.stop] = -2.0 * Wt @ t
    for i in range(N):
        sl = slice(nz + i * m, nz + (i + 1) * m)
        H[sl, sl] = 2.0 * cfg.R
        f[sl.start:sl.stop] = 2.0 * cfg.R @ u_roll[i]

    rows, offs = [], []
    # anchor: x - z0 in EC
    Ra = np.zeros((EC.normals.shape[0], nq))
    Ra[:, :n] = -EC.normals
    rows.append(Ra)
    offs.append(EC.offsets - EC.normals @ x)
    # stage tubes: z_j - z_par_j in EP for j = 0..N
    for j in range(N + 1):
        Rj = np.zeros((EP.normals.shape[0], nq))
        Rj[:, j * n:(j + 1) * n] = EP.normals
        rows.append(Rj)
        offs.append(EP.offsets + EP.normals @ z_par[j])
    # increments: v_par_i + dv_i in VP
    for i in range(N):
        Ri = np.zeros((VP.normals.shape[0], nq))
        Ri[:, nz + i * m:nz + (i + 1) * m] = VP.normals
        rows.append(Ri)
        offs.append(VP.offsets - VP.normals @ v_par[i])
    A_in = np.vstack(rows)
    b_in = np.concatenate(offs)

    A_sys, B_sys = sys.A, sys.B

    def eq_constraints(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = q[:nz].reshape(N + 1, n)
        dv = q[nz:].reshape(N, m)
        c = np.zeros(N * n)
        J = np.zeros((N * n, nq))
        for i in range(N):
            vi = u_roll[i] + dv[i]
            gi = sys.g_eval(z[i])
            c[i * n:(i + 1) * n] = z[i + 1] - (A_sys @ z[i] + gi + B_sys @ vi)
            J[i * n:(i + 1) * n, (i + 1) * n:(i + 2) * n] = np.eye(n)
            J[i * n:(i + 1) * n, i * n:(i + 1) * n] = -(A_sys + sys.g_jac_eval(z[i]))
            J[i * n:(i + 1) * n, nz + i * m:nz + (i + 1) * m] = -B_sys
        return c, J

    def eq_correction(q: np.ndarray, c: np.ndarray) -> np.ndarray:
        # cascade state corrections zeroing the linearized defects, dv fixed
        z = q[:nz].reshape(N + 1, n)
        p = np.zeros(nq)
        dz = np.zeros(n)
        for i in range(N):
            dz = (A_sys + sys.g_jac_eval(z[i])) @ dz - c[i * n:(i + 1) * n]
            p[(i + 1) * n:(i + 2) * n] = dz
        return p

    warm = np.concatenate([x_roll[:N + 1].ravel(), np.zeros(N * m)])
    return NlpProblem(decision_dim=nq, H=H, f=f, eq_constraints=eq_constraints,
                      ineq_A=A_in, ineq_b=b_in, warm=warm,
                      eq_correction=eq_correction)


def child_solve(sys: LipschitzSystem, cfg: LayerConfig, parent_cfg: LayerConfig,
                z_par: np.ndarray, v_par: np.ndarray, x_roll: np.ndarray,
                u_roll: np.ndarray, x: np.ndarray,
                settings: dict | None = None,
                nlp: NlpProblem | None = None) -> ChildState:
    if nlp is None:
        nlp = build_child_nlp(sys, cfg, parent_cfg, z_par, v_par, x_roll,
                              u_roll, x)
    res: NlpResult = solve_sqp(nlp, settings)
    n, m, N = sys.n, sys.m, cfg.horizon
    nz = (N + 1) * n
    if res.status == "infeasible":
        raise ControllerError(
            "tracker warm start infeasible: planner protocol violated")
    z = res.x[:nz].reshape(N + 1, n)
    dv = res.x[nz:].reshape(N, m)
    v = u_roll[:N] + dv
    st = ChildState(z_traj=z, v_traj=v, dv_traj=dv, feasible=True,
                    objective=res.objective, warm_objective=res._warm_objective)
    st.act = res.act
    return st


def warm_start_violation(nlp: NlpProblem) -> float:
    """Max violation of every tracker constraint at the planner warm start."""
    q = nlp.warm
    c, _ = nlp.eq_constraints(q)
    v = float(np.max(np.abs(c))) if c.size else 0.0
    if nlp.ineq_A.shape[0]:
        v = max(v, float(np.max(nlp.ineq_A @ q - nlp.ineq_b)))
    return v


# --------------------------------------------------------------------------
# ancillary law, phase predicates


def ancillary_child_input(sys: LipschitzSystem, cfg: LayerConfig,
                          child: ChildState, x: np.ndarray) -> np.ndarray:
    """Disturbance-rejecting input keeping x inside the tracker tube."""
    z0 = child.z_traj[0]
    v0 = child.v_traj[0]
    u = v0 + cfg.tube.gain @ (x - z0)
    if cfg.ancillary == "cancel" and sys.g is not None:
        # cancel the model nonlinearity through the actuated channels
        diff = sys.g_eval(z0) - sys.g_eval(x)
        u = u + np.linalg.pinv(sys.B) @ diff
    # clip to the actual input set (axis-aligned U)
    n_u = sys.m
    lo = np.array([-sys.U.support(-e) for e in np.eye(n_u)])
    hi = np.array([sys.U.support(e) for e in np.eye(n_u)])
    return np.clip(u, lo, hi)


def check_phase_switch(child: ChildState | np.ndarray, EP: Polytope,
                       tol: float = 1e-9) -> bool:
    """True iff the tracker's current nominal state lies in the untranslated tube."""
    z = child.z_traj[0] if isinstance(child, ChildState) else np.asarray(child)
    return EP.contains(z, tol)


_REINIT_CACHE: dict = {}


def check_parent_reinit(x: np.ndarray, ZC_N: Polytope, EC: Polytope) -> bool:
    """True iff x left the tracker-recoverable region ZC_N (+) EC."""
    key = (id(ZC_N), id(EC))
    hit = _REINIT_CACHE.get(key)
    if hit is None or hit[0] is not ZC_N or hit[1] is not EC:
        hit = (ZC_N, EC, minkowski_sum(ZC_N, EC))
        _REINIT_CACHE[key] = hit
    return not hit[2].contains(x, 1e-9)


def project_onto(target: Polytope, x: np.ndarray) -> tuple[np.ndarray, float]:
    """Euclidean projection of x onto a polytope, with the moved distance."""
    x = np.asarray(x, dtype=float)
    if target.contains(x, 1e-9):
        return x, 0.0
    n = x.size
    res = solve_qp(QpProblem(H=2.0 * np.eye(n), f=-2.0 * x,
                             A_in=target.normals, b_in=target.offsets))
    return res.x, float(np.linalg.norm(res.x - x))


# --------------------------------------------------------------------------
# supervisor


@dataclass
class LayerRuntime:
    cfg: LayerConfig
    builder_top: CondensedLinearMpc
    builder_inner: CondensedLinearMpc | None = None
    state: ParentState | None = None


@dataclass
class StepRecord:
    u: np.ndarray
    z_child: np.ndarray
    z_parent: np.ndarray
    phase: str
    feasible: bool
    solve_time_child_us: int = 0
    solve_time_parent_us: int = 0
    warm_violation: float = np.nan
    child_cost: float = np.nan
    child_warm_cost: float = np.nan
    switch: bool = False
    reinit: bool = False


class Supervisor:
    """Owns all controller state; one control step is a sequential pipeline.

    parents[0] is the top layer (terminal constraint active); lower planner
    layers run with stage-tube constraints from the layer above until the
    layer above is discarded.  The tracker runs below the lowest active
    planner; after the final switch a conventional short-horizon tube MPC
    (the secondary controller) takes over.
    """

    def __init__(self, sys: LipschitzSystem, parent_cfgs: list[LayerConfig],
                 child_cfg: LayerConfig, secondary: "LinearTubeMpc",
                 reinit_region: Polytope, sqp_settings: dict | None = None):
        self.sys = sys
        self.child_cfg = child_cfg
        self.secondary = secondary
        self.reinit_region = reinit_region
        self.sqp_settings = sqp_settings or {}
        self.phase = PHASE_PRIMARY
        self.prev_child: ChildState | None = None
        self.switch_step: int | None = None
        self.k = 0
        self._last_projection = 0.0
        self._validate_stack(sys, parent_cfgs, child_cfg)
        self.layers: list[LayerRuntime] = []
        below_h = child_cfg.horizon
        for depth in range(len(parent_cfgs) - 1, -1, -1):
            cfg = parent_cfgs[depth]
            if cfg.update_period >= cfg.horizon - below_h:
                raise ControllerError(
                    "update_period must be < horizon - child_horizon")
            below_h = cfg.horizon
        for depth, cfg in enumerate(parent_cfgs):
            anchor = cfg.tube.cross_section
            builder_top = CondensedLinearMpc(sys.A, sys.B, cfg, anchor)
            builder_inner = None
            if depth > 0:
                stage = parent_cfgs[depth - 1].tube.cross_section
                inner_cfg = LayerConfig(
                    horizon=cfg.horizon, Q=cfg.Q, R=cfg.R, P_term=cfg.P_term,
                    tube=cfg.tube, tightened_state=cfg.tightened_state,
                    tightened_input=cfg.tightened_input, terminal_set=None,
                    input_hold=cfg.input_hold, update_period=cfg.update_period,
                    target_offset=cfg.target_offset, ancillary=cfg.ancillary)
                builder_inner = CondensedLinearMpc(sys.A, sys.B, inner_cfg,
                                                   anchor, stage_tube=stage)
            self.layers.append(LayerRuntime(cfg=cfg, builder_top=builder_top,
                                            builder_inner=builder_inner))
        self.active_top = 0          # layers[active_top:] still running

    @staticmethod
    def _validate_stack(sys, parent_cfgs, child_cfg):
        total = child_cfg.tube.cross_section
        for cfg in parent_cfgs:
            total = minkowski_sum(total, cfg.tube.cross_section)
        if not total.subset_of(sys.X, 1e-7):
            raise ControllerError(
                "tube Minkowski sum exceeds the admissible state set")

    # -- internals -----------------------------------------------------------

    def _anchor_below(self, depth: int) -> np.ndarray:
        """Predicted nominal state of the layer below `depth` at the current step."""
        if depth == len(self.layers) - 1:
            if self.prev_child is None:
                anchor, dist = project_onto(
                    self.layers[-1].cfg.tightened_state, self._x_now)
                self._last_projection = dist
                return anchor
            return self.prev_child.z_traj[1]
        below = self.layers[depth + 1].state
        return below.z_traj[below.age + 1]

    def _solve_layer(self, depth: int) -> int:
        layer = self.layers[depth]
        anchor = self._anchor_below(depth)
        builder = layer.builder_top
        tube_refs = None
        if depth > self.active_top and layer.builder_inner is not None:
            builder = layer.builder_inner
            above = self.layers[depth - 1].state
            a = above.age
            tube_refs = above.z_traj[a:a + layer.cfg.horizon + 1]
        warm = None
        warm_act = None
        if layer.state is not None and layer.state.feasible:
            shift = layer.state.age + 1
            v_prev = layer.state.v_traj
            if shift + layer.cfg.horizon <= len(v_prev):
                vs = v_prev[shift:shift + layer.cfg.horizon]
            else:
                pad = shift + layer.cfg.horizon - len(v_prev)
                vs = np.vstack([v_prev[shift:], np.zeros((pad, self.sys.m))])
            warm = builder.warm_from_plan(anchor, vs)
            warm_act = layer.state.act
        t0 = time.perf_counter_ns()
        st = parent_solve(self.sys, layer.cfg, builder, anchor, self.k,
                          warm=warm, tube_refs=tube_refs, warm_act=warm_act)
        dt = (time.perf_counter_ns() - t0) // 1000
        layer.state = st
        return int(dt)

    def _parent_slices(self):
        """Planner data aligned to the current absolute step for the tracker."""
        layer = self.layers[-1]
        st = layer.state
        a = st.age
        N = self.child_cfg.horizon
        z_par = st.z_traj[a:a + N + 1]
        v_par = st.v_traj[a:a + N]
        anchor = self._anchor_below(len(self.layers) - 1)
        x_roll, u_roll = ancillary_rollout(
            self.sys, layer.cfg.tube.gain, z_par, v_par, anchor, N)
        return z_par, v_par, x_roll, u_roll

    # -- main step -----------------------------------------------------------

    def step(self, x: np.ndarray) -> StepRecord:
        self._x_now = np.asarray(x, dtype=float)
        if self.phase == PHASE_SECONDARY:
            reinit = check_parent_reinit(
                self._x_now, self.reinit_region,
                self.child_cfg.tube.cross_section)
            if reinit:
                self.phase = PHASE_PRIMARY
                self.prev_child = None
                for layer in self.layers:
                    layer.state = None
                self.active_top = 0
                rec = self._primary_step()
                rec.reinit = True
                self.k += 1
                return rec
            rec = self._secondary_step()
            self.k += 1
            return rec
        rec = self._primary_step()
        self.k += 1
        return rec

    def _primary_step(self) -> StepRecord:
        t_par = 0
        for depth in range(self.active_top, len(self.layers)):
            layer = self.layers[depth]
            if layer.state is None or not layer.state.feasible:
                t_par += self._solve_layer(depth)
            else:
                action = schedule_parent(layer.state, layer.cfg,
                                         self.child_cfg.horizon
                                         if depth == len(self.layers) - 1
                                         else self.layers[depth + 1].cfg.horizon)
                if action == "resolve":
                    t_par += self._solve_layer(depth)
                else:
                    layer.state.age += 1
        bottom = self.layers[-1].state
        if not bottom.feasible:
            return StepRecord(u=np.zeros(self.sys.m),
                              z_child=np.full(self.sys.n, np.nan),
                              z_parent=bottom.z_traj[0], phase=self.phase,
                              feasible=False, solve_time_parent_us=t_par)

        t0 = time.perf_counter_ns()
        z_par, v_par, x_roll, u_roll = self._parent_slices()
        nlp = build_child_nlp(self.sys, self.child_cfg, self.layers[-1].cfg,
                              z_par, v_par, x_roll, u_roll, self._x_now)
        wv = warm_start_violation(nlp)
        if self.prev_child is not None and self.prev_child.act is not None:
            nlp.warm_act = self.prev_child.act
        child = child_solve(self.sys, self.child_cfg, self.layers[-1].cfg,
                            z_par, v_par, x_roll, u_roll, self._x_now,
                            self.sqp_settings, nlp=nlp)
        t_child = int((time.perf_counter_ns() - t0) // 1000)
        u = ancillary_child_input(self.sys, self.child_cfg, child, self._x_now)
        self.prev_child = child

        # cascade of layer discards: a layer is dropped once the nominal of
        # the layer below enters its untranslated tube cross section
        switched = False
        while self.active_top < len(self.layers):
            top = self.layers[self.active_top]
            below_state = (child.z_traj[0]
                           if self.active_top == len(self.layers) - 1
                           else self.layers[self.active_top + 1]
                           .state.z_traj[self.layers[self.active_top + 1].state.age])
            if check_phase_switch(np.asarray(below_state),
                                  top.cfg.tube.cross_section):
                self.active_top += 1
                if self.active_top == len(self.layers):
                    self.phase = PHASE_SECONDARY
                    self.switch_step = self.k
                    switched = True
                else:
                    # the new top regains its terminal constraint: force a
                    # fresh solve chain at the next step
                    for layer in self.layers[self.active_top:]:
                        layer.state = None
            else:
                break

        return StepRecord(u=u, z_child=child.z_traj[0].copy(),
                          z_parent=self.layers[-1].state.z_traj[
                              self.layers[-1].state.age].copy(),
                          phase=PHASE_PRIMARY, feasible=True,
                          solve_time_child_us=t_child,
                          solve_time_parent_us=t_par,
                          warm_violation=wv, child_cost=child.objective,
                          child_warm_cost=child.warm_objective,
                          switch=switched)

    def _secondary_step(self) -> StepRecord:
        t0 = time.perf_counter_ns()
        try:
            z, v, feasible = self.secondary.step(self._x_now)
        except InfeasibleError:
            return StepRecord(u=np.zeros(self.sys.m),
                              z_child=np.full(self.sys.n, np.nan),
                              z_parent=np.zeros(self.sys.n),
                              phase=PHASE_SECONDARY, feasible=False)
        t_child = int((time.perf_counter_ns() - t0) // 1000)
        plan = ChildState(z_traj=z, v_traj=v, dv_traj=np.zeros_like(v))
        u = ancillary_child_input(self.sys, self.secondary.cfg, plan, self._x_now)
        self.prev_child = plan
        return StepRecord(u=u, z_child=z[0].copy(),
                          z_parent=np.zeros(self.sys.n),
                          phase=PHASE_SECONDARY, feasible=True,
                          solve_time_child_us=t_child)


# --------------------------------------------------------------------------
# conventional tube MPC (linear condensed or nonlinear SQP)


class LinearTubeMpc:
    """Conventional tube MPC with terminal constraint, condensed linear QP."""

    def __init__(self, sys: LipschitzSystem, cfg: LayerConfig):
        if sys.g is not None:
            raise ControllerError("LinearTubeMpc requires linear dynamics")
        if cfg.terminal_set is None:
            raise ControllerError("tube MPC keeps its terminal constraint")
        self.sys = sys
        self.cfg = cfg
        self.builder = CondensedLinearMpc(sys.A, sys.B, cfg,
                                          cfg.tube.cross_section)
        self.prev: tuple[np.ndarray, np.ndarray] | None = None

    def reset(self):
        self.prev = None

    def step(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
        warm = None
        if self.prev is not None:
            z_prev, v_prev = self.prev
            # shift and append the terminal feedback step
            gain = self.cfg.tube.gain
            t = self.cfg.target_offset
            v_app = gain @ (z_prev[-1] - t)
            vs = np.vstack([v_prev[1:], v_app[None, :]])
            warm = self.builder.warm_from_plan(z_prev[1], vs)
        z, v, res = self.builder.solve(np.asarray(x, dtype=float), warm=warm)
        if res.status == "infeasible":
            raise InfeasibleError(
                f"tube MPC infeasible (max violation {res.max_violation:.3g})")
        self.prev = (z, v)
        return z, v, True


class NonlinearTubeMpc:
    """Conventional tube MPC via multiple-shooting SQP (handles g = 0 too)."""

    def __init__(self, sys: LipschitzSystem, cfg: LayerConfig,
                 sqp_settings: dict | None = None):
        if cfg.terminal_set is None:
            raise ControllerError("tube MPC keeps its terminal constraint")
        self.sys = sys
        self.cfg = cfg
        self.sqp_settings = sqp_settings or {}
        self.prev: tuple[np.ndarray, np.ndarray] | None = None
        self._act: np.ndarray | None = None

    def reset(self):
        self.prev = None
        self._act = None

    def _build(self, x: np.ndarray, warm_z: np.ndarray, warm_v: np.ndarray) -> NlpProblem:
        sys, cfg = self.sys, self.cfg
        n, m, N = sys.n, sys.m, cfg.horizon
        nz = (N + 1) * n
        nq = nz + N * m
        t = cfg.target_offset
        H = np.zeros((nq, nq))
        f = np.zeros(nq)
        for i in range(N + 1):
            Wt = cfg.Q if i < N else cfg.P_term
            sl = slice(i * n, (i + 1) * n)
            H[sl, sl] = 2.0 * Wt
            f[sl.start:sl.stop] = -2.0 * Wt @ t
        for i in range(N):
            sl = slice(nz + i * m, nz + (i + 1) * m)
            H[sl, sl] = 2.0 * cfg.R

        EC = cfg.tube.cross_section
        Xt = cfg.tightened_state
        Vt = cfg.tightened_input
        ZF = cfg.terminal_set
        rows, offs = [], []
        Ra = np.zeros((EC.normals.shape[0], nq))
        Ra[:, :n] = -EC.normals
        rows.append(Ra)
        offs.append(EC.offsets - EC.normals @ x)
        for j in range(1, N + 1):
            Rj = np.zeros((Xt.normals.shape[0], nq))
            Rj[:, j * n:(j + 1) * n] = Xt.normals
            rows.append(Rj)
            offs.append(Xt.offsets.copy())
        RN = np.zeros((ZF.normals.shape[0], nq))
        RN[:, N * n:(N + 1) * n] = ZF.normals
        rows.append(RN)
        offs.append(ZF.offsets.copy())
        for i in range(N):
            Ri = np.zeros((Vt.normals.shape[0], nq))
            Ri[:, nz + i * m:nz + (i + 1) * m] = Vt.normals
            rows.append(Ri)
            offs.append(Vt.offsets.copy())
        A_in = np.vstack(rows)
        b_in = np.concatenate(offs)

        def eq_constraints(q):
            z = q[:nz].reshape(N + 1, n)
            dv = q[nz:].reshape(N, m)
            c = np.zeros(N * n)
            J = np.zeros((N * n, nq))
            for i in range(N):
                gi = sys.g_eval(z[i])
                c[i * n:(i + 1) * n] = z[i + 1] - (sys.A @ z[i] + gi + sys.B @ dv[i])
                J[i * n:(i + 1) * n, (i + 1) * n:(i + 2) * n] = np.eye(n)
                J[i * n:(i + 1) * n, i * n:(i + 1) * n] = -(sys.A + sys.g_jac_eval(z[i]))
                J[i * n:(i + 1) * n, nz + i * m:nz + (i + 1) * m] = -sys.B
            return c, J

        def eq_correction(q, c):
            z = q[:nz].reshape(N + 1, n)
            p = np.zeros(nq)
            dz = np.zeros(n)
            for i in range(N):
                dz = (sys.A + sys.g_jac_eval(z[i])) @ dz - c[i * n:(i + 1) * n]
                p[(i + 1) * n:(i + 2) * n] = dz
            return p

        warm = np.concatenate([warm_z.ravel(), warm_v.ravel()])
        return NlpProblem(decision_dim=nq, H=H, f=f,
                          eq_constraints=eq_constraints, ineq_A=A_in,
                          ineq_b=b_in, warm=warm, eq_correction=eq_correction)

    def _cold_start(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Feasibility-seeking rollout under the saturating cancel law."""
        sys, cfg = self.sys, self.cfg
        N = cfg.horizon
        z = np.zeros((N + 1, sys.n))
        v = np.zeros((N, sys.m))
        z[0] = x
        n_u = sys.m
        lo = np.array([-cfg.tightened_input.support(-e) for e in np.eye(n_u)])
        hi = np.array([cfg.tightened_input.support(e) for e in np.eye(n_u)])
        for i in range(N):
            want = -np.linalg.pinv(sys.B) @ (sys.A @ z[i] + sys.g_eval(z[i]))
            v[i] = np.clip(want, lo, hi)
            z[i + 1] = sys.f_nominal(z[i], v[i])
        return z, v

    def step(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
        sys, cfg = self.sys, self.cfg
        n, m, N = sys.n, sys.m, cfg.horizon
        if self.prev is not None:
            z_prev, v_prev = self.prev
            v_app = cfg.tube.gain @ (z_prev[-1] - cfg.target_offset)
            if cfg.ancillary == "cancel":
                v_app = v_app - np.linalg.pinv(sys.B) @ sys.g_eval(z_prev[-1])
            zs = np.vstack([z_prev[1:], sys.f_nominal(z_prev[-1], v_app)[None, :]])
            vs = np.vstack([v_prev[1:], v_app[None, :]])
        else:
            zs, vs = self._cold_start(np.asarray(x, dtype=float))
        nlp = self._build(np.asarray(x, dtype=float), zs, vs)
        viol = float(np.max(nlp.ineq_A @ nlp.warm - nlp.ineq_b))
        if viol > 1e-8:
            # no feasible warm start available: try a phase-1 assisted solve
            # on the warm trajectory's linearization; report infeasible if
            # the subproblem has no solution
            res = solve_qp(QpProblem(
                H=nlp.H, f=nlp.H @ nlp.warm + nlp.f,
                A_in=nlp.ineq_A, b_in=nlp.ineq_b - nlp.ineq_A @ nlp.warm,
                A_eq=nlp.eq_constraints(nlp.warm)[1],
                b_eq=-nlp.eq_constraints(nlp.warm)[0]))
            if res.status == "infeasible":
                raise InfeasibleError(
                    f"tube MPC infeasible (max violation {res.max_violation:.3g})")
            cand = nlp.warm + res.x
            nlp.warm = cand
            viol2 = float(np.max(nlp.ineq_A @ cand - nlp.ineq_b))
            if viol2 > 1e-8:
                raise InfeasibleError("tube MPC could not recover feasibility")
        nlp.warm_act = self._act
        res = solve_sqp(nlp, self.sqp_settings)
        if res.status == "infeasible":
            raise InfeasibleError("tube MPC SQP reported infeasibility")
        self._act = res.act
        nz = (N + 1) * n
        z = res.x[:nz].reshape(N + 1, n)
        v = res.x[nz:].reshape(N, m)
        self.prev = (z, v)
        return z, v, True


def tmpc_step(sys: LipschitzSystem, cfg: LayerConfig, x: np.ndarray,
              controller: "LinearTubeMpc | NonlinearTubeMpc | None" = None
              ) -> tuple[np.ndarray, ChildState, object]:
    """One conventional tube MPC step; returns (u, plan, controller)."""
    if controller is None:
        controller = (LinearTubeMpc(sys, cfg) if sys.g is None
                      else NonlinearTubeMpc(sys, cfg))
    z, v, _ = controller.step(x)
    plan = ChildState(z_traj=z, v_traj=v, dv_traj=np.zeros_like(v))
    u = ancillary_child_input(sys, cfg, plan, x)
    return u, plan, controller
