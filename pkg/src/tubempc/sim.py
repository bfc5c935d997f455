"""Deterministic seeded closed-loop simulation and run logging."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mpc import (PHASE_PRIMARY, PHASE_SECONDARY, ControllerError,
                  InfeasibleError, LayerConfig, LipschitzSystem, Supervisor,
                  ancillary_child_input, ChildState)
from .polytope import Polytope

CSV_HEADER = ("step,x1,x2,u,zc1,zc2,zp1,zp2,phase,cost_stage,cost_cum,"
              "t_child_us,t_parent_us,feasible")


class SimError(RuntimeError):
    pass


def plant_step(sys: LipschitzSystem, x: np.ndarray, u: np.ndarray,
               w: np.ndarray) -> np.ndarray:
    """x+ = A x + g(x) + B u + w.  Inputs outside U are controller bugs."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if not sys.U.contains(u, 1e-7):
        raise SimError(f"applied input {u} outside the admissible input set")
    return sys.A @ x + sys.g_eval(x) + sys.B @ u + np.asarray(w, dtype=float)


@dataclass
class DisturbanceStream:
    """Seeded disturbance sampler; every sample lies in W."""

    seed: int
    W: Polytope
    mode: str = "uniform_box"        # uniform_box | vertices | zero

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)
        n = self.W.dim
        eye = np.eye(n)
        self._lo = np.array([-self.W.support(-e) for e in eye])
        self._hi = np.array([self.W.support(e) for e in eye])
        if self.mode == "vertices":
            self._verts = self.W.vertices()
            self._idx = 0

    def sample(self) -> np.ndarray:
        if self.mode == "zero":
            return np.zeros(self.W.dim)
        if self.mode == "vertices":
            v = self._verts[self._idx % len(self._verts)]
            self._idx += 1
            return np.array(v, dtype=float)
        for _ in range(1000):
            w = self._rng.uniform(self._lo, self._hi)
            if self.W.contains(w, 1e-12):
                return w
        raise SimError("rejection sampling failed to hit W")


@dataclass
class RunRecord:
    step: int
    x: np.ndarray
    u: np.ndarray
    z_child: np.ndarray
    z_parent: np.ndarray
    phase: str
    cost_stage: float
    cost_cum: float
    t_child_us: int
    t_parent_us: int
    feasible: bool
    warm_violation: float = np.nan
    child_cost: float = np.nan
    child_warm_cost: float = np.nan


@dataclass
class RunLog:
    records: list[RunRecord] = field(default_factory=list)
    seed: int = 0
    config_id: str = ""
    controller_id: str = ""
    status: str = "completed"          # completed | infeasible
    infeasible_step: int | None = None
    switch_step: int | None = None

    @property
    def final_cost(self) -> float:
        return self.records[-1].cost_cum if self.records else 0.0

    def summary(self) -> dict:
        child_ts = [r.t_child_us for r in self.records if r.feasible]
        par_ts = [r.t_parent_us for r in self.records if r.feasible]
        return {
            "final_cost": self.final_cost,
            "switch_step": self.switch_step,
            "mean_t_child_us": float(np.mean(child_ts)) if child_ts else 0.0,
            "mean_t_parent_us": float(np.mean(par_ts)) if par_ts else 0.0,
            "infeasible_step": self.infeasible_step,
        }

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.records:
            zp = r.z_parent if np.all(np.isfinite(r.z_parent)) else np.zeros(2)
            zc = r.z_child if np.all(np.isfinite(r.z_child)) else np.zeros(2)
            lines.append(",".join([
                str(r.step),
                *(f"{v:.17g}" for v in r.x),
                f"{float(np.atleast_1d(r.u)[0]):.17g}",
                *(f"{v:.17g}" for v in zc),
                *(f"{v:.17g}" for v in zp),
                r.phase,
                f"{r.cost_stage:.17g}",
                f"{r.cost_cum:.17g}",
                str(r.t_child_us),
                str(r.t_parent_us),
                "1" if r.feasible else "0",
            ]))
        return "\n".join(lines) + "\n"


def cumulative_cost(log: RunLog, Q, R) -> float:
    """Sum of x'Qx + u'Ru over logged steps; must match the running total."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    total = 0.0
    for r in log.records:
        u = np.atleast_1d(r.u)
        total += float(r.x @ Q @ r.x + u @ R @ u)
    if log.records:
        ref = log.records[-1].cost_cum
        if abs(total - ref) > 1e-9 * max(1.0, abs(ref)):
            raise SimError("cumulative cost mismatch with running total")
    return total


class TmpcRunner:
    """Adapter exposing a conventional tube MPC as a closed-loop controller."""

    def __init__(self, sys: LipschitzSystem, controller):
        self.sys = sys
        self.controller = controller
        self.switch_step = None

    def step(self, x: np.ndarray):
        import time
        from .mpc import StepRecord
        t0 = time.perf_counter_ns()
        z, v, _ = self.controller.step(x)
        dt = int((time.perf_counter_ns() - t0) // 1000)
        plan = ChildState(z_traj=z, v_traj=v, dv_traj=np.zeros_like(v))
        u = ancillary_child_input(self.sys, self.controller.cfg, plan, x)
        return StepRecord(u=u, z_child=z[0].copy(),
                          z_parent=np.zeros(self.sys.n), phase=PHASE_SECONDARY,
                          feasible=True, solve_time_child_us=dt)


def run_closed_loop(sys: LipschitzSystem, supervisor, x0, steps: int,
                    stream: DisturbanceStream, Q=None, R=None,
                    check_invariants: bool = True) -> RunLog:
    """Simulate `steps` control steps; stops early on controller infeasibility."""
    Q = np.eye(sys.n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.eye(sys.m) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    x = np.asarray(x0, dtype=float).copy()
    log = RunLog(seed=stream.seed)
    cum = 0.0
    for k in range(steps):
        try:
            rec = supervisor.step(x)
        except InfeasibleError:
            rec = None
        if rec is None or not rec.feasible:
            log.status = "infeasible"
            log.infeasible_step = k
            break
        u = np.atleast_1d(rec.u)
        stage = float(x @ Q @ x + u @ R @ u)
        cum += stage
        if check_invariants:
            if not sys.X.contains(x, 1e-6):
                raise SimError(f"state {x} left the admissible set at step {k}")
            if not sys.U.contains(u, 1e-7):
                raise SimError(f"input {u} outside the admissible set at step {k}")
        w = stream.sample()
        x_next = plant_step(sys, x, u, w)
        log.records.append(RunRecord(
            step=k, x=x.copy(), u=u.copy(), z_child=rec.z_child,
            z_parent=rec.z_parent, phase=rec.phase, cost_stage=stage,
            cost_cum=cum, t_child_us=rec.solve_time_child_us,
            t_parent_us=rec.solve_time_parent_us, feasible=True,
            warm_violation=getattr(rec, "warm_violation", np.nan),
            child_cost=getattr(rec, "child_cost", np.nan),
            child_warm_cost=getattr(rec, "child_warm_cost", np.nan)))
        x = x_next
    log.switch_step = getattr(supervisor, "switch_step", None)
    return log


def verify_runlog(log: RunLog, sys: LipschitzSystem, EC: Polytope,
                  EP: Polytope, tol: float = 1e-7) -> None:
    """Re-check the per-record membership invariants (on-load validation)."""
    prev_cum = 0.0
    for r in log.records:
        if not sys.X.contains(r.x, 1e-6):
            raise SimError(f"record {r.step}: state outside X")
        if not sys.U.contains(np.atleast_1d(r.u), 1e-7):
            raise SimError(f"record {r.step}: input outside U")
        if abs(r.cost_cum - (prev_cum + r.cost_stage)) > 1e-9 * max(1.0, r.cost_cum):
            raise SimError(f"record {r.step}: cumulative cost not a prefix sum")
        if r.cost_stage < -1e-12:
            raise SimError(f"record {r.step}: negative stage cost")
        if r.t_child_us < 0 or r.t_parent_us < 0:
            raise SimError(f"record {r.step}: negative solve time")
        prev_cum = r.cost_cum
        if np.all(np.isfinite(r.z_child)):
            if not EC.contains(r.x - r.z_child, tol):
                raise SimError(f"record {r.step}: x outside the tracker tube")
            if r.phase == PHASE_PRIMARY and np.all(np.isfinite(r.z_parent)):
                if not EP.contains(r.z_child - r.z_parent, tol):
                    raise SimError(
                        f"record {r.step}: tracker nominal outside planner tube")
