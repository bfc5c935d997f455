"""Hierarchical tube-based MPC toolkit.

Long-horizon linear planner layers generate robust positive invariant tubes
that become stage-wise constraints for a short-horizon nonlinear tracking
MPC, removing the tracker's terminal constraint while keeping recursive
feasibility.  Includes the polytope algebra, offline set design, dense QP /
SQP solvers and the closed-loop simulation harness used by the bundled case
presets.
"""

from .polytope import Box, Polytope, PolytopeError
from .setcalc import (DesignError, TerminalDesign, TubeDesign,
                      controllable_set_n, levelset_polytope,
                      max_control_invariant, rpi_outer, solve_dare,
                      solve_dlyap)

__all__ = [
    "Box", "Polytope", "PolytopeError",
    "DesignError", "TerminalDesign", "TubeDesign",
    "controllable_set_n", "levelset_polytope", "max_control_invariant",
    "rpi_outer", "solve_dare", "solve_dlyap",
]

__version__ = "0.1.0"
