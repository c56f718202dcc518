"""Per-robot MPC: cost assembly, constraint stacking and the receding-horizon step."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import qp as qpmod
from .errors import InvalidParameterError, ShapeError
from .prediction import STATE_DIM, PredictionMatrices, StackedTrajectory
from .vodca import CollisionConstraint

log = logging.getLogger(__name__)

SLACK_L1 = 1e4
SLACK_L2 = 1e2


@dataclass(frozen=True)
class MpcConfig:
    """Scalar weights ``Q = q I``, ``W = w I`` plus input bounds and safety radius."""

    q_weight: float = 5.0
    w_weight: float = 10.0
    h: float = 0.2
    lb: float = -1.5
    ub: float = 1.5
    r_min: float = 1.5
    qp_tol: float = qpmod.DEFAULT_TOL
    qp_max_iter: int = qpmod.DEFAULT_MAX_ITER

    def __post_init__(self):
        if self.q_weight < 0:
            raise InvalidParameterError("q_weight must be >= 0")
        if self.w_weight <= 0:
            raise InvalidParameterError("w_weight must be > 0")
        if not self.lb < self.ub:
            raise InvalidParameterError("lb must be < ub")
        if self.h <= 0 or self.r_min <= 0:
            raise InvalidParameterError("h and r_min must be positive")


@dataclass(frozen=True)
class DesiredTrajectory:
    goal: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float).reshape(STATE_DIM))

    def stacked(self, N: int) -> np.ndarray:
        return np.tile(self.goal, N)


@dataclass(frozen=True)
class MpcStepResult:
    u0: np.ndarray
    predicted: StackedTrajectory
    n_constraints_active: int
    qp_status: qpmod.QpStatus
    fallback: bool = False
    u_sequence: np.ndarray = field(default=None, repr=False)
    multipliers: np.ndarray = field(default=None, repr=False)


def build_cost(pm: PredictionMatrices, x_meas, goal: DesiredTrajectory, cfg: MpcConfig):
    """Return ``(H, f)`` such that ``U'HU/2 + f'U`` equals the tracking cost up to a constant."""
    x_meas = np.asarray(x_meas, dtype=float)
    if x_meas.shape != (STATE_DIM,):
        raise ShapeError(f"measured state must have shape (2,), got {x_meas.shape}")
    Phi, F = pm.Phi, pm.F
    err = goal.stacked(pm.N) - F @ x_meas
    H = 2.0 * (cfg.q_weight * (Phi.T @ Phi) + cfg.w_weight * np.eye(Phi.shape[1]))
    H = 0.5 * (H + H.T)
    f = -2.0 * cfg.q_weight * (Phi.T @ err)
    return H, f


def assemble_inequalities(
    collision: Sequence[CollisionConstraint], pm: PredictionMatrices, cfg: MpcConfig
):
    """Stack collision rows over ``-U <= -lb`` and ``U <= ub``."""
    n = STATE_DIM * pm.N
    rows, rhs = [], []
    for con in collision:
        if con.a_row.shape != (n,):
            raise ShapeError(f"collision row has length {con.a_row.size}, expected {n}")
        rows.append(con.a_row)
        rhs.append(con.b_rhs)
    eye = np.eye(n)
    A = np.vstack([np.asarray(rows).reshape(-1, n), -eye, eye])
    b = np.concatenate([np.asarray(rhs, dtype=float), np.full(n, -cfg.lb), np.full(n, cfg.ub)])
    return A, b


def _solve_relaxed(H, f, collision, pm, cfg: MpcConfig) -> qpmod.QpSolution:
    """Keep the bounds hard and the collision rows soft.

    Each row gets a slack ``s >= 0`` priced by ``SLACK_L1 * s + SLACK_L2 * s^2 / 2``,
    so the input that violates the collision rows least is chosen.
    """
    n = H.shape[0]
    m = len(collision)
    A_c = np.vstack([c.a_row for c in collision])
    b_c = np.array([c.b_rhs for c in collision])
    H_s = np.zeros((n + m, n + m))
    H_s[:n, :n] = H
    H_s[n:, n:] = SLACK_L2 * np.eye(m)
    f_s = np.concatenate([f, np.full(m, SLACK_L1)])
    eye = np.eye(n)
    A = np.vstack([
        np.hstack([A_c, -np.eye(m)]),
        np.hstack([np.zeros((m, n)), -np.eye(m)]),
        np.hstack([-eye, np.zeros((n, m))]),
        np.hstack([eye, np.zeros((n, m))]),
    ])
    b = np.concatenate([b_c, np.zeros(m), np.full(n, -cfg.lb), np.full(n, cfg.ub)])
    return qpmod.solve(qpmod.QuadraticProgram(H_s, f_s, A, b), cfg.qp_tol, cfg.qp_max_iter)


def mpc_step(
    robot: int,
    pm: PredictionMatrices,
    x_meas,
    goal: DesiredTrajectory,
    collision_constraints: Sequence[CollisionConstraint],
    cfg: MpcConfig,
    warm_start: Optional[tuple] = None,
) -> MpcStepResult:
    x_meas = np.asarray(x_meas, dtype=float)
    H, f = build_cost(pm, x_meas, goal, cfg)
    A, b = assemble_inequalities(collision_constraints, pm, cfg)
    sol = qpmod.solve(qpmod.QuadraticProgram(H, f, A, b), cfg.qp_tol, cfg.qp_max_iter, warm_start)

    fallback = False
    if not sol.optimal and collision_constraints:
        log.warning(
            "robot %d: QP %s with %d collision rows, relaxing them",
            robot, sol.status.value, len(collision_constraints),
        )
        fallback = True
        sol = _solve_relaxed(H, f, collision_constraints, pm, cfg)
    if not sol.optimal and collision_constraints:
        log.warning("robot %d: relaxed QP %s, solving with bounds only", robot, sol.status.value)
        A, b = assemble_inequalities((), pm, cfg)
        sol = qpmod.solve(qpmod.QuadraticProgram(H, f, A, b), cfg.qp_tol, cfg.qp_max_iter)
    if not sol.optimal:
        log.warning("robot %d: QP ended with status %s", robot, sol.status.value)

    U = sol.u_star[:STATE_DIM * pm.N]
    predicted = StackedTrajectory(pm.F @ x_meas + pm.Phi @ U)
    return MpcStepResult(
        u0=U[:STATE_DIM].copy(),
        predicted=predicted,
        n_constraints_active=len(collision_constraints),
        qp_status=sol.status,
        fallback=fallback,
        u_sequence=U,
        multipliers=None if fallback else sol.multipliers,
    )
