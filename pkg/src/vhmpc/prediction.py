"""Single-integrator robot model and stacked horizon prediction.

Positions are 2-vectors; a stacked trajectory of ``N`` steps is a flat
``2N`` vector ``[x_1, y_1, x_2, y_2, ...]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidHorizonError,
    InvalidParameterError,
    InvalidTruncationError,
    ShapeError,
)

N_MAX = 49
STATE_DIM = 2


@dataclass(frozen=True)
class ModelParams:
    """Discrete-time model ``x[k+1] = A x[k] + B u[k]``."""

    h: float
    A: np.ndarray = field(repr=False)
    B: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class PredictionMatrices:
    N: int
    F: np.ndarray = field(repr=False)
    Phi: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class StackedTrajectory:
    """A ``2N`` stacked sequence of positions (or inputs)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size % STATE_DIM:
            raise ShapeError(f"stacked length {v.size} is not a multiple of {STATE_DIM}")
        object.__setattr__(self, "values", v)

    @property
    def N(self) -> int:
        return self.values.size // STATE_DIM

    @property
    def blocks(self) -> np.ndarray:
        """View of the trajectory as an ``(N, 2)`` array."""
        return self.values.reshape(self.N, STATE_DIM)

    @classmethod
    def from_blocks(cls, blocks) -> "StackedTrajectory":
        return cls(np.asarray(blocks, dtype=float).reshape(-1))

    @classmethod
    def hold(cls, position, N: int) -> "StackedTrajectory":
        """``position`` repeated ``N`` times."""
        return cls(np.tile(np.asarray(position, dtype=float), N))


def build_model(h: float) -> ModelParams:
    if not np.isfinite(h) or h <= 0:
        raise InvalidParameterError(f"sampling time must be positive, got {h!r}")
    h = float(h)
    return ModelParams(h=h, A=np.eye(STATE_DIM), B=h * np.eye(STATE_DIM))


def general_model(A, B, h: float = 1.0) -> ModelParams:
    """Model with arbitrary 2x2 ``A``, ``B``; used to exercise the matrix builder."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != (STATE_DIM, STATE_DIM) or B.shape != (STATE_DIM, STATE_DIM):
        raise ShapeError("A and B must be 2x2")
    return ModelParams(h=float(h), A=A, B=B)


def check_horizon(N: int, n_max: int = N_MAX) -> int:
    if isinstance(N, bool) or int(N) != N or not 1 <= N <= n_max:
        raise InvalidHorizonError(f"horizon must be an integer in [1, {n_max}], got {N!r}")
    return int(N)


def build_prediction_matrices(model: ModelParams, N: int) -> PredictionMatrices:
    """Stack the model over ``N`` steps so that ``X = F x0 + Phi U``."""
    N = check_horizon(N)
    d = STATE_DIM
    powers = [np.eye(d)]
    for _ in range(N):
        powers.append(model.A @ powers[-1])

    F = np.vstack(powers[1:])
    Phi = np.zeros((d * N, d * N))
    for r in range(N):
        for c in range(r + 1):
            Phi[d * r:d * (r + 1), d * c:d * (c + 1)] = powers[r - c] @ model.B
    return PredictionMatrices(N=N, F=F, Phi=Phi)


def propagate(pm: PredictionMatrices, x0, U: StackedTrajectory) -> StackedTrajectory:
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (STATE_DIM,):
        raise ShapeError(f"initial state must have shape (2,), got {x0.shape}")
    if U.N != pm.N:
        raise ShapeError(f"input sequence has {U.N} steps, matrices expect {pm.N}")
    return StackedTrajectory(pm.F @ x0 + pm.Phi @ U.values)


def rollout(model: ModelParams, x0, U: StackedTrajectory) -> StackedTrajectory:
    """Step-by-step application of the model; reference for :func:`propagate`."""
    x = np.asarray(x0, dtype=float)
    out = []
    for u in U.blocks:
        x = model.A @ x + model.B @ u
        out.append(x)
    return StackedTrajectory.from_blocks(out)


def truncate_to(traj: StackedTrajectory, N_new: int) -> StackedTrajectory:
    if N_new > traj.N or N_new < 0:
        raise InvalidTruncationError(f"cannot truncate a {traj.N}-step trajectory to {N_new}")
    return StackedTrajectory(traj.values[:STATE_DIM * N_new].copy())
