"""On-demand collision avoidance for variable-horizon MPC.

Collisions are predicted from every robot's trajectory computed at the
previous time step. Each predicted violation becomes one linear half-space
row on the current stacked input sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import InvalidParameterError, ShapeError
from .prediction import STATE_DIM, PredictionMatrices, StackedTrajectory, truncate_to


@dataclass(frozen=True)
class Obstacle:
    """Static disc obstacle; its size is folded into ``r_min``."""

    center: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(-1)
        if c.shape != (STATE_DIM,) or not np.all(np.isfinite(c)):
            raise InvalidParameterError(f"obstacle center must be a finite 2-vector, got {self.center!r}")
        object.__setattr__(self, "center", c)


@dataclass(frozen=True)
class CollisionEvent:
    k_c: int          # 1-based step of the earliest predicted violation
    d: float
    b: np.ndarray
    c: float


@dataclass(frozen=True)
class CollisionConstraint:
    """One row ``a_row . U <= b_rhs``."""

    a_row: np.ndarray
    b_rhs: float
    source: tuple     # ("robot", j) or ("obstacle", l)
    k_c: int = 0


def detect_collision(
    pred_i: StackedTrajectory,
    other: Union[StackedTrajectory, Obstacle],
    r_min: float,
) -> Optional[CollisionEvent]:
    """Earliest step at which ``pred_i`` comes closer than ``r_min`` to ``other``.

    Robot-robot comparisons run over the common prefix of both predictions.
    """
    if pred_i.N == 0:
        raise InvalidParameterError("prediction of robot i is empty")
    if isinstance(other, Obstacle):
        mine = pred_i.blocks
        theirs = np.broadcast_to(other.center, mine.shape)
    else:
        if other.N == 0:
            raise InvalidParameterError("prediction of the other robot is empty")
        n_min = min(pred_i.N, other.N)
        mine = truncate_to(pred_i, n_min).blocks
        theirs = truncate_to(other, n_min).blocks

    diff = mine - theirs
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    hits = np.flatnonzero(dist < r_min)
    if hits.size == 0:
        return None
    idx = int(hits[0])
    d = float(dist[idx])
    b = diff[idx].copy()
    c = (r_min * d - d * d) + float(b @ mine[idx])
    return CollisionEvent(k_c=idx + 1, d=d, b=b, c=c)


def build_g(b, k_c: int, N_k: int) -> np.ndarray:
    """Place ``b`` at block ``min(k_c, N_k)`` of a zero ``2 N_k`` vector."""
    b = np.asarray(b, dtype=float)
    if b.shape != (STATE_DIM,):
        raise ShapeError(f"b must have shape (2,), got {b.shape}")
    if k_c < 1 or N_k < 1:
        raise InvalidParameterError(f"k_c and N_k must be >= 1, got {k_c}, {N_k}")
    block = min(k_c, N_k) - 1
    g = np.zeros(STATE_DIM * N_k)
    g[STATE_DIM * block:STATE_DIM * (block + 1)] = b
    return g


def build_constraint(
    g, pm: PredictionMatrices, x_meas, c: float, source: tuple = (), k_c: int = 0
) -> CollisionConstraint:
    """Rewrite ``g . X >= c`` with ``X = F x + Phi U`` as a row on ``U``."""
    g = np.asarray(g, dtype=float)
    x_meas = np.asarray(x_meas, dtype=float)
    if g.shape != (STATE_DIM * pm.N,):
        raise ShapeError(f"g has length {g.size}, expected {STATE_DIM * pm.N}")
    if x_meas.shape != (STATE_DIM,):
        raise ShapeError(f"measured state must have shape (2,), got {x_meas.shape}")
    a_row = -(g @ pm.Phi)
    b_rhs = float(g @ (pm.F @ x_meas)) - c
    return CollisionConstraint(a_row=a_row, b_rhs=b_rhs, source=source, k_c=k_c)


def vodca_step(
    robot_id: int,
    all_prev_predictions: Union[Sequence[StackedTrajectory], Mapping[int, StackedTrajectory]],
    obstacles: Sequence[Obstacle],
    pm_k: PredictionMatrices,
    x_meas,
    r_min: float,
) -> list[CollisionConstraint]:
    """All collision rows for robot ``robot_id`` at the current step.

    ``all_prev_predictions`` must be the snapshot taken at the previous step;
    it is only read.
    """
    if isinstance(all_prev_predictions, Mapping):
        items = sorted(all_prev_predictions.items())
    else:
        items = list(enumerate(all_prev_predictions))
    preds = dict(items)
    pred_i = preds[robot_id]

    sources: list[tuple[tuple, Union[StackedTrajectory, Obstacle]]] = [
        (("robot", j), pred_j) for j, pred_j in items if j != robot_id
    ]
    sources += [(("obstacle", l), ob) for l, ob in enumerate(obstacles)]

    constraints = []
    for tag, other in sources:
        event = detect_collision(pred_i, other, r_min)
        if event is None:
            continue
        # the row acts one step after the observed collision: block k_c of the new plan
        g = build_g(event.b, event.k_c, pm_k.N)
        constraints.append(build_constraint(g, pm_k, x_meas, event.c, source=tag, k_c=event.k_c))
    return constraints
