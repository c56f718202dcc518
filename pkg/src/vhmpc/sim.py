"""Deterministic multi-robot episode runner and metrics.

A step of the environment reads the predictions every robot produced at the
previous step (an immutable snapshot), builds the collision rows for each
robot, solves each robot's MPC and then applies the first inputs.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import sac
from .errors import ConfigError, VhmpcError
from .mpc import DesiredTrajectory, MpcConfig, mpc_step
from .prediction import N_MAX, StackedTrajectory, build_model, build_prediction_matrices
from .vodca import Obstacle, vodca_step

log = logging.getLogger(__name__)

TERM_ARRIVED = "all-arrived"
TERM_TIMEOUT = "timeout"
TERM_COLLISION = "collision"


@dataclass(frozen=True)
class SimParams:
    """Task parameters; defaults are the published two-robot values."""

    h: float = 0.2
    q: float = 5.0
    w: float = 10.0
    r_min: float = 1.5
    ub: float = 1.5
    lb: float = -1.5
    K: int = 350
    lambda_h: float = 0.001
    e_bar: float = 0.1
    N_max: int = N_MAX

    def mpc_config(self) -> MpcConfig:
        return MpcConfig(q_weight=self.q, w_weight=self.w, h=self.h, lb=self.lb, ub=self.ub, r_min=self.r_min)


@dataclass(frozen=True)
class Scenario:
    starts: np.ndarray          # (R, 2)
    goals: np.ndarray           # (R, 2)
    obstacles: tuple = ()
    params: SimParams = SimParams()
    horizon_mode: dict = field(default_factory=lambda: {"fixed": 20})
    seed: int = 0
    terminate_on_collision: bool = True
    name: str = ""

    @property
    def n_robots(self) -> int:
        return len(self.starts)

    def validate(self) -> "Scenario":
        starts = np.asarray(self.starts, dtype=float)
        goals = np.asarray(self.goals, dtype=float)
        if starts.ndim != 2 or starts.shape[1] != 2 or starts.shape != goals.shape or len(starts) == 0:
            raise ConfigError("robots need matching 2-D start and goal positions")
        if not (np.all(np.isfinite(starts)) and np.all(np.isfinite(goals))):
            raise ConfigError("robot positions must be finite")
        p = self.params
        if p.K < 1:
            raise ConfigError("K must be >= 1")
        if not 1 <= p.N_max <= N_MAX:
            raise ConfigError(f"N_max must lie in [1, {N_MAX}]")
        for i in range(len(starts)):
            for j in range(i + 1, len(starts)):
                if np.linalg.norm(starts[i] - starts[j]) < p.r_min:
                    raise ConfigError(f"robots {i} and {j} start closer than r_min")
        mode = self.horizon_mode
        if not isinstance(mode, dict) or len(mode) != 1 or next(iter(mode)) not in ("fixed", "policy"):
            raise ConfigError("horizon_mode must be {'fixed': N} or {'policy': path}")
        if "fixed" in mode:
            N = mode["fixed"]
            if isinstance(N, bool) or not isinstance(N, int) or not 1 <= N <= p.N_max:
                raise ConfigError(f"fixed horizon must be an integer in [1, {p.N_max}]")
        return self

    def with_fixed_horizon(self, N: int) -> "Scenario":
        return replace(self, horizon_mode={"fixed": int(N)}).validate()

    def with_policy(self, path) -> "Scenario":
        return replace(self, horizon_mode={"policy": str(path)}).validate()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "robots": [{"start": list(map(float, s)), "goal": list(map(float, g))}
                       for s, g in zip(self.starts, self.goals)],
            "obstacles": [{"center": list(map(float, o.center))} for o in self.obstacles],
            "params": asdict(self.params),
            "horizon_mode": dict(self.horizon_mode),
            "seed": self.seed,
            "terminate_on_collision": self.terminate_on_collision,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        try:
            robots = data["robots"]
            starts = np.array([r["start"] for r in robots], dtype=float)
            goals = np.array([r["goal"] for r in robots], dtype=float)
            obstacles = tuple(Obstacle(o["center"]) for o in data.get("obstacles", []))
            raw = dict(data.get("params", {}))
            known = SimParams.__dataclass_fields__
            unknown = set(raw) - set(known)
            if unknown:
                raise ConfigError(f"unknown params: {sorted(unknown)}")
            for key in ("K", "N_max"):
                if key in raw:
                    raw[key] = _as_int(raw[key], key)
            params = SimParams(**{k: (v if k in ("K", "N_max") else float(v)) for k, v in raw.items()})
            sc = cls(
                starts=starts,
                goals=goals,
                obstacles=obstacles,
                params=params,
                horizon_mode=dict(data.get("horizon_mode", {"fixed": 20})),
                seed=_as_int(data.get("seed", 0), "seed"),
                terminate_on_collision=bool(data.get("terminate_on_collision", True)),
                name=str(data.get("name", "")),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError, VhmpcError) as exc:
            raise ConfigError(f"malformed scenario: {exc}") from exc
        return sc.validate()


def _as_int(value, key):
    if isinstance(value, bool) or not float(value).is_integer():
        raise ConfigError(f"{key} must be an integer")
    return int(value)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("scenario root must be a JSON object")
    return Scenario.from_dict(data)


@dataclass(frozen=True)
class StepRecord:
    step: int
    robot_id: int
    x: float
    y: float
    ux: float
    uy: float
    horizon: int
    active_constraints: int


@dataclass
class Metrics:
    path_cost: float = 0.0
    constraint_activations: int = 0
    completion_time: float = 0.0
    min_pairwise_distance: float = math.inf
    min_obstacle_distance: float = math.inf
    wall_time: float = 0.0


@dataclass
class EpisodeResult:
    records: list
    metrics: Metrics
    termination: str
    steps: int
    final_positions: np.ndarray
    fallbacks: int = 0
    horizons: list = field(default_factory=list)   # per step, list of per-robot horizons

    @property
    def completed(self) -> bool:
        return self.termination == TERM_ARRIVED

    def metrics_dict(self) -> dict:
        """Deterministic summary; wall-clock time is deliberately left out."""
        m = self.metrics
        return {
            "termination": self.termination,
            "completed": self.completed,
            "steps": self.steps,
            "path_cost": m.path_cost,
            "constraint_activations": m.constraint_activations,
            "completion_time": m.completion_time,
            "min_pairwise_distance": _json_float(m.min_pairwise_distance),
            "min_obstacle_distance": _json_float(m.min_obstacle_distance),
            "qp_fallbacks": self.fallbacks,
            "final_positions": [[float(v) for v in p] for p in self.final_positions],
        }


def _json_float(v: float):
    return None if math.isinf(v) else float(v)


@dataclass
class StepOutcome:
    obs: np.ndarray
    reward: float
    done: bool
    terminated: bool        # true terminal (arrival or collision), not a timeout
    info: dict


def _pairwise_min(pos: np.ndarray) -> float:
    if len(pos) < 2:
        return math.inf
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    iu = np.triu_indices(len(pos), 1)
    return float(np.min(dist[iu]))


def _obstacle_min(pos: np.ndarray, centers: np.ndarray) -> float:
    if len(centers) == 0:
        return math.inf
    diff = pos[:, None, :] - centers[None, :, :]
    return float(np.min(np.sqrt(np.sum(diff * diff, axis=-1))))


class MultiRobotEnv:
    """Closed-loop MPC + VODCA environment; the action is one horizon per robot."""

    def __init__(self, scenario: Scenario, reward_cfg: Optional[sac.RewardConfig] = None):
        self.scenario = scenario.validate()
        p = scenario.params
        self.params = p
        self.cfg = p.mpc_config()
        self.model = build_model(p.h)
        self.goals = np.asarray(scenario.goals, dtype=float)
        self.obstacles = tuple(scenario.obstacles)
        self._centers = np.array([o.center for o in self.obstacles]).reshape(-1, 2)
        self.reward_cfg = reward_cfg or sac.RewardConfig(lambda_h=p.lambda_h, e_bar=p.e_bar, K=p.K)
        self._pm_cache = {}
        self.reset()

    @property
    def n_robots(self) -> int:
        return len(self.goals)

    @property
    def obs_dim(self) -> int:
        return 2 * self.n_robots

    def matrices(self, N: int):
        pm = self._pm_cache.get(N)
        if pm is None:
            pm = build_prediction_matrices(self.model, N)
            self._pm_cache[N] = pm
        return pm

    def reset(self) -> np.ndarray:
        self.k = 0
        self.positions = np.array(self.scenario.starts, dtype=float)
        self._snapshot: Optional[tuple] = None
        self._warm: list = [None] * self.n_robots
        self.arrived_once = np.zeros(self.n_robots, dtype=bool)
        self.errors = self._errors()
        self.arrived_once |= self.errors < self.params.e_bar
        self.path_cost = 0.0
        self.activations = 0
        self.fallbacks = 0
        self.min_pair = _pairwise_min(self.positions)
        self.min_obs = _obstacle_min(self.positions, self._centers)
        self.collided = False
        return self.observation()

    def observation(self) -> np.ndarray:
        return self.positions.reshape(-1).copy()

    def _errors(self) -> np.ndarray:
        return np.linalg.norm(self.goals - self.positions, axis=1)

    @property
    def all_arrived(self) -> bool:
        return bool(np.all(self.errors < self.params.e_bar))

    @property
    def snapshot(self) -> Optional[tuple]:
        """Predictions produced at the previous step (read-only)."""
        return self._snapshot

    def _collision_flags(self) -> np.ndarray:
        thresh = 0.5 * self.params.r_min
        pos = self.positions
        flags = np.zeros(self.n_robots, dtype=bool)
        if self.n_robots > 1:
            diff = pos[:, None, :] - pos[None, :, :]
            dist = np.sqrt(np.sum(diff * diff, axis=-1))
            np.fill_diagonal(dist, np.inf)
            flags |= np.any(dist < thresh, axis=1)
        if len(self._centers):
            diff = pos[:, None, :] - self._centers[None, :, :]
            flags |= np.any(np.sqrt(np.sum(diff * diff, axis=-1)) < thresh, axis=1)
        return flags

    def step(self, horizons: Sequence[int]):
        """Advance one sampling period with the given per-robot horizons.

        Returns ``(outcome, records)`` where ``records`` are this step's
        :class:`StepRecord` rows.
        """
        horizons = [int(N) for N in horizons]
        if len(horizons) != self.n_robots:
            raise ConfigError(f"expected {self.n_robots} horizons, got {len(horizons)}")
        for N in horizons:
            if not 1 <= N <= self.params.N_max:
                raise ConfigError(f"horizon {N} outside [1, {self.params.N_max}]")

        if self._snapshot is None:
            # no history yet: treat everyone as holding position
            self._snapshot = tuple(
                StackedTrajectory.hold(x, N) for x, N in zip(self.positions, horizons)
            )
        snapshot = self._snapshot
        cfg = self.cfg

        new_predictions = []
        inputs = np.zeros_like(self.positions)
        records = []
        for i in range(self.n_robots):
            pm = self.matrices(horizons[i])
            x_i = self.positions[i]
            rows = vodca_step(i, snapshot, self.obstacles, pm, x_i, cfg.r_min)
            res = mpc_step(i, pm, x_i, DesiredTrajectory(self.goals[i]), rows, cfg, self._warm[i])
            self._warm[i] = _shifted_warm_start(res, pm.N)
            new_predictions.append(res.predicted)
            inputs[i] = res.u0
            self.activations += len(rows)
            self.fallbacks += int(res.fallback)
            records.append(StepRecord(
                self.k, i, float(x_i[0]), float(x_i[1]), float(res.u0[0]), float(res.u0[1]),
                horizons[i], len(rows),
            ))

        prev_errors = self.errors
        prev_positions = self.positions
        self.positions = prev_positions + self.params.h * inputs
        self._snapshot = tuple(new_predictions)
        self.k += 1

        self.path_cost += float(np.sum(np.linalg.norm(self.positions - prev_positions, axis=1)))
        self.min_pair = min(self.min_pair, _pairwise_min(self.positions))
        self.min_obs = min(self.min_obs, _obstacle_min(self.positions, self._centers))
        self.errors = self._errors()
        first_arrival = (self.errors < self.params.e_bar) & ~self.arrived_once
        self.arrived_once |= first_arrival
        collisions = self._collision_flags()
        self.collided |= bool(np.any(collisions))

        reward = sac.reward_from_errors(prev_errors, self.errors, horizons, collisions,
                                        self.k, first_arrival, self.reward_cfg)

        collided_stop = bool(np.any(collisions)) and self.scenario.terminate_on_collision
        terminated = self.all_arrived or collided_stop
        done = terminated or self.k >= self.params.K
        info = {"collisions": collisions, "first_arrival": first_arrival, "inputs": inputs}
        return StepOutcome(self.observation(), reward, done, terminated, info), records


def _shifted_warm_start(res, N):
    # valid only for an unchanged horizon; the solver ignores mismatched sizes
    if res.u_sequence is None:
        return None
    U = res.u_sequence
    shifted = np.concatenate([U[2:], U[-2:]]) if N > 1 else U.copy()
    return (shifted, None)


HorizonProvider = Callable[[np.ndarray], Sequence[int]]


def fixed_horizon(N: int, n_robots: int) -> HorizonProvider:
    return lambda obs: [N] * n_robots


def horizon_provider(scenario: Scenario) -> HorizonProvider:
    mode = scenario.horizon_mode
    if "fixed" in mode:
        return fixed_horizon(mode["fixed"], scenario.n_robots)
    agent = sac.load_agent(mode["policy"])
    if agent.n_robots != scenario.n_robots:
        raise ConfigError(
            f"policy was trained for {agent.n_robots} robots, scenario has {scenario.n_robots}"
        )
    return agent.deterministic_horizons


def run_episode(sc: Scenario, provider: Optional[HorizonProvider] = None) -> EpisodeResult:
    env = MultiRobotEnv(sc)
    provider = provider or horizon_provider(sc)
    obs = env.reset()
    records: list[StepRecord] = []
    horizon_log = []
    t0 = time.perf_counter()
    termination = TERM_TIMEOUT
    while True:
        if env.all_arrived:
            termination = TERM_ARRIVED
            break
        if env.collided and sc.terminate_on_collision:
            termination = TERM_COLLISION
            break
        if env.k >= sc.params.K:
            termination = TERM_TIMEOUT
            break
        horizons = list(provider(obs))
        outcome, rows = env.step(horizons)
        obs = outcome.obs
        records.extend(rows)
        horizon_log.append(horizons)
    wall = time.perf_counter() - t0
    if env.collided and termination == TERM_ARRIVED:
        termination = TERM_COLLISION if sc.terminate_on_collision else termination

    metrics = Metrics(
        path_cost=env.path_cost,
        constraint_activations=env.activations,
        completion_time=env.k * sc.params.h,
        min_pairwise_distance=env.min_pair,
        min_obstacle_distance=env.min_obs,
        wall_time=wall,
    )
    return EpisodeResult(records, metrics, termination, env.k, env.positions.copy(),
                         env.fallbacks, horizon_log)


def count_activations(result: EpisodeResult) -> int:
    return sum(r.active_constraints for r in result.records)


def safety_ok(result: EpisodeResult, r_min: float) -> bool:
    limit = 0.5 * r_min
    return result.metrics.min_pairwise_distance >= limit and result.metrics.min_obstacle_distance >= limit


# ---------------------------------------------------------------- comparison

COMPARE_COLUMNS = ("label", "horizon", "completed", "termination", "path_cost",
                   "constraint_activations", "completion_time", "steps", "min_pairwise_distance")


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    horizon: str
    result: EpisodeResult

    def as_dict(self) -> dict:
        m = self.result.metrics
        return {
            "label": self.label,
            "horizon": self.horizon,
            "completed": self.result.completed,
            "termination": self.result.termination,
            "path_cost": m.path_cost,
            "constraint_activations": m.constraint_activations,
            "completion_time": m.completion_time,
            "steps": self.result.steps,
            "min_pairwise_distance": _json_float(m.min_pairwise_distance),
        }


def compare(scenario: Scenario, horizons: Sequence[int], policy_checkpoint=None) -> list[ComparisonRow]:
    """Run the scenario under each fixed horizon and, optionally, a trained policy."""
    rows = []
    for N in horizons:
        res = run_episode(scenario.with_fixed_horizon(N))
        rows.append(ComparisonRow(f"FH{N}", str(N), res))
    if policy_checkpoint is not None:
        res = run_episode(scenario.with_policy(policy_checkpoint))
        rows.append(ComparisonRow("RL", "variable", res))
    return rows


# ------------------------------------------------------------------ exports

TRAJECTORY_COLUMNS = ("step", "robot_id", "x", "y", "ux", "uy", "horizon", "active_constraints")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def trajectory_csv(result: EpisodeResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for r in result.records:
        w.writerow([_fmt(getattr(r, c)) for c in TRAJECTORY_COLUMNS])
    return buf.getvalue()


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for row in rows:
        d = row.as_dict()
        w.writerow([_fmt(d[c]) for c in COMPARE_COLUMNS])
    return buf.getvalue()


def metrics_json(result: EpisodeResult) -> str:
    return json.dumps(result.metrics_dict(), indent=2, sort_keys=True) + "\n"
