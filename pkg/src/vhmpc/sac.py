"""Soft Actor-Critic agent that picks one prediction horizon per robot.

A single policy sees the measured positions of all robots and emits a
tanh-squashed Gaussian action per robot; actions are mapped to integer
horizons only inside the environment, so gradients see the raw action.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError
from .prediction import N_MAX

log = logging.getLogger(__name__)

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
EPS_TANH = 1e-6
# tanh rounds to exactly 1.0 beyond |u| ~ 19; keep actions strictly inside (-1, 1)
A_MAX = float(np.nextafter(1.0, 0.0))
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

AGENT_MAGIC = b"VHMPC-AG"
AGENT_FORMAT_VERSION = 1


# ------------------------------------------------------------------- reward

@dataclass(frozen=True)
class RewardConfig:
    lambda_h: float = 0.001
    e_bar: float = 0.1
    K: int = 350
    progress_bonus: float = 25.0
    progress_gain: float = 250.0
    collision_base: float = 100.0
    terminal_bonus: float = 150.0
    repeat_terminal: bool = False


def reward_terms(prev_errors, errors, horizons, collisions, k, arrived_first_time, cfg: RewardConfig) -> dict:
    """Per-robot reward components plus the horizon-variance penalty."""
    prev_errors = np.asarray(prev_errors, dtype=float)
    errors = np.asarray(errors, dtype=float)
    horizons = np.asarray(horizons, dtype=float)
    collisions = np.asarray(collisions, dtype=bool)
    arrived_first_time = np.asarray(arrived_first_time, dtype=bool)
    n = errors.size
    if not (prev_errors.size == horizons.size == collisions.size == arrived_first_time.size == n):
        raise ShapeError("reward inputs must all have one entry per robot")

    delta = prev_errors - errors
    progress = np.where(delta >= 0, cfg.progress_bonus + cfg.progress_gain * delta, cfg.progress_gain * delta)
    horizon_cost = cfg.lambda_h * horizons
    collision = np.where(collisions, cfg.collision_base + (cfg.K - k), 0.0)
    reached = (errors < cfg.e_bar) if cfg.repeat_terminal else arrived_first_time
    terminal = np.where(reached, cfg.terminal_bonus, 0.0)
    variance = float(np.var(horizons)) if n else 0.0
    return {
        "progress": progress,
        "horizon": horizon_cost,
        "collision": collision,
        "terminal": terminal,
        "variance": variance,
    }


def compute_reward(prev_states, states, goals, horizons, collisions, k, K, arrived_first_time,
                   cfg: Optional[RewardConfig] = None) -> float:
    """Scalar step reward from positions before and after the step.

    ``states`` and ``goals`` are ``(R, 2)`` arrays; ``K`` overrides ``cfg.K``.
    """
    cfg = replace(cfg or RewardConfig(), K=K)
    goals = np.asarray(goals, dtype=float).reshape(-1, 2)
    prev_err = np.linalg.norm(goals - np.asarray(prev_states, dtype=float).reshape(-1, 2), axis=1)
    err = np.linalg.norm(goals - np.asarray(states, dtype=float).reshape(-1, 2), axis=1)
    return reward_from_errors(prev_err, err, horizons, collisions, k, arrived_first_time, cfg)


def reward_from_errors(prev_errors, errors, horizons, collisions, k, arrived_first_time,
                       cfg: RewardConfig) -> float:
    t = reward_terms(prev_errors, errors, horizons, collisions, k, arrived_first_time, cfg)
    per_robot = t["progress"] - t["horizon"] - t["collision"] + t["terminal"]
    return float(np.sum(per_robot) - t["variance"])


# -------------------------------------------------------------- action maps

def action_to_horizons(a, n_max: int = N_MAX) -> list[int]:
    """Scale ``[-1, 1]`` to ``[1, n_max]`` and round up."""
    a = np.clip(np.asarray(a, dtype=float).reshape(-1), -1.0, 1.0)
    scaled = 1.0 + (a + 1.0) / 2.0 * (n_max - 1)
    return [int(v) for v in np.clip(np.ceil(scaled), 1, n_max)]


# ------------------------------------------------------------------- policy

def policy_head(policy: nn.Mlp, states):
    """Mean and clamped log-std for a batch of states, plus the forward cache."""
    out, cache = nn.forward(policy, np.atleast_2d(states))
    n = out.shape[1] // 2
    mu = out[:, :n]
    raw = out[:, n:]
    return mu, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), raw, cache


def squash(mu, log_std, z):
    """Reparameterized tanh-Gaussian sample and its log-density."""
    std = np.exp(log_std)
    u = mu + std * z
    a = np.clip(np.tanh(u), -A_MAX, A_MAX)
    log_prob = np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI - np.log(1.0 - a * a + EPS_TANH), axis=-1)
    return a, log_prob


def sample_action(policy: nn.Mlp, s, rng: np.random.Generator):
    """Sample ``a = tanh(mu + sigma z)`` for one state; returns ``(a, log_prob)``."""
    s = np.asarray(s, dtype=float)
    mu, log_std, _, _ = policy_head(policy, s)
    z = rng.standard_normal(mu.shape)
    a, lp = squash(mu, log_std, z)
    if s.ndim == 1:
        return a[0], float(lp[0])
    return a, lp


# ------------------------------------------------------------------- replay

@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, obs_dim))
        self.a = np.zeros((self.capacity, act_dim))
        self.r = np.zeros(self.capacity)
        self.s2 = np.zeros((self.capacity, obs_dim))
        self.done = np.zeros(self.capacity)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, t: Transition) -> None:
        if np.any(np.abs(t.a) > 1.0):
            raise ShapeError("actions must lie in [-1, 1]")
        i = self._next
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = t.s, t.a, t.r, t.s2, float(t.done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions, need {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        return {"s": self.s[idx], "a": self.a[idx], "r": self.r[idx], "s2": self.s2[idx], "done": self.done[idx]}


# -------------------------------------------------------------------- agent

@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    init_alpha: float = 1.0
    auto_alpha: bool = True
    target_entropy: Optional[float] = None     # None -> -n_robots
    batch_size: int = 256
    buffer_capacity: int = 100_000
    warmup_steps: int = 1000
    updates_per_step: int = 1
    hidden: int = 256
    obs_scale: float = 0.04
    reward_scale: float = 1.0
    n_max: int = N_MAX

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0 < self.tau <= 1:
            raise ConfigError("tau must lie in (0, 1]")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class SacAgent:
    def __init__(self, n_robots: int, cfg: SacConfig = SacConfig(), seed: int = 0, obs_dim: Optional[int] = None):
        self.n_robots = int(n_robots)
        self.obs_dim = int(obs_dim) if obs_dim is not None else 2 * self.n_robots
        self.act_dim = self.n_robots
        self.cfg = cfg
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        hd = cfg.hidden
        self.policy = nn.init_mlp([self.obs_dim, hd, hd, 2 * self.act_dim], self.rng, final_scale=1e-2)
        self.q1 = nn.init_mlp([self.obs_dim + self.act_dim, hd, hd, 1], self.rng)
        self.q2 = nn.init_mlp([self.obs_dim + self.act_dim, hd, hd, 1], self.rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_alpha = math.log(cfg.init_alpha)
        self.target_entropy = -float(self.n_robots) if cfg.target_entropy is None else float(cfg.target_entropy)
        self.opt = {
            name: nn.AdamState.for_params(getattr(self, name).params(), lr=cfg.lr)
            for name in ("policy", "q1", "q2")
        }
        self.alpha_opt = nn.AdamState.for_params([np.zeros(1)], lr=cfg.lr)
        self.episodes = 0
        self.updates = 0

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def scaled(self, states):
        return np.asarray(states, dtype=float) * self.cfg.obs_scale

    # acting ---------------------------------------------------------------
    def act(self, s) -> tuple[np.ndarray, float]:
        return sample_action(self.policy, self.scaled(s), self.rng)

    def deterministic_action(self, s) -> np.ndarray:
        mu, _, _, _ = policy_head(self.policy, self.scaled(s))
        return np.clip(np.tanh(mu[0]), -A_MAX, A_MAX)

    def deterministic_horizons(self, s) -> list[int]:
        return action_to_horizons(self.deterministic_action(s), self.cfg.n_max)

    # losses ---------------------------------------------------------------
    def _q_input(self, S, A):
        return np.concatenate([self.scaled(S), A], axis=1)

    def critic_targets(self, batch, z_next) -> np.ndarray:
        mu, ls, _, _ = policy_head(self.policy, self.scaled(batch["s2"]))
        a2, lp2 = squash(mu, ls, z_next)
        X2 = self._q_input(batch["s2"], a2)
        q_next = np.minimum(self.q1_target(X2)[:, 0], self.q2_target(X2)[:, 0])
        soft = q_next - self.alpha * lp2
        r = self.cfg.reward_scale * batch["r"]
        return r + self.cfg.gamma * (1.0 - batch["done"]) * soft

    def critic_loss_and_grads(self, net: nn.Mlp, batch, y):
        X = self._q_input(batch["s"], batch["a"])
        q, cache = nn.forward(net, X)
        err = q[:, 0] - y
        loss = float(np.mean(err * err))
        grads, _ = nn.backward(net, cache, (2.0 / len(y)) * err[:, None])
        return loss, grads

    def actor_loss(self, states, z, alpha: Optional[float] = None, policy: Optional[nn.Mlp] = None) -> dict:
        """Actor objective on a frozen batch and frozen noise.

        Returns the loss, its split into entropy bonus and Q term, and the
        intermediates needed for the gradient.
        """
        alpha = self.alpha if alpha is None else alpha
        policy = policy or self.policy
        mu, ls, raw, pcache = policy_head(policy, self.scaled(states))
        a, lp = squash(mu, ls, z)
        X = self._q_input(states, a)
        q1, c1 = nn.forward(self.q1, X)
        q2, c2 = nn.forward(self.q2, X)
        use_q1 = q1[:, 0] <= q2[:, 0]
        qmin = np.where(use_q1, q1[:, 0], q2[:, 0])
        bonus = -alpha * float(np.mean(lp))
        q_term = -float(np.mean(qmin))
        return {
            "loss": alpha * float(np.mean(lp)) + q_term,
            "entropy_bonus": bonus,
            "q_term": q_term,
            "log_prob": lp,
            "_ctx": (mu, ls, raw, pcache, a, z, c1, c2, use_q1, alpha),
        }

    def actor_grads(self, states, z, alpha: Optional[float] = None, policy: Optional[nn.Mlp] = None):
        policy = policy or self.policy
        res = self.actor_loss(states, z, alpha, policy)
        mu, ls, raw, pcache, a, z, c1, c2, use_q1, alpha = res["_ctx"]
        B = mu.shape[0]
        n = self.act_dim
        ones = np.ones((B, 1)) / B
        _, gx1 = nn.backward(self.q1, c1, -ones * use_q1[:, None])
        _, gx2 = nn.backward(self.q2, c2, -ones * (~use_q1)[:, None])
        dq_da = (gx1 + gx2)[:, -n:]

        one_m_a2 = 1.0 - a * a
        dlp_du = 2.0 * a * one_m_a2 / (one_m_a2 + EPS_TANH)
        dL_du = (alpha / B) * dlp_du + dq_da * one_m_a2
        dL_dmu = dL_du
        inside = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
        dL_dls = (dL_du * np.exp(ls) * z - alpha / B) * inside
        grads, _ = nn.backward(policy, pcache, np.concatenate([dL_dmu, dL_dls], axis=1))
        return res["loss"], grads, res["log_prob"]

    # training step --------------------------------------------------------
    def update(self, buffer: ReplayBuffer) -> Optional[dict]:
        cfg = self.cfg
        if len(buffer) < cfg.batch_size:
            log.warning("replay buffer holds %d < %d transitions; skipping update", len(buffer), cfg.batch_size)
            return None
        batch = buffer.sample(cfg.batch_size, self.rng)
        z_next = self.rng.standard_normal((cfg.batch_size, self.act_dim))
        y = self.critic_targets(batch, z_next)

        report = {}
        for name in ("q1", "q2"):
            net = getattr(self, name)
            loss, grads = self.critic_loss_and_grads(net, batch, y)
            new_params, self.opt[name] = nn.adam_step(net.params(), grads, self.opt[name])
            net.set_params(new_params)
            report[f"{name}_loss"] = loss

        z = self.rng.standard_normal((cfg.batch_size, self.act_dim))
        a_loss, grads, lp = self.actor_grads(batch["s"], z)
        new_params, self.opt["policy"] = nn.adam_step(self.policy.params(), grads, self.opt["policy"])
        self.policy.set_params(new_params)
        report["actor_loss"] = a_loss
        report["entropy"] = -float(np.mean(lp))

        if cfg.auto_alpha:
            gap = float(np.mean(lp)) + self.target_entropy
            report["alpha_loss"] = -self.alpha * gap
            g = np.array([-self.alpha * gap])
            (new_la,), self.alpha_opt = nn.adam_step([np.array([self.log_alpha])], [g], self.alpha_opt)
            self.log_alpha = float(new_la[0])
        report["alpha"] = self.alpha

        nn.soft_update(self.q1_target, self.q1, cfg.tau)
        nn.soft_update(self.q2_target, self.q2, cfg.tau)
        self.updates += 1
        return report

    # persistence ----------------------------------------------------------
    def _blocks(self) -> dict:
        blocks = {
            "policy": self.policy,
            "q1": self.q1,
            "q2": self.q2,
            "q1_target": self.q1_target,
            "q2_target": self.q2_target,
        }
        for name, st in self.opt.items():
            template = getattr(self, name)
            m, v = template.zeros_like(), template.zeros_like()
            m.set_params(st.m)
            v.set_params(st.v)
            blocks[f"{name}_adam_m"] = m
            blocks[f"{name}_adam_v"] = v
        return blocks

    def manifest(self) -> dict:
        return {
            "format": AGENT_FORMAT_VERSION,
            "n_robots": self.n_robots,
            "obs_dim": self.obs_dim,
            "config": asdict(self.cfg),
            "config_hash": self.cfg.digest(),
            "episodes": self.episodes,
            "updates": self.updates,
            "seed": self.seed,
            "log_alpha": self.log_alpha,
            "alpha_adam": {"m": float(self.alpha_opt.m[0][0]), "v": float(self.alpha_opt.v[0][0]),
                           "step": self.alpha_opt.step},
            "adam_steps": {k: v.step for k, v in self.opt.items()},
            "rng_state": self.rng.bit_generator.state,
        }

    def to_bytes(self) -> bytes:
        manifest = json.dumps(self.manifest(), sort_keys=True).encode()
        parts = [AGENT_MAGIC, struct.pack("<II", AGENT_FORMAT_VERSION, len(manifest)), manifest]
        blocks = self._blocks()
        parts.append(struct.pack("<I", len(blocks)))
        for name, net in blocks.items():
            blob = nn.mlp_to_bytes(net)
            key = name.encode()
            parts.append(struct.pack("<I", len(key)) + key + struct.pack("<I", len(blob)) + blob)
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "SacAgent":
        try:
            return cls._parse(data)
        except ConfigError:
            raise
        except (struct.error, KeyError, ValueError, TypeError, UnicodeDecodeError, ShapeError) as exc:
            raise ConfigError(f"corrupt agent checkpoint: {exc}") from exc

    @classmethod
    def _parse(cls, data: bytes) -> "SacAgent":
        if data[:len(AGENT_MAGIC)] != AGENT_MAGIC:
            raise ConfigError("bad magic: not an agent checkpoint")
        off = len(AGENT_MAGIC)
        version, mlen = struct.unpack_from("<II", data, off)
        off += 8
        if version != AGENT_FORMAT_VERSION:
            raise ConfigError(f"unsupported agent format version {version}")
        manifest = json.loads(data[off:off + mlen].decode())
        off += mlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        blocks = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + klen].decode()
            off += klen
            (blen,) = struct.unpack_from("<I", data, off)
            off += 4
            net, end = nn.mlp_from_bytes(data[off:off + blen])
            if end != blen:
                raise ConfigError(f"block {name} has trailing bytes")
            blocks[name] = net
            off += blen
        if off != len(data):
            raise ConfigError("trailing bytes after agent checkpoint")

        cfg = SacConfig(**manifest["config"])
        if cfg.digest() != manifest["config_hash"]:
            raise ConfigError("config hash mismatch in agent checkpoint")
        agent = cls(manifest["n_robots"], cfg, seed=manifest["seed"], obs_dim=manifest["obs_dim"])
        for name in ("policy", "q1", "q2", "q1_target", "q2_target"):
            getattr(agent, name).set_params(blocks[name].params())
        for name in ("policy", "q1", "q2"):
            st = agent.opt[name]
            st.m = [p.copy() for p in blocks[f"{name}_adam_m"].params()]
            st.v = [p.copy() for p in blocks[f"{name}_adam_v"].params()]
            st.step = int(manifest["adam_steps"][name])
        aa = manifest["alpha_adam"]
        agent.alpha_opt = nn.AdamState([np.array([aa["m"]])], [np.array([aa["v"]])], int(aa["step"]), lr=cfg.lr)
        agent.log_alpha = float(manifest["log_alpha"])
        agent.episodes = int(manifest["episodes"])
        agent.updates = int(manifest["updates"])
        agent.rng.bit_generator.state = manifest["rng_state"]
        return agent


def load_agent(path) -> SacAgent:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    return SacAgent.from_bytes(data)


# ----------------------------------------------------------------- training

LOG_COLUMNS = ("episode", "return", "path_cost", "collisions", "steps", "mean_horizon")


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in LOG_COLUMNS])
        return buf.getvalue()


def train(env, agent: SacAgent, episodes: int, seed: Optional[int] = None) -> TrainingLog:
    """Online SAC training against ``env``.

    ``env`` needs ``reset() -> obs``, ``step(horizons) -> (outcome, records)``
    (see :class:`vhmpc.sim.MultiRobotEnv`) and attributes ``n_robots``,
    ``path_cost``. During the first ``warmup_steps`` environment steps actions
    are drawn uniformly and no gradient updates happen.
    """
    if env.n_robots != agent.n_robots:
        raise ConfigError(f"agent controls {agent.n_robots} robots, environment has {env.n_robots}")
    out = TrainingLog()
    if episodes <= 0:
        return out
    if seed is not None:
        agent.rng = np.random.default_rng(seed)
    cfg = agent.cfg
    buffer = getattr(agent, "buffer", None)
    if buffer is None:
        buffer = agent.buffer = ReplayBuffer(cfg.buffer_capacity, agent.obs_dim, agent.act_dim)
    total = getattr(agent, "env_steps", 0)
    for _ in range(episodes):
        obs = env.reset()
        ep_return, collisions, steps, horizon_sum = 0.0, 0, 0, 0
        done = False
        while not done:
            if total < cfg.warmup_steps:
                a = agent.rng.uniform(-1.0, 1.0, agent.act_dim)
            else:
                a, _ = agent.act(obs)
            horizons = action_to_horizons(a, cfg.n_max)
            outcome, _ = env.step(horizons)
            buffer.add(Transition(obs, a, outcome.reward, outcome.obs, outcome.terminated))
            obs = outcome.obs
            done = outcome.done
            total += 1
            steps += 1
            ep_return += outcome.reward
            collisions += int(np.sum(outcome.info["collisions"]))
            horizon_sum += sum(horizons)
            if total >= cfg.warmup_steps:
                for _ in range(cfg.updates_per_step):
                    if len(buffer) >= cfg.batch_size:
                        agent.update(buffer)
        agent.episodes += 1
        out.rows.append({
            "episode": agent.episodes,
            "return": float(ep_return),
            "path_cost": float(env.path_cost),
            "collisions": collisions,
            "steps": steps,
            "mean_horizon": float(horizon_sum / max(steps * agent.n_robots, 1)),
        })
    agent.env_steps = total
    return out
