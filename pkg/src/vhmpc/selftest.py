"""Randomized property checks shared by ``vhmpc selftest`` and the acceptance tests.

Each ``check_*`` function returns a dict with a ``worst`` error figure and
the number of cases it ran; :func:`run_selftest` compares them to limits.
"""

from __future__ import annotations

import time

import numpy as np

from . import nn, oracles, qp, sac
from .prediction import N_MAX, StackedTrajectory, build_model, build_prediction_matrices, propagate, rollout
from .vodca import Obstacle, detect_collision, vodca_step


def check_prediction(rng: np.random.Generator, cases: int = 1000) -> dict:
    worst = 0.0
    for _ in range(cases):
        N = int(rng.integers(1, N_MAX + 1))
        model = build_model(float(rng.uniform(0.01, 1.0)))
        x0 = rng.uniform(-50, 50, 2)
        U = StackedTrajectory(rng.uniform(-2, 2, 2 * N))
        fast = propagate(build_prediction_matrices(model, N), x0, U)
        slow = rollout(model, x0, U)
        worst = max(worst, float(np.max(np.abs(fast.values - slow.values))))
    return {"worst": worst, "cases": cases}


def random_qp(rng: np.random.Generator, n_max: int = 4, m_max: int = 6) -> qp.QuadraticProgram:
    """Random strictly convex QP with a non-empty feasible set."""
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(0, m_max + 1))
    M = rng.standard_normal((n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    f = 3.0 * rng.standard_normal(n)
    A = rng.standard_normal((m, n))
    inner = rng.standard_normal(n)
    b = A @ inner + rng.uniform(0.0, 1.0, m)
    return qp.QuadraticProgram(H, f, A, b)


def check_qp(rng: np.random.Generator, cases: int = 200, tol: float = 1e-6) -> dict:
    worst_u = worst_kkt = 0.0
    failures = 0
    for _ in range(cases):
        prob = random_qp(rng)
        sol = qp.solve(prob, tol=tol)
        ref = oracles.enumerate_active_sets(prob.H, prob.f, prob.A_ineq, prob.b_ineq)
        if not sol.optimal or ref is None:
            failures += 1
            continue
        worst_u = max(worst_u, float(np.max(np.abs(sol.u_star - ref[0]))))
        _, rep = qp.kkt_check(prob, sol.u_star, sol.multipliers, tol)
        worst_kkt = max(worst_kkt, rep.primal, rep.dual, rep.stationarity, rep.complementarity)
    return {"worst": worst_u, "worst_kkt": worst_kkt, "failures": failures, "cases": cases}


def check_mlp_gradients(rng: np.random.Generator, cases: int = 50) -> dict:
    worst = 0.0
    for _ in range(cases):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 6))] + [int(rng.integers(2, 9)) for _ in range(depth - 1)] + [int(rng.integers(1, 4))]
        net = nn.init_mlp(sizes, rng)
        for b in net.biases:
            b[:] = 0.1 * rng.standard_normal(b.shape)
        x = rng.standard_normal((3, sizes[0]))
        w = rng.standard_normal((3, sizes[-1]))

        def loss():
            return float(np.sum(w * nn.forward(net, x)[0]))

        _, cache = nn.forward(net, x)
        grads, gx = nn.backward(net, cache, w)
        num = oracles.central_difference(loss, net.params())
        num_x = oracles.central_difference(loss, [x])
        worst = max(worst, oracles.relative_error(grads, num), oracles.relative_error([gx], num_x))
    return {"worst": worst, "cases": cases}


def check_actor_gradient(rng: np.random.Generator, batch: int = 8) -> dict:
    agent = sac.SacAgent(2, sac.SacConfig(hidden=16), seed=int(rng.integers(1 << 31)))
    for W in agent.policy.weights:
        W *= 3.0
    S = rng.uniform(0, 25, (batch, agent.obs_dim))
    z = rng.standard_normal((batch, agent.act_dim))
    _, grads, _ = agent.actor_grads(S, z)
    num = oracles.central_difference(lambda: agent.actor_loss(S, z)["loss"], agent.policy.params())
    return {"worst": oracles.relative_error(grads, num), "cases": 1}


def random_near_collision(rng: np.random.Generator, r_min: float = 1.5):
    """Previous-step predictions for two robots plus an obstacle, built to come close."""
    N_i, N_j = (int(v) for v in rng.integers(1, N_MAX + 1, 2))
    meet = rng.uniform(0, 25, 2)
    k_meet = int(rng.integers(1, min(N_i, N_j) + 1))

    def line_through(N):
        vel = rng.uniform(-0.3, 0.3, 2)
        offset = rng.normal(0, 0.5 * r_min, 2)
        steps = np.arange(1, N + 1)[:, None] - k_meet
        return StackedTrajectory.from_blocks(meet + offset + steps * vel)

    pred_i, pred_j = line_through(N_i), line_through(N_j)
    obstacle = Obstacle(pred_i.blocks[int(rng.integers(0, N_i))] + rng.normal(0, 0.6 * r_min, 2))
    return pred_i, pred_j, obstacle


def check_vodca(rng: np.random.Generator, cases: int = 500, r_min: float = 1.5) -> dict:
    """Algebraic identity, half-space soundness and tangency of emitted rows."""
    model = build_model(0.2)
    worst_identity = worst_tangent = 0.0
    emitted = 0
    unsound = 0
    for _ in range(cases):
        pred_i, pred_j, obstacle = random_near_collision(rng, r_min)
        N_k = int(rng.integers(1, N_MAX + 1))
        pm = build_prediction_matrices(model, N_k)
        x_meas = pred_i.blocks[0] + rng.normal(0, 0.2, 2)
        rows = vodca_step(0, [pred_i, pred_j], [obstacle], pm, x_meas, r_min)
        others = {("robot", 1): pred_j, ("obstacle", 0): obstacle}
        for row in rows:
            emitted += 1
            other = others[row.source]
            event = detect_collision(pred_i, other, r_min)
            block = min(event.k_c, N_k) - 1
            g = np.zeros(2 * N_k)
            g[2 * block:2 * block + 2] = event.b
            for _ in range(4):
                U = rng.uniform(-1.5, 1.5, 2 * N_k)
                X = pm.F @ x_meas + pm.Phi @ U
                lhs = row.a_row @ U - row.b_rhs
                rhs = -(g @ X - event.c)
                worst_identity = max(worst_identity, abs(lhs - rhs))
                if lhs <= 0 and g @ X < event.c - 1e-9:
                    unsound += 1
            # boundary point along b from the other disc centre
            centre = other.center if isinstance(other, Obstacle) else other.blocks[event.k_c - 1]
            touch = centre + r_min * event.b / np.linalg.norm(event.b)
            worst_tangent = max(worst_tangent, abs(float(event.b @ touch) - event.c))
            worst_tangent = max(worst_tangent, abs(float(np.linalg.norm(touch - centre)) - r_min))
    return {
        "worst": float(max(worst_identity, worst_tangent)),
        "identity": float(worst_identity),
        "tangency": float(worst_tangent),
        "emitted": emitted,
        "unsound": unsound,
        "cases": cases,
    }


def run_selftest(seed: int = 0, quick: bool = False, out=print) -> bool:
    scale = 5 if quick else 1
    checks = [
        ("stacked prediction == sequential rollout", lambda r: check_prediction(r, 1000 // scale), 1e-12),
        ("QP solver == active-set enumeration", lambda r: check_qp(r, 200 // scale), 1e-6),
        ("MLP backprop == central differences", lambda r: check_mlp_gradients(r, 50 // scale), 1e-4),
        ("actor-loss gradient == central differences", check_actor_gradient, 1e-3),
        ("collision rows: identity and tangency", lambda r: check_vodca(r, 500 // scale), 1e-9),
    ]
    ok_all = True
    for name, fn, limit in checks:
        t0 = time.perf_counter()
        res = fn(np.random.default_rng(seed))
        ok = res["worst"] <= limit and not res.get("failures") and not res.get("unsound")
        if "worst_kkt" in res:
            ok = ok and res["worst_kkt"] <= limit
        ok_all &= ok
        out(f"[{'PASS' if ok else 'FAIL'}] {name}: worst={res['worst']:.3e} (limit {limit:g}), "
            f"cases={res['cases']}, {time.perf_counter() - t0:.2f}s")
    return ok_all
