import json
import math

import numpy as np
import pytest

from vhmpc import sac, sim
from vhmpc.errors import ConfigError
from vhmpc.prediction import StackedTrajectory
from vhmpc.vodca import Obstacle


def small_scenario(**kw):
    base = dict(
        starts=np.array([[0.0, 0.0], [6.0, 0.3]]),
        goals=np.array([[6.0, 0.0], [0.0, 0.3]]),
        params=sim.SimParams(K=60),
        horizon_mode={"fixed": 10},
    )
    base.update(kw)
    return sim.Scenario(**base).validate()


def test_goal_equals_start_terminates_immediately():
    sc = sim.Scenario(starts=np.array([[3.0, 4.0]]), goals=np.array([[3.0, 4.0]])).validate()
    res = sim.run_episode(sc)
    assert res.completed
    assert res.steps == 0
    assert res.metrics.path_cost == 0.0
    assert res.records == []


def test_completion_time_is_steps_times_h():
    res = sim.run_episode(small_scenario())
    assert res.metrics.completion_time == res.steps * 0.2


def test_head_on_pair_avoids_and_counts_activations():
    res = sim.run_episode(small_scenario())
    assert res.completed
    assert sim.safety_ok(res, 1.5)
    assert res.metrics.constraint_activations == sim.count_activations(res) > 0
    # realized path cost equals summed step lengths
    pos = {}
    for r in res.records:
        pos.setdefault(r.robot_id, []).append((r.x, r.y))
    total = 0.0
    for i, pts in pos.items():
        pts = np.vstack([pts, res.final_positions[i]])
        total += np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1))
    assert res.metrics.path_cost == pytest.approx(total, rel=1e-12)


def test_no_encounters_no_activations():
    sc = small_scenario(starts=np.array([[0.0, 0.0], [0.0, 10.0]]), goals=np.array([[5.0, 0.0], [5.0, 10.0]]))
    res = sim.run_episode(sc)
    assert res.completed
    assert sim.count_activations(res) == 0


def test_count_activations_single_event():
    rec = [sim.StepRecord(0, 0, 0.0, 0.0, 0.0, 0.0, 5, 1), sim.StepRecord(0, 1, 3.0, 0.0, 0.0, 0.0, 5, 0)]
    res = sim.EpisodeResult(rec, sim.Metrics(), sim.TERM_ARRIVED, 1, np.zeros((2, 2)))
    assert sim.count_activations(res) == 1


def test_timeout_reported():
    res = sim.run_episode(small_scenario(params=sim.SimParams(K=5)))
    assert res.termination == sim.TERM_TIMEOUT
    assert not res.completed
    assert res.steps == 5


def test_collision_terminates():
    sc = small_scenario(starts=np.array([[0.0, 0.0]]), goals=np.array([[10.0, 0.0]]),
                        obstacles=(Obstacle([0.3, 0.0]),))
    res = sim.run_episode(sc)
    assert res.termination == sim.TERM_COLLISION
    assert res.steps == 1


def test_episode_is_bit_deterministic():
    a, b = sim.run_episode(small_scenario()), sim.run_episode(small_scenario())
    assert sim.trajectory_csv(a) == sim.trajectory_csv(b)
    assert sim.metrics_json(a) == sim.metrics_json(b)


def test_policy_run_is_deterministic(tmp_path):
    path = tmp_path / "agent.ckpt"
    sac.SacAgent(2, sac.SacConfig(hidden=16), seed=1).save(path)
    sc = small_scenario().with_policy(path)
    a, b = sim.run_episode(sc), sim.run_episode(sc)
    assert sim.trajectory_csv(a) == sim.trajectory_csv(b)
    assert all(1 <= N <= 49 for step in a.horizons for N in step)


def test_policy_robot_count_mismatch(tmp_path):
    path = tmp_path / "agent.ckpt"
    sac.SacAgent(3, sac.SacConfig(hidden=8), seed=1).save(path)
    with pytest.raises(ConfigError):
        sim.run_episode(small_scenario().with_policy(path))


def test_snapshot_discipline(monkeypatch):
    seen = []
    real = sim.vodca_step

    def spy(robot_id, preds, *args, **kw):
        seen.append((robot_id, preds, tuple(p.values.copy() for p in preds)))
        return real(robot_id, preds, *args, **kw)

    monkeypatch.setattr(sim, "vodca_step", spy)
    env = sim.MultiRobotEnv(small_scenario())
    env.reset()
    for k in range(15):
        before = env.snapshot
        seen.clear()
        env.step([10, 7 + (k % 3)])
        assert len(seen) == 2
        snap = seen[0][1]
        assert seen[1][1] is snap          # both robots read the same object
        if k == 0:
            assert before is None
            assert all(np.array_equal(p.blocks, np.tile(x, (p.N, 1)))
                       for p, x in zip(snap, env.scenario.starts))
        else:
            assert snap is before          # the previous step's predictions
        # robot 0's solve did not change what robot 1 reads
        for a, b in zip(seen[0][2], seen[1][2]):
            assert np.array_equal(a, b)
        assert env.snapshot is not snap


def test_env_rejects_bad_horizons():
    env = sim.MultiRobotEnv(small_scenario())
    with pytest.raises(ConfigError):
        env.step([10])
    with pytest.raises(ConfigError):
        env.step([10, 50])


def test_step_outcome_flags_timeout_as_not_terminal():
    env = sim.MultiRobotEnv(small_scenario(params=sim.SimParams(K=2)))
    out, _ = env.step([10, 10])
    assert not out.done
    out, _ = env.step([10, 10])
    assert out.done and not out.terminated


# ----------------------------------------------------------------- scenarios

def test_scenario_round_trip():
    sc = small_scenario(obstacles=(Obstacle([3.0, 5.0]),), name="demo")
    again = sim.Scenario.from_dict(json.loads(json.dumps(sc.to_dict())))
    assert again.to_dict() == sc.to_dict()


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("robots"),
    lambda d: d["robots"][0].update(start=[0.0]),
    lambda d: d["params"].update(bogus=1),
    lambda d: d["params"].update(K=1.5),
    lambda d: d.update(horizon_mode={"fixed": 0}),
    lambda d: d.update(horizon_mode={"fixed": 50}),
    lambda d: d.update(horizon_mode={"random": 3}),
    lambda d: d["robots"][1].update(start=[0.5, 0.0]),
])
def test_scenario_validation_errors(mutate):
    d = small_scenario().to_dict()
    mutate(d)
    with pytest.raises(ConfigError):
        sim.Scenario.from_dict(d)


def test_load_scenario_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        sim.load_scenario(bad)
    with pytest.raises(ConfigError):
        sim.load_scenario(tmp_path / "missing.json")


@pytest.mark.parametrize("name", ["two_robot", "four_robot", "fourteen_robot", "disjoint_halfplanes",
                                  "obstacle_overlap"])
def test_shipped_scenarios_load(scenario_file, name):
    sc = sim.load_scenario(scenario_file(name))
    assert sc.params == sim.SimParams()
    assert sc.n_robots >= 1


# ---------------------------------------------------------------- comparison

def test_compare_three_horizons_and_flags_incomplete():
    sc = small_scenario(params=sim.SimParams(K=40))
    rows = sim.compare(sc, [1, 5, 10])
    assert [r.label for r in rows] == ["FH1", "FH5", "FH10"]
    assert not rows[0].result.completed     # one-step lookahead deadlocks head-on
    assert rows[2].result.completed
    text = sim.comparison_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0].split(",") == list(sim.COMPARE_COLUMNS)
    assert len(lines) == 4
    assert ",False," in lines[1]
    assert sim.comparison_csv(sim.compare(sc, [1, 5, 10])) == text


def test_compare_includes_policy_row(tmp_path):
    path = tmp_path / "agent.ckpt"
    sac.SacAgent(2, sac.SacConfig(hidden=8), seed=0).save(path)
    rows = sim.compare(small_scenario(), [10], path)
    assert [r.label for r in rows] == ["FH10", "RL"]


def test_trajectory_csv_layout():
    res = sim.run_episode(small_scenario())
    lines = sim.trajectory_csv(res).strip().split("\n")
    assert lines[0] == "step,robot_id,x,y,ux,uy,horizon,active_constraints"
    assert len(lines) - 1 == 2 * res.steps
    steps = [int(l.split(",")[0]) for l in lines[1:]]
    assert steps == sorted(steps)


def test_metrics_json_has_no_wall_time():
    d = json.loads(sim.metrics_json(sim.run_episode(small_scenario())))
    assert "wall_time" not in d
    assert d["completed"] is True


# ------------------------------------------------------------------ training

def test_train_zero_episodes_leaves_agent_untouched():
    agent = sac.SacAgent(2, sac.SacConfig(hidden=8), seed=0)
    before = agent.to_bytes()
    log = sac.train(sim.MultiRobotEnv(small_scenario()), agent, 0, seed=0)
    assert log.rows == []
    assert log.to_csv().strip() == ",".join(sac.LOG_COLUMNS)
    assert agent.to_bytes() == before


def _short_training():
    cfg = sac.SacConfig(hidden=16, batch_size=16, warmup_steps=30, buffer_capacity=1000)
    agent = sac.SacAgent(2, cfg, seed=4)
    env = sim.MultiRobotEnv(small_scenario(params=sim.SimParams(K=25)))
    log = sac.train(env, agent, 3, seed=4)
    return log, agent


def test_train_is_deterministic():
    (log_a, ag_a), (log_b, ag_b) = _short_training(), _short_training()
    assert log_a.to_csv() == log_b.to_csv()
    assert ag_a.to_bytes() == ag_b.to_bytes()
    assert ag_a.updates > 0
    assert len(log_a.rows) == 3


def test_train_rejects_robot_mismatch():
    with pytest.raises(ConfigError):
        sac.train(sim.MultiRobotEnv(small_scenario()), sac.SacAgent(3, sac.SacConfig(hidden=8)), 1)
