import json
import subprocess
import sys

import pytest

from vhmpc import sac
from vhmpc.cli import main


def write_scenario(path, **overrides):
    data = {
        "name": "tiny",
        "robots": [{"start": [0.0, 0.0], "goal": [6.0, 0.0]}, {"start": [6.0, 0.3], "goal": [0.0, 0.3]}],
        "obstacles": [],
        "params": {"K": 60},
        "horizon_mode": {"fixed": 10},
        "seed": 0,
        "terminate_on_collision": True,
    }
    data.update(overrides)
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture
def tiny(tmp_path):
    return write_scenario(tmp_path / "tiny.json")


def test_run_writes_outputs(tmp_path, tiny):
    out = tmp_path / "out"
    assert main(["run", "--scenario", tiny, "--out", str(out)]) == 0
    lines = (out / "trajectory.csv").read_text().strip().split("\n")
    metrics = json.loads((out / "metrics.json").read_text())
    assert len(lines) - 1 == 2 * metrics["steps"]
    assert {l.split(",")[1] for l in lines[1:]} == {"0", "1"}
    assert "wall_time" in json.loads((out / "timing.json").read_text())


def test_run_shipped_two_robot_file(tmp_path, scenario_file):
    out = tmp_path / "out"
    assert main(["run", "--scenario", scenario_file("two_robot"), "--out", str(out), "--horizon", "20"]) == 0
    rows = (out / "trajectory.csv").read_text().strip().split("\n")[1:]
    assert len(rows) % 2 == 0


def test_malformed_json_exit_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_missing_scenario_exit_1(tmp_path):
    assert main(["run", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1


def test_bad_arguments_exit_1(tiny, tmp_path):
    assert main(["run", "--scenario", tiny]) == 1
    assert main(["run", "--scenario", tiny, "--out", str(tmp_path), "--horizon", "0"]) == 1
    assert main(["compare", "--scenario", tiny, "--out", str(tmp_path), "--horizon", "a,b"]) == 1


def test_collision_exit_2_still_writes_metrics(tmp_path, scenario_file):
    out = tmp_path / "out"
    assert main(["run", "--scenario", scenario_file("obstacle_overlap"), "--out", str(out)]) == 2
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["termination"] == "collision"


def test_timeout_exit_2(tmp_path):
    sc = write_scenario(tmp_path / "short.json", params={"K": 3})
    assert main(["run", "--scenario", sc, "--out", str(tmp_path / "o")]) == 2


def test_train_zero_episodes(tmp_path, tiny):
    out = tmp_path / "out"
    assert main(["train", "--scenario", tiny, "--out", str(out), "--episodes", "0"]) == 0
    assert (out / "training_log.csv").read_text().strip() == ",".join(sac.LOG_COLUMNS)
    agent = sac.load_agent(out / "agent.ckpt")
    assert agent.n_robots == 2 and agent.episodes == 0


def test_train_then_eval_and_compare(tmp_path, tiny):
    out = tmp_path / "train"
    assert main(["train", "--scenario", tiny, "--out", str(out), "--episodes", "2"]) == 0
    log = (out / "training_log.csv").read_text().strip().split("\n")
    assert len(log) == 3
    ckpt = str(out / "agent.ckpt")
    assert main(["eval", "--scenario", tiny, "--out", str(tmp_path / "eval"), "--checkpoint", ckpt]) in (0, 2)
    assert (tmp_path / "eval" / "metrics.json").exists()
    cmp_out = tmp_path / "cmp"
    assert main(["compare", "--scenario", tiny, "--out", str(cmp_out), "--horizon", "5,10,20",
                 "--checkpoint", ckpt]) == 0
    rows = (cmp_out / "comparison.csv").read_text().strip().split("\n")
    assert [r.split(",")[0] for r in rows[1:]] == ["FH5", "FH10", "FH20", "RL"]


def test_compare_default_three_rows(tmp_path, tiny):
    out = tmp_path / "cmp"
    assert main(["compare", "--scenario", tiny, "--out", str(out)]) == 0
    rows = (out / "comparison.csv").read_text().strip().split("\n")
    assert len(rows) == 4
    assert (out / "timing.csv").exists()


def test_unreadable_checkpoint_exit_1(tmp_path, tiny):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"garbage")
    assert main(["compare", "--scenario", tiny, "--out", str(tmp_path / "c"), "--checkpoint", str(junk)]) == 1
    assert main(["eval", "--scenario", tiny, "--out", str(tmp_path / "e"), "--checkpoint", str(junk)]) == 1
    assert main(["eval", "--scenario", tiny, "--out", str(tmp_path / "e"),
                 "--checkpoint", str(tmp_path / "missing")]) == 1


def test_checkpoint_robot_mismatch_exit_1(tmp_path, tiny):
    ckpt = tmp_path / "three.ckpt"
    sac.SacAgent(3, sac.SacConfig(hidden=8)).save(ckpt)
    assert main(["eval", "--scenario", tiny, "--out", str(tmp_path / "e"), "--checkpoint", str(ckpt)]) == 1


def test_terminate_on_collision_flag(tmp_path, scenario_file):
    out = tmp_path / "out"
    code = main(["run", "--scenario", scenario_file("obstacle_overlap"), "--out", str(out),
                 "--terminate-on-collision", "false"])
    metrics = json.loads((out / "metrics.json").read_text())
    assert code == 2
    assert metrics["termination"] == "timeout"
    assert metrics["steps"] > 1


def _outputs(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if not p.name.startswith("timing")}


def test_reruns_are_byte_identical(tmp_path, tiny):
    for cmd in (["run"], ["compare", "--horizon", "5,10"], ["train", "--episodes", "2"]):
        outs = []
        for rep in range(2):
            d = tmp_path / f"{cmd[0]}{rep}"
            main([cmd[0], "--scenario", tiny, "--out", str(d), "--seed", "3", *cmd[1:]])
            outs.append(_outputs(d))
        assert outs[0] == outs[1]
        assert outs[0]


def test_selftest_quick():
    assert main(["selftest", "--quick"]) == 0


def test_console_entry_point(tmp_path, tiny):
    proc = subprocess.run([sys.executable, "-m", "vhmpc.cli", "run", "--scenario", tiny, "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "all-arrived" in proc.stdout
