import csv
import math

import numpy as np
import pytest

from lsadsac import cli, harness
from lsadsac.config import RunConfig, load_config, parse_config, with_overrides
from lsadsac.errors import ConfigurationError, InvalidInputError, UsageError
from lsadsac.harness import EpisodeRecord, summarize
from lsadsac.simulator import (
    TRAJECTORY_FIELDS,
    CrowdEnv,
    SimConfig,
    action_velocity,
    trajectory_rows,
    write_trajectory_csv,
)

SMALL = """
[run]
checkpoint_every = 2
[dsac]
batch_size = 16
hidden = 16, 16
"""


def small_cfg(tmp_path, name="run", **kw):
    cfg = parse_config(SMALL)
    return with_overrides(cfg, out=str(tmp_path / name), **kw)


def rows_of(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- config


def test_default_config_values():
    cfg = load_config()
    assert (cfg.run.encoder, cfg.run.episodes, cfg.run.checkpoint_every) == ("LSA", 2000, 100)
    assert (cfg.dsac.gamma, cfg.dsac.tau, cfg.dsac.lr, cfg.dsac.batch_size) == (0.95, 0.005, 3e-4, 128)
    assert cfg.dsac.target_entropy == pytest.approx(0.3 * math.log(81))


def test_config_round_trip():
    cfg = with_overrides(parse_config(SMALL), seed=7, encoder="SA", obstacles=3, scenario="square")
    again = parse_config(cfg.to_text())
    assert again == cfg
    assert again.to_text() == cfg.to_text()


def test_config_partial_sections_default():
    cfg = parse_config("[sim]\nn_obstacles = 4\n")
    assert cfg.sim.n_obstacles == 4
    assert cfg.run == RunConfig().run


@pytest.mark.parametrize(
    "text, field",
    [
        ("[run]\nencoder = XYZ\n", "run.encoder"),
        ("[run]\nepisodes = -1\n", "run.episodes"),
        ("[run]\nepisodes = many\n", "run.episodes"),
        ("[sim]\nbogus = 1\n", "sim.bogus"),
        ("[sim]\ndt = 0\n", "sim.dt"),
        ("[sim]\nscenario = hexagon\n", "sim.scenario"),
        ("[dsac]\ngamma = 1.5\n", "dsac"),
        ("[dsac]\nauto_entropy = maybe\n", "dsac.auto_entropy"),
        ("[other]\nx = 1\n", "[other]"),
        ("no section header\n", "syntax"),
    ],
)
def test_config_errors_name_the_field(text, field):
    with pytest.raises(ConfigurationError, match=field.replace("[", r"\[").replace("]", r"\]")):
        parse_config(text)


def test_digest_ignores_output_and_budget():
    cfg = RunConfig()
    other = with_overrides(cfg, out="elsewhere", episodes=5)
    assert cfg.digest() == other.digest()
    assert cfg.digest() != with_overrides(cfg, seed=1).digest()
    assert cfg.model_digest() == with_overrides(cfg, seed=1, obstacles=3).model_digest()
    assert cfg.model_digest() != with_overrides(cfg, encoder="SA").model_digest()


# ---------------------------------------------------------------- evaluation summary


def test_summary_fixture():
    records = [
        EpisodeRecord("success", 10.0, 0.5, 1.0),
        EpisodeRecord("success", 12.0, 0.3, 1.0),
        EpisodeRecord("collision", 4.0, -0.1, -0.25),
        EpisodeRecord("timeout", 25.0, 1.0, 0.2),
    ]
    s = summarize(records)
    assert s.success_rate == 0.5
    assert s.time_to_goal == 11.0
    assert s.collision_rate == 0.25
    assert s.timeout_rate == 0.25
    assert s.mean_min_distance == pytest.approx(0.425)
    assert s.mean_reward == pytest.approx(0.4875)
    assert s.n_episodes == 4
    assert s.lines()[-1] == "n_episodes: 4"


def test_summary_rejects_empty():
    with pytest.raises(InvalidInputError):
        summarize([])


def goal_seeker(env):
    velocities = np.array([action_velocity(a, env.cfg.v_pref) for a in range(81)])

    def policy(obs):
        robot = env.world.robot
        return int(np.argmax(velocities @ (robot.goal - robot.p)))

    return policy


def test_stub_always_reaches_goal():
    env = CrowdEnv(SimConfig(n_obstacles=0), rng=np.random.default_rng(0))
    policy = goal_seeker(env)
    s = summarize([harness.run_episode(env, policy) for _ in range(20)])
    assert s.success_rate == 1.0
    assert s.collision_rate == 0.0
    assert s.time_to_goal <= 25.0


def test_rates_partition_one_for_random_policy():
    env = CrowdEnv(SimConfig(n_obstacles=3), rng=np.random.default_rng(1))
    rng = np.random.default_rng(2)
    records = [harness.run_episode(env, lambda obs: int(rng.integers(81))) for _ in range(30)]
    s = summarize(records)
    for rate in (s.success_rate, s.collision_rate, s.timeout_rate):
        assert 0.0 <= rate <= 1.0
    assert abs(s.success_rate + s.collision_rate + s.timeout_rate - 1) <= 1e-9
    assert all(r.duration <= 25.0 for r in records)


def test_episode_record_matches_terminal_events():
    env = CrowdEnv(SimConfig(n_obstacles=3), rng=np.random.default_rng(3))
    rng = np.random.default_rng(4)
    outcomes = set()
    for _ in range(40):
        record = harness.run_episode(env, lambda obs: int(rng.integers(81)), keep_trajectory=True)
        robot = env.world.robot
        remaining = math.dist(robot.p, robot.goal)
        expected = "collision" if record.min_clearance < 0 else "success" if remaining <= robot.r else "timeout"
        assert record.outcome == expected
        assert len(record.trajectory) == round(record.duration / env.cfg.dt) + 1
        outcomes.add(record.outcome)
    assert "collision" in outcomes and "timeout" in outcomes


# ---------------------------------------------------------------- training runs


def test_zero_episode_run(tmp_path):
    cfg = small_cfg(tmp_path, episodes=0)
    harness.train(cfg, log=lambda *_: None)
    out = tmp_path / "run"
    assert rows_of(out / "training.csv") == [harness.LOG_FIELDS]
    assert (out / "ckpt_000000.lsad").exists()
    assert (out / "final.lsad").exists()
    assert (out / "reward_curve.svg").read_text().lstrip().startswith("<?xml")
    assert parse_config((out / "config.ini").read_text()) == cfg


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = small_cfg(tmp, episodes=3, obstacles=2)
    harness.train(cfg, log=lambda *_: None)
    return cfg, tmp / "run"


def test_training_artifacts(trained):
    cfg, out = trained
    rows = rows_of(out / "training.csv")
    assert rows[0] == harness.LOG_FIELDS
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
    assert {r[3] for r in rows[1:]} <= {"success", "collision", "timeout"}
    assert (out / "ckpt_000002.lsad").exists()
    svg = (out / "reward_curve.svg").read_text()
    assert "episode" in svg


def test_rerun_from_written_config_is_identical(trained, tmp_path):
    cfg, out = trained
    again = with_overrides(load_config(out / "config.ini"), out=str(tmp_path / "again"))
    harness.train(again, log=lambda *_: None)
    assert (tmp_path / "again" / "training.csv").read_bytes() == (out / "training.csv").read_bytes()


def test_eval_checkpoint_outputs(trained, tmp_path):
    cfg, out = trained
    summary = harness.eval_checkpoint(out / "final.lsad", cfg, 4, str(tmp_path))
    rows = rows_of(tmp_path / "eval_circle.csv")
    assert rows[0] == harness.EPISODE_FIELDS and len(rows) == 5
    assert abs(summary.success_rate + summary.collision_rate + summary.timeout_rate - 1) <= 1e-9


def test_transfer_to_square_uses_same_checkpoint(trained, tmp_path):
    cfg, out = trained
    square = with_overrides(cfg, scenario="square")
    summary = harness.eval_checkpoint(out / "final.lsad", square, 3, str(tmp_path))
    assert summary.n_episodes == 3
    assert (tmp_path / "eval_square.csv").exists()


def test_mismatched_checkpoint_refused(trained):
    cfg, out = trained
    with pytest.raises(UsageError, match="LSA.*SA|SA.*LSA"):
        harness.load_agent(out / "final.lsad", with_overrides(cfg, encoder="SA"))


def test_eval_is_deterministic(trained):
    cfg, out = trained
    agent, _ = harness.load_agent(out / "final.lsad", cfg)
    a, _ = harness.evaluate(agent, cfg, 3)
    b, _ = harness.evaluate(agent, cfg, 3)
    assert a == b


# ---------------------------------------------------------------- inspection


def test_inspect_weights_sum_to_one(trained, tmp_path):
    cfg, out = trained
    rows, record = harness.inspect_episode(out / "final.lsad", cfg, 5, str(tmp_path))
    assert rows
    by_step = {}
    for r in rows:
        by_step.setdefault(r[1], []).append(r[4])
    assert all(len(w) == 2 for w in by_step.values())
    assert all(abs(sum(w) - 1) <= 1e-9 for w in by_step.values())
    assert rows_of(tmp_path / "attention.csv")[0] == harness.ATTENTION_FIELDS
    assert (tmp_path / "attention.svg").exists()


def test_inspect_single_obstacle_weights_are_one(trained, tmp_path):
    cfg, out = trained
    one = with_overrides(cfg, obstacles=1)
    rows, _ = harness.inspect_episode(out / "final.lsad", one, 2, str(tmp_path))
    assert rows and all(r[4] == 1.0 for r in rows)


def test_inspect_is_reproducible(trained, tmp_path):
    cfg, out = trained
    a, _ = harness.inspect_episode(out / "final.lsad", cfg, 9, str(tmp_path / "a"))
    b, _ = harness.inspect_episode(out / "final.lsad", cfg, 9, str(tmp_path / "b"))
    assert a == b
    assert (tmp_path / "a" / "attention.csv").read_bytes() == (tmp_path / "b" / "attention.csv").read_bytes()


def test_inspect_refuses_rg(tmp_path):
    cfg = small_cfg(tmp_path, episodes=0, encoder="RG")
    harness.train(cfg, log=lambda *_: None)
    with pytest.raises(UsageError, match="encoder has no attention scores"):
        harness.inspect_episode(tmp_path / "run" / "final.lsad", cfg, 0, str(tmp_path / "inspect"))


# ---------------------------------------------------------------- rendering


def write_rows(path, rows, header=TRAJECTORY_FIELDS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        w.writerows(rows)


def test_render_empty_file(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    labels = harness.render_file(tmp_path / "empty.csv", tmp_path / "empty.svg")
    assert labels == {}
    svg = (tmp_path / "empty.svg").read_text()
    assert "<svg" in svg and "x (m)" in svg


def test_render_header_only(tmp_path):
    write_rows(tmp_path / "h.csv", [])
    assert harness.render_file(tmp_path / "h.csv", tmp_path / "h.svg") == {}


def test_render_straight_line_robot(tmp_path):
    rows = [[0, k, 0, 0.0, -4 + 0.25 * k, 0.0, 1.0] for k in range(12)]
    write_rows(tmp_path / "line.csv", rows)
    labels = harness.render_file(tmp_path / "line.csv", tmp_path / "line.svg")
    assert labels == {0: 12}
    svg = (tmp_path / "line.svg").read_text()
    assert svg.count("<path") >= 1
    for k in range(12):
        assert f">{k}<" in svg


def test_render_label_count_per_agent(tmp_path):
    env = CrowdEnv(SimConfig(n_obstacles=3), rng=np.random.default_rng(4))
    record = harness.run_episode(env, lambda obs: 0, keep_trajectory=True)
    rows = trajectory_rows(0, record.trajectory)
    write_trajectory_csv(tmp_path / "t.csv", rows)
    labels = harness.render_file(tmp_path / "t.csv", tmp_path / "t.svg")
    steps = len(record.trajectory)
    assert labels == {a: steps for a in range(4)}


@pytest.mark.parametrize(
    "lines, lineno",
    [
        (["0,0,0,0,0,0,0", "0,1,0,0,0,0"], 3),
        (["0,0,0,0,0,0,0", "0,1,0,x,0,0,0"], 3),
        (["0,0,0,0,0,0,0", "0,1,0,0,0,0,0", "a,b,c,d,e,f,g"], 4),
    ],
)
def test_render_malformed_reports_line(tmp_path, lines, lineno):
    (tmp_path / "bad.csv").write_text(",".join(TRAJECTORY_FIELDS) + "\n" + "\n".join(lines) + "\n")
    with pytest.raises(InvalidInputError, match=f"line {lineno}:"):
        harness.render_file(tmp_path / "bad.csv", tmp_path / "bad.svg")


def test_render_bad_header(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b,c\n")
    with pytest.raises(InvalidInputError, match="line 1:"):
        harness.read_trajectory_csv(tmp_path / "bad.csv")


def test_moving_average():
    assert np.allclose(harness.moving_average([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])
    assert harness.moving_average([]).size == 0


# ---------------------------------------------------------------- cli


def test_cli_train_eval_inspect_render(tmp_path, capsys):
    out = tmp_path / "cli"
    cfg_path = tmp_path / "small.ini"
    cfg_path.write_text(SMALL)
    base = ["--config", str(cfg_path), "--obstacles", "1"]
    assert cli.main(["train", *base, "--episodes", "0", "--out", str(out)]) == 0
    ckpt = str(out / "final.lsad")
    assert cli.main(["eval", *base, "--checkpoint", ckpt, "--episodes", "2"]) == 0
    assert "success_rate" in capsys.readouterr().out
    assert cli.main(["inspect", *base, "--checkpoint", ckpt, "--out", str(out / "insp")]) == 0
    traj = out / "insp" / "trajectory.csv"
    assert cli.main(["render", str(traj), "--out", str(tmp_path / "r.svg")]) == 0
    assert (tmp_path / "r.svg").exists()


def test_cli_grid_writes_one_run_per_variant(tmp_path):
    cfg_path = tmp_path / "small.ini"
    cfg_path.write_text(SMALL)
    out = tmp_path / "grid"
    assert cli.main(["train", "--config", str(cfg_path), "--episodes", "0", "--encoder", "AW,SA,LSA", "--out", str(out)]) == 0
    for variant in ("AW", "SA", "LSA"):
        assert (out / variant / "reward_curve.svg").exists()
        assert rows_of(out / variant / "training.csv")[0] == harness.LOG_FIELDS


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nencoder = nope\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "run.encoder" in capsys.readouterr().err
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.lsad")]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--seed", "abc"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2


def test_cli_mismatch_prints_both_identities(tmp_path, capsys):
    out = tmp_path / "m"
    cfg_path = tmp_path / "small.ini"
    cfg_path.write_text(SMALL)
    assert cli.main(["train", "--config", str(cfg_path), "--episodes", "0", "--out", str(out)]) == 0
    code = cli.main(["eval", "--config", str(cfg_path), "--encoder", "AW", "--checkpoint", str(out / "final.lsad")])
    err = capsys.readouterr().err
    assert code == 2
    assert "LSA" in err and "AW" in err


def test_cli_oracle_reward(capsys):
    assert cli.main(["oracle", "reward"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6 and all(line.startswith("PASS") for line in lines)


def test_cli_oracle_failure_exit(monkeypatch, capsys):
    from lsadsac.oracles import Check

    monkeypatch.setitem(cli.SUITES, "reward", lambda: [Check("forced", 1.0, "== 0", False)])
    assert cli.main(["oracle", "reward"]) == 1
    assert capsys.readouterr().out.startswith("FAIL")
