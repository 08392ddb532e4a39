import json

import numpy as np
import pytest

from rlinterference import cli, runner
from rlinterference.agents import AgentConfig
from rlinterference.measures import eti, interference_dispersion
from rlinterference.runner import (
    ExperimentConfig,
    RunResult,
    RunSpec,
    correlation_table,
    execute_runs,
    load_run,
    run_dir,
    stage_schedule,
    summarize,
    sweep_grid,
    train_run,
)

TINY_AGENT = AgentConfig(hidden=16, batch_size=16, buffer_size=100)


def tiny_spec(env="cartpole", seed=0, **kw):
    base = dict(env=env, agent=TINY_AGENT, seed=seed, steps=400, cadence=100, n_pairs=5, n_rollouts=2,
                horizon=60, offline_rollouts=2, eval_capacity=50)
    base.update(kw)
    return RunSpec(**base)


def tiny_cfg(tmp_path, **kw):
    base = dict(seeds=[0], steps=400, cadence=100, n_pairs=5, n_rollouts=2, horizon=60, offline_rollouts=2,
                agent={"hidden": 16, "batch_size": 16, "buffer_size": 100}, out=str(tmp_path))
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def test_stage_schedule_arithmetic():
    assert stage_schedule(90_000) == [(0, 10_000), (1, 70_000), (0, 10_000)]
    assert stage_schedule(18_000) == [(0, 2_000), (1, 14_000), (0, 2_000)]
    spec = tiny_spec("two_rooms", steps=18_000, cadence=1000)
    starts = [b[1] - 1 for b in spec.stage_bounds()]
    assert starts == [0, 2_000, 16_000]
    full = tiny_spec("two_rooms", steps=90_000, cadence=1000)
    assert [b[1] - 1 for b in full.stage_bounds()[1:]] == [10_000, 80_000]


def test_spec_validation_and_roundtrip():
    spec = tiny_spec()
    again = RunSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec and again.config_hash() == spec.config_hash()
    assert tiny_spec(seed=3).config_hash() == spec.config_hash()
    with pytest.raises(ValueError):
        tiny_spec(env="pong")
    with pytest.raises(ValueError):
        tiny_spec("two_rooms", stages=[[0, 100], [1, 100]])
    with pytest.raises(ValueError):
        tiny_spec(stages=[[0, 400]])
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"seeds": [1, 1]})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"colour": "red"})


def test_run_rows_and_summary():
    res = train_run(tiny_spec())
    assert [r["step"] for r in res.rows] == [100, 200, 300, 400]
    assert set(res.rows[0]) == set(runner.SERIES_COLUMNS)
    assert all(np.isfinite(v) for r in res.rows for v in r.values())
    half = [r["ei"] for r in res.rows[2:]]
    assert res.summary["eti"] == eti(half)
    assert res.summary["dispersion"] == interference_dispersion(half)


def test_runs_are_deterministic_and_persisted_bit_exactly(tmp_path):
    spec = tiny_spec(seed=5)
    a, b = train_run(spec), train_run(spec)
    assert a.rows == b.rows
    runner.write_run(tmp_path / "a", a)
    runner.write_run(tmp_path / "b", b)
    assert (tmp_path / "a" / "series.csv").read_bytes() == (tmp_path / "b" / "series.csv").read_bytes()
    header = (tmp_path / "a" / "series.csv").read_text().splitlines()[0]
    assert header == "step,online_return,offline_return,ei,aei_buffer,aei_reservoir,aei_discounted"
    loaded = load_run(tmp_path / "a")
    assert loaded.rows == a.rows
    assert summarize(loaded.spec, loaded.rows) == loaded.summary


def test_measurement_cadence_does_not_perturb_training():
    coarse = train_run(tiny_spec(seed=4, cadence=200))
    fine = train_run(tiny_spec(seed=4, cadence=100))
    by_step = {r["step"]: r for r in fine.rows}
    for row in coarse.rows:
        assert row["online_return"] == by_step[row["step"]]["online_return"]


def test_config_json_reexecutes_the_run(tmp_path):
    spec = tiny_spec(seed=2)
    first = train_run(spec)
    runner.write_run(tmp_path, first)
    replay = train_run(RunSpec.from_dict(json.loads((tmp_path / "config.json").read_text())))
    assert replay.rows == first.rows


def test_two_rooms_per_room_columns():
    res = train_run(tiny_spec("two_rooms", steps=900, cadence=100, per_room=True))
    assert [e["stage"] for e in res.extra] == [0, 1, 1, 1, 1, 1, 1, 1, 2]
    assert [e["room"] for e in res.extra] == [0, 1, 1, 1, 1, 1, 1, 1, 0]
    assert set(runner.ROOM_COLUMNS) == set(res.extra[0])
    # the performance window is the room-1 stage
    assert [r["step"] for r in runner.performance_rows(res.spec, res.rows)] == list(range(200, 900, 100))


def test_tile_agent_never_interferes_across_rooms():
    spec = tiny_spec("two_rooms", agent=AgentConfig(kind="tile"), steps=1800, cadence=20, per_room=True)
    res = train_run(spec)
    _, first, last = spec.stage_bounds()[1]
    assert all(e["ei_room0"] == 0.0 for e in res.extra if first <= e["step"] <= last)


def test_block_ei_telescopes_to_full_step():
    spec = tiny_spec(agent=AgentConfig(kind="sbcd", hidden=16, batch_size=16, buffer_size=100), block_ei=True)
    res = train_run(spec)
    for row, blk in zip(res.rows, res.extra):
        assert blk["ei_rln"] + blk["ei_vln"] == pytest.approx(row["ei"], abs=1e-9)
    with pytest.raises(ValueError):
        train_run(tiny_spec(block_ei=True))


def test_resume_skips_completed_runs(tmp_path):
    specs = [tiny_spec(seed=s) for s in (0, 1)]
    results, failures = execute_runs(specs, tmp_path, "exp")
    assert not failures and len(results) == 2
    path = run_dir(tmp_path, "exp", specs[0])
    stamp = (path / "summary.json").stat().st_mtime_ns
    results, _ = execute_runs(specs, tmp_path, "exp")
    assert (path / "summary.json").stat().st_mtime_ns == stamp
    assert [r.rows for r in results] == [load_run(run_dir(tmp_path, "exp", s)).rows for s in specs]


def test_failed_runs_are_flagged_and_the_batch_continues(tmp_path, monkeypatch):
    real = runner.train_run

    def flaky(spec):
        if spec.seed == 1:
            raise RuntimeError("boom")
        return real(spec)

    monkeypatch.setattr(runner, "train_run", flaky)
    results, failures = execute_runs([tiny_spec(seed=s) for s in (0, 1, 2)], tmp_path, "exp")
    assert len(results) == 2 and len(failures) == 1 and "boom" in failures[0][1]
    assert (run_dir(tmp_path, "exp", tiny_spec(seed=1)) / "FAILED").exists()


def test_sweep_grid_cardinality(tmp_path):
    assert len(sweep_grid(ExperimentConfig())) == 135
    assert len(sweep_grid(ExperimentConfig(desk=True))) == 1
    cfg = ExperimentConfig(desk=True, grid={"target_freq": [0, 100, 400], "batch_size": [16, 64]})
    grid = sweep_grid(cfg)
    assert len(grid) == 6 and {a.target_freq for a in grid} == {0, 100, 400}


def fake_result(seed, hidden, summary):
    spec = tiny_spec(seed=seed, agent=AgentConfig(hidden=hidden))
    return RunResult(spec, [], summary=summary)


def test_correlation_table_and_self_check():
    results = []
    for i, hidden in enumerate((8, 16, 32, 64)):
        summary = {f"{m}_{mode}": float(10 - i) for m in ("aer", "stable", "efficiency") for mode in ("online", "offline")}
        summary.update(eti=float(i), dispersion=float(i * i))
        results += [fake_result(0, hidden, summary), fake_result(1, hidden, summary)]
    rows = correlation_table(results)
    assert len(rows) == 16
    for row in rows:
        assert -1.0 <= row["tau"] <= 1.0
        assert row["tau"] == -1.0  # every metric falls as the statistic rises, and neg_* is exact
    assert {r["metric"] for r in rows} == {"aer", "stability", "efficiency", "neg_eti", "neg_dispersion"}


def test_sweep_then_correlate(tmp_path):
    cfg = tiny_cfg(tmp_path, env="cartpole", desk=True, grid={"batch_size": [8, 16]}, seeds=[0, 1])
    report = runner.run_sweep(cfg)
    assert report["completed"] == 4 and not report["failures"]
    rows = runner.run_correlation(cfg)
    text = (tmp_path / "sweep" / "cartpole" / "correlations.csv").read_text().splitlines()
    assert text[0] == "metric,statistic,mode,tau" and len(text) == len(rows) + 1
    assert json.loads((tmp_path / "sweep" / "cartpole" / "correlations.json").read_text()) == rows


def test_correlate_without_sweep_fails(tmp_path):
    with pytest.raises(ValueError):
        runner.run_correlation(tiny_cfg(tmp_path, desk=True))


def test_aei_report_has_every_strategy(tmp_path):
    cfg = tiny_cfg(tmp_path, seeds=[0, 1, 2])
    report = runner.run_aei_validation(cfg)
    for s in ("buffer", "reservoir", "discounted"):
        stats = report["per_step"][s]
        assert ("error" in stats and np.isnan(stats["r"])) or (-1 <= stats["r"] <= 1 and 0 <= stats["p"] <= 1)
        assert s in report["shuffled"]
    assert (tmp_path / "validate-aei" / "pearson.csv").exists()


def synthetic_run(seed, ei, aei):
    rows = [{"step": i + 1, "ei": float(e), "aei_buffer": float(a), "aei_reservoir": float(-a),
             "aei_discounted": 0.0} for i, (e, a) in enumerate(zip(ei, aei))]
    summary = {"eti": 0.0, **{f"approximate_eti_{s}": 0.0 for s in runner.STRATEGIES}}
    return RunResult(tiny_spec(seed=seed), rows, summary=summary)


def test_aei_report_pools_second_halves():
    rng = np.random.default_rng(0)
    results = []
    for seed in range(3):
        ei = rng.normal(size=8)
        results.append(synthetic_run(seed, ei, 2 * ei + 1))
    report = runner.aei_report(results)
    assert report["per_step"]["buffer"]["r"] == pytest.approx(1.0)
    assert report["per_step"]["reservoir"]["r"] == pytest.approx(-1.0)
    assert report["per_step"]["buffer"]["n"] == 12
    assert report["per_step_raw"]["buffer"]["r"] == pytest.approx(1.0)
    assert abs(report["shuffled"]["buffer"]["r"]) < 1.0
    # a constant AEI column cannot be standardized
    assert report["per_step"]["discounted"]["excluded_seeds"] == 3
    assert np.isnan(report["per_step"]["discounted"]["r"])


def test_aei_report_within_seed_scaling():
    # each seed tracks EI, but one seed's AEI lives on a scale 1e4 larger and is shifted
    rng = np.random.default_rng(1)
    results = []
    for seed in range(4):
        ei = rng.normal(size=20)
        aei = ei + 0.5 * rng.normal(size=20)
        if seed == 0:
            aei = 1e4 * aei[::-1].copy() + 5e4  # reversed: anti-correlated, huge scale
        results.append(synthetic_run(seed, np.concatenate([np.zeros(20), ei]), np.concatenate([np.zeros(20), aei])))
    report = runner.aei_report(results)
    assert report["per_step_raw"]["buffer"]["r"] < 0.2  # swamped by the big seed
    assert report["per_step"]["buffer"]["r"] > 0.4
    assert report["per_step"]["buffer"]["excluded_seeds"] == 0


def test_sbcd_table_layout(tmp_path):
    cfg = tiny_cfg(tmp_path, seeds=[0, 1])
    variants = {name: AgentConfig(**{**a.to_dict(), "hidden": 16, "batch_size": 16, "buffer_size": 100})
                for name, a in runner.SBCD_VARIANTS.items()}
    report = runner.run_sbcd_study(cfg, variants)
    rows = report["table"]
    assert report["failures"] == []
    assert [r["variant"] for r in rows] == ["SBCD", "SBCD smaller alpha2", "SBCD+SR-NN"]
    assert {"eti_rln", "eti_vln", "performance"} <= set(rows[0])
    assert (tmp_path / "sbcd" / "layers.csv").exists()


def test_verify_bounds_small_batch():
    result = runner.verify_bounds(n_mdps=10, seed=1)
    assert result["failures"] == 0 and result["n_mdps"] == 10


# ---------------------------------------------------------------- CLI

def test_cli_without_arguments_exits_2(capsys):
    assert cli.main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_cli_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["launch"])
    assert exc.value.code == 2


def test_cli_missing_config_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert cli.main(["sweep", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_cli_flags_override_config(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"steps": 999, "cadence": 50, "seeds": [4]}))
    args = cli.build_parser().parse_args(["--steps", "200", "sweep", "--config", str(cfg_file),
                                          "--seeds", "0-2,7", "--grid", "hidden=128,256"])
    cfg = cli.load_config(args)
    assert cfg.steps == 200 and cfg.cadence == 50 and cfg.seeds == [0, 1, 2, 7]
    assert cfg.grid == {"hidden": [128, 256]}


def test_cli_env_var_sets_default_out(monkeypatch, tmp_path):
    monkeypatch.setenv(runner.OUT_ENV_VAR, str(tmp_path / "x"))
    assert ExperimentConfig().out_dir == tmp_path / "x"


def test_cli_sweep_end_to_end(tmp_path, capsys):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"n_pairs": 5, "n_rollouts": 2, "horizon": 60, "offline_rollouts": 2,
                                    "agent": {"hidden": 16, "batch_size": 16, "buffer_size": 100}}))
    code = cli.main(["sweep", "--config", str(cfg_file), "--desk", "--steps", "200", "--seeds", "0",
                     "--out", str(tmp_path / "o")])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["completed"] == 1


def test_cli_verify_bounds(capsys):
    assert cli.main(["verify-bounds", "--n-mdps", "5"]) == 0
    assert json.loads(capsys.readouterr().out)["failures"] == 0
