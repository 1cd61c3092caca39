"""端到端：配置、CLI 退出码、单次运行、扫描、收敛实验、交叉验证与绘图导出。"""

from pathlib import Path

import numpy as np
import pytest

from mf3net import harness
from mf3net.cli import main
from mf3net.config import (
    TASK_DEFAULTS,
    WORKERS_ENV,
    ExperimentConfig,
    TaskKind,
    config_from_mapping,
    load_config,
    parse_config_text,
    resolve_workers,
)
from mf3net.errors import AcceptanceError, ConfigError, ExitCode, PreconditionError
from mf3net.harness import (
    convergence_run,
    couple_run,
    crossval,
    mf_run,
    picard_contracting,
    plot_run,
    run_task,
    sweep_eps,
    sweep_n,
    train_run,
)
from mf3net.metrics import read_metric_csv
from mf3net.models import NetworkParams, ParticleSystem
from mf3net.snapshots import load_params
from mf3net.workers import PointError, PoolConfig, run_points


def small_config(out: Path, **overrides) -> ExperimentConfig:
    values = {
        "n1": "3",
        "n2": "3",
        "oversample_factor": "2",
        "T": "0.2",
        "eps": "0.01",
        "data_atoms": "4",
        "record_intervals": "5",
        "seeds": "0,1",
        "width_levels": "1,2,3,4",
        "eps_levels": "0.04,0.02,0.01,0.005",
        "output_dir": str(out),
    }
    values.update({k: str(v) for k, v in overrides.items()})
    return config_from_mapping(values)


def write_config(path: Path, **overrides) -> Path:
    cfg = {"n1": 3, "n2": 3, "oversample_factor": 2, "T": 0.2, "eps": 0.01, "data_atoms": 4, "record_intervals": 5}
    cfg.update(overrides)
    path.write_text("# small run\n" + "".join(f"{k} = {v}\n" for k, v in cfg.items()), encoding="utf-8")
    return path


def square(x):
    return x * x


def fail_on_three(x):
    if x == 3:
        raise ConfigError("three is not allowed")
    return x


class TestConfig:
    def test_parse_text(self):
        values = parse_config_text("n1 = 4  # width\n\n# comment\nseeds=1,2\n")
        assert values == {"n1": "4", "seeds": "1,2"}

    def test_duplicate_and_malformed_lines(self):
        with pytest.raises(ConfigError):
            parse_config_text("n1=1\nn1=2\n")
        with pytest.raises(ConfigError):
            parse_config_text("just words\n")

    def test_coercion_and_defaults(self):
        cfg = config_from_mapping(
            {"n1": "4", "n2": "2", "seeds": "3, 1", "slope_bracket_n": "-1,0", "assert_acceptance": "no", "m2": "none"}
        )
        assert cfg.seeds == [3, 1]
        assert cfg.slope_bracket_n == (-1.0, 0.0)
        assert cfg.assert_acceptance is False
        assert cfg.h == cfg.eps
        assert (cfg.m1, cfg.m2) == (64, 32)
        assert cfg.task is TaskKind.COUPLE

    def test_task_defaults(self):
        sweep = config_from_mapping({"task": "sweep_eps"})
        assert (sweep.n1, sweep.n2, sweep.m1, sweep.m2) == (800, 800, 800, 800)
        conv = config_from_mapping({"task": "convergence"})
        assert conv.T == 200.0 and conv.h == 0.01
        assert (conv.m1, conv.m2) == (200, 200)
        assert conv.data_scale == 0.25 and conv.record_intervals == 200
        cross = config_from_mapping({"task": "crossval"})
        assert (cross.m1, cross.m2, cross.T) == (8, 8, 0.5)
        plain = config_from_mapping({"task": "couple"})
        assert plain.n1 == 100 and plain.T == 1.0 and plain.data_scale == 1.0
        assert TaskKind.COUPLE not in TASK_DEFAULTS

    def test_explicit_keys_beat_task_defaults(self, tmp_path):
        cfg = config_from_mapping({"task": "convergence", "T": "5", "m1": "20", "m2": "30", "n1": "4", "n2": "4"})
        assert cfg.T == 5.0 and (cfg.m1, cfg.m2) == (20, 30)
        assert cfg.h == 0.01
        path = write_config(tmp_path / "run.cfg", n1=8, n2=8)
        loaded = load_config(path, {"task": "sweep_eps"})
        assert loaded.n1 == 8 and loaded.m1 == 16

    def test_rejections(self):
        for bad in ({"bogus": "1"}, {"n1": "many"}, {"task": "dance"}, {"m1": "1", "n1": "2"}, {"seeds": ""}):
            with pytest.raises(ConfigError):
                config_from_mapping(bad)

    def test_file_with_overrides(self, tmp_path):
        path = write_config(tmp_path / "run.cfg")
        cfg = load_config(path, {"task": "train", "output_dir": str(tmp_path / "o")})
        assert cfg.task is TaskKind.TRAIN and cfg.n1 == 3
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.cfg")

    def test_worker_priority(self, monkeypatch):
        cfg = config_from_mapping({"workers": "2"})
        monkeypatch.delenv(WORKERS_ENV, raising=False)
        assert resolve_workers(None, cfg) == 2
        assert resolve_workers(4, cfg) == 4
        monkeypatch.setenv(WORKERS_ENV, "3")
        assert resolve_workers(4, cfg) == 3
        monkeypatch.setenv(WORKERS_ENV, "three")
        with pytest.raises(ConfigError):
            resolve_workers(None, cfg)


class TestWorkers:
    def test_inline_results_are_sorted(self):
        assert run_points(square, [((2,), 2), ((1,), 1)]) == [((1,), 1), ((2,), 4)]

    def test_process_pool_matches_inline(self):
        points = [((k,), k) for k in (4, 2, 3, 1)]
        assert run_points(square, points, PoolConfig(workers=2)) == run_points(square, points)

    def test_inline_failure_keeps_completed(self):
        with pytest.raises(PointError) as info:
            run_points(fail_on_three, [((k,), k) for k in (1, 2, 3, 4)])
        assert info.value.key == (3,)
        assert info.value.exit_code is ExitCode.VALIDATION
        assert info.value.completed == [((1,), 1), ((2,), 2)]

    def test_pool_failure_carries_exit_code(self):
        with pytest.raises(PointError) as info:
            run_points(fail_on_three, [((k,), k) for k in (1, 2, 3, 4)], PoolConfig(workers=2))
        assert info.value.key == (3,)
        assert info.value.exit_code is ExitCode.VALIDATION


class TestSingleRuns:
    def test_train_writes_risk_and_snapshot(self, tmp_path):
        cfg = small_config(tmp_path, task="train")
        report = train_run(cfg, save=tmp_path / "net.csv")
        frame, meta = read_metric_csv(tmp_path / "train.csv")
        assert list(frame.columns) == ["t", "risk"]
        assert len(frame) == 6 and meta["seed"] == "0"
        net = load_params(tmp_path / "net.csv")
        assert isinstance(net, NetworkParams) and net.step_k == 20
        assert report.summary["steps"] == 20

    def test_mf_writes_trajectory_and_final_state(self, tmp_path):
        report = mf_run(small_config(tmp_path, task="mf"))
        assert [p.name for p in report.outputs] == ["mf.csv", "mf_final.csv"]
        _, meta = read_metric_csv(tmp_path / "mf.csv")
        assert float(meta["sup_w3"]) <= float(meta["bound_w3"]) + 1e-9
        final = load_params(tmp_path / "mf_final.csv")
        assert isinstance(final, ParticleSystem) and final.m1 == 6
        assert final.t == pytest.approx(0.2)

    def test_couple_outputs(self, tmp_path):
        report = couple_run(small_config(tmp_path))
        frame, _ = read_metric_csv(tmp_path / "coupling.csv")
        assert frame["dev_w1"].iloc[0] == 0.0
        assert frame["D_t"].iloc[-1] == pytest.approx(report.summary["D_T"])
        gap, meta = read_metric_csv(tmp_path / "gap.csv")
        assert list(gap.columns) == ["t", "gap"] and meta["psi"] == "loss"

    def test_couple_is_byte_reproducible(self, tmp_path):
        couple_run(small_config(tmp_path / "a"))
        couple_run(small_config(tmp_path / "b"))
        assert (tmp_path / "a" / "coupling.csv").read_bytes() == (tmp_path / "b" / "coupling.csv").read_bytes()

    def test_unbounded_second_layer_rejected_before_work(self, tmp_path):
        with pytest.raises(ConfigError):
            couple_run(small_config(tmp_path, rho2="normal:1"))
        assert not (tmp_path / "coupling.csv").exists()

    def test_unbounded_activation_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            couple_run(small_config(tmp_path, activation2="identity"))


class TestSweeps:
    def test_width_sweep(self, tmp_path):
        result = sweep_n(small_config(tmp_path, assert_acceptance="false"))
        assert not result.degenerate
        assert list(result.raw.columns) == ["n_min", "seed", "D_T", "n1", "n2", "m1", "m2", "eps", "h"]
        assert list(result.aggregate["n_min"]) == [1, 2, 3, 4]
        assert np.all(result.aggregate["seeds"] == 2)
        _, meta = read_metric_csv(tmp_path / "sweep_n.csv")
        assert float(meta["slope"]) == pytest.approx(result.fit.slope)
        assert (tmp_path / "sweep_n_raw.csv").exists()

    def test_step_sweep(self, tmp_path):
        result = sweep_eps(small_config(tmp_path, assert_acceptance="false"))
        assert list(result.raw.columns) == ["eps", "seed", "D_T", "n1", "n2", "m1", "m2", "h"]
        assert list(result.raw["eps"].unique()) == [0.005, 0.01, 0.02, 0.04]
        assert np.all(result.raw["h"] <= result.raw["eps"])

    def test_frozen_schedule_is_degenerate(self, tmp_path):
        result = sweep_n(small_config(tmp_path, xi1="0", xi2="0", xi3="0"))
        assert result.degenerate
        assert result.summary() == {"axis": "n_min", "degenerate": True}
        _, meta = read_metric_csv(tmp_path / "sweep_n.csv")
        assert meta["degenerate"] == "true"

    def test_parallel_sweep_is_byte_identical(self, tmp_path):
        sweep_n(small_config(tmp_path / "one", assert_acceptance="false"), workers=1)
        sweep_n(small_config(tmp_path / "two", assert_acceptance="false"), workers=2)
        for name in ("sweep_n.csv", "sweep_n_raw.csv"):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()

    def test_acceptance_bracket(self, tmp_path):
        with pytest.raises(AcceptanceError) as info:
            sweep_n(small_config(tmp_path, slope_bracket_n="100,200"))
        assert info.value.check == "sweep_n slope"

    def test_level_and_horizon_checks(self, tmp_path):
        with pytest.raises(ConfigError):
            sweep_n(small_config(tmp_path, width_levels="1,2,3"))
        with pytest.raises(ConfigError):
            sweep_eps(small_config(tmp_path, eps_levels="0.03,0.02,0.01,0.005"))

    @pytest.mark.slow
    def test_width_slope_in_bracket(self, tmp_path):
        # 单原子数据：SGD 无抽样噪声，D_T 只剩宽度误差
        data = tmp_path / "one_atom.csv"
        data.write_text("2,1\n0.5,1,0.5,1\n", encoding="utf-8")
        cfg = small_config(
            tmp_path,
            data_file=str(data),
            width_levels="16,64,256,1024",
            seeds=",".join(str(s) for s in range(8)),
            T="1",
            eps="0.01",
            record_intervals="10",
            assert_acceptance="false",
        )
        result = sweep_n(cfg)
        low, high = cfg.slope_bracket_n
        assert low <= result.fit.slope <= high
        assert np.all(np.diff(result.aggregate["mean"].to_numpy()) < 0)

    @pytest.mark.slow
    def test_step_slope_in_bracket(self, tmp_path):
        # m = n 且 h = ε：网络与粒子同初值同步长，D_T 只剩 SGD 噪声
        cfg = small_config(
            tmp_path,
            n1="10",
            n2="10",
            oversample_factor="1",
            data_atoms="8",
            seeds=",".join(str(s) for s in range(32)),
            T="1",
            h="0.04",
            record_intervals="5",
            assert_acceptance="false",
        )
        result = sweep_eps(cfg)
        assert np.all(result.raw["h"] == result.raw["eps"])
        low, high = cfg.slope_bracket_eps
        assert low <= result.fit.slope <= high


class TestConvergence:
    def test_already_fitted_network(self, tmp_path):
        cfg = small_config(tmp_path, data_task="constant", rho2="point:0", T="0.5", h="0.05")
        report = convergence_run(cfg)
        assert report.case == "realizable"
        assert report.initial_risk == 0.0 and report.terminal_risk == 0.0
        assert report.success
        frame, _ = read_metric_csv(tmp_path / "convergence.csv")
        assert list(frame.columns) == ["t", "risk", "stationarity", "lip_w1"]

    def test_risk_decreases(self, tmp_path):
        report = convergence_run(small_config(tmp_path, T="1", h="0.05", assert_acceptance="false"))
        assert report.terminal_risk <= report.initial_risk
        assert report.worst_increase <= report.monotone_slack
        assert set(report.checks) == {"terminal risk", "risk monotonicity", "stationarity"}

    def test_slack_and_worst_increase_recorded(self, tmp_path):
        report = convergence_run(small_config(tmp_path, T="1", h="0.05", assert_acceptance="false"))
        _, meta = read_metric_csv(tmp_path / "convergence.csv")
        assert float(meta["worst_increase"]) == pytest.approx(report.worst_increase)
        assert float(meta["monotone_slack"]) == pytest.approx(report.monotone_slack)
        assert {"worst_increase", "monotone_slack"} <= set(report.summary())

    @pytest.mark.slow
    def test_default_convergence_task_passes_acceptance(self, tmp_path):
        cfg = config_from_mapping({"task": "convergence", "output_dir": str(tmp_path)})
        assert cfg.assert_acceptance
        report = convergence_run(cfg)
        assert report.case == "realizable"
        assert report.success
        assert report.terminal_risk <= cfg.risk_tol * report.initial_risk
        assert report.worst_increase <= report.monotone_slack
        ref = int(np.searchsorted(report.times, 1.0 - 1e-12))
        assert report.stationarity[-1] <= cfg.stationarity_ratio * report.stationarity[ref]

    def test_noisy_labels_use_bayes_baseline(self, tmp_path):
        cfg = small_config(tmp_path, data_noise="0.2", data_copies="2", T="0.5", h="0.05", assert_acceptance="false")
        report = convergence_run(cfg)
        assert report.case == "convex"
        assert report.baseline > 0.0

    def test_network_companion(self, tmp_path):
        report = convergence_run(small_config(tmp_path, convergence_network="true", assert_acceptance="false"))
        assert report.network_risk is not None and report.network_gap >= 0.0

    def test_frozen_zero_third_layer(self, tmp_path):
        with pytest.raises(PreconditionError):
            convergence_run(small_config(tmp_path, rho3="point:0"))

    def test_trained_third_layer_needs_headroom(self, tmp_path):
        with pytest.raises(PreconditionError):
            convergence_run(small_config(tmp_path, xi3="1", data_task="constant"))


class TestCrossval:
    def test_small_instance_agrees(self, tmp_path):
        cfg = small_config(tmp_path, T="0.5", h="0.01", picard_grid_n="50", picard_tol="1e-10")
        report = crossval(cfg)
        assert list(report.rows["pair"]) == ["euler-picard", "reduced-particles"]
        assert report.passed
        assert report.distance("reduced-particles") <= 0.1
        assert (tmp_path / "crossval.csv").exists()
        assert report.picard_contracting
        assert report.picard_ratios and report.picard_last_ratio == report.picard_ratios[-1]
        _, meta = read_metric_csv(tmp_path / "crossval.csv")
        assert len(meta["picard_ratios"].split(";")) == len(report.picard_ratios)

    def test_contraction_after_burn_in(self):
        assert picard_contracting([3.0, 1.2, 0.4, 0.2])
        assert not picard_contracting([3.0, 1.2, 0.4, 1.1])
        assert not picard_contracting([0.5, 0.5, float("nan")])
        assert picard_contracting([2.0, 0.5])
        assert not picard_contracting([0.5, 1.5])
        assert picard_contracting([])

    def test_non_contracting_picard_fails_acceptance(self, tmp_path, monkeypatch):
        solve = harness.picard_solve

        def stalled(*args, **kwargs):
            result = solve(*args, **kwargs)
            result.ratios = [0.5, 0.5, 1.05]
            return result

        monkeypatch.setattr(harness, "picard_solve", stalled)
        settings = dict(T="0.5", h="0.01", picard_grid_n="50", picard_tol="1e-10")
        with pytest.raises(AcceptanceError) as info:
            crossval(small_config(tmp_path, **settings))
        assert info.value.check == "picard contraction"
        relaxed = crossval(small_config(tmp_path, assert_acceptance="false", **settings))
        assert not relaxed.picard_contracting and not relaxed.passed

    def test_reduced_pair_skipped_for_slow_rates(self, tmp_path):
        report = crossval(small_config(tmp_path, xi1="0.5", T="0.2", h="0.01", picard_grid_n="20", picard_tol="1e-10"))
        assert list(report.rows["pair"]) == ["euler-picard"]

    def test_rejects_large_instances(self, tmp_path):
        with pytest.raises(ConfigError):
            crossval(small_config(tmp_path, n1="10"))
        with pytest.raises(ConfigError):
            crossval(small_config(tmp_path, T="2"))


class TestPlot:
    def test_columns_file(self, tmp_path):
        couple_run(small_config(tmp_path))
        report = plot_run(small_config(tmp_path, task="plot"), tmp_path / "coupling.csv")
        lines = report.outputs[0].read_text().splitlines()
        assert report.outputs[0].name == "coupling.dat"
        assert lines[0].startswith("# task=couple")
        assert lines[1] == "# t dev_w1 dev_w2 dev_w3 D_t n1 n2 m1 m2 eps seed"
        assert len(lines) == 2 + 6
        assert lines[2].split()[0] == "0.0"

    def test_needs_input(self, tmp_path):
        with pytest.raises(ConfigError):
            run_task(small_config(tmp_path, task="plot"))


class TestCli:
    def test_success(self, tmp_path):
        path = write_config(tmp_path / "run.cfg")
        assert main(["couple", "--config", str(path), "--out", str(tmp_path / "out")]) == 0
        assert (tmp_path / "out" / "coupling.csv").exists()

    def test_train_save(self, tmp_path):
        path = write_config(tmp_path / "run.cfg")
        code = main(["train", "--config", str(path), "--out", str(tmp_path), "--save", str(tmp_path / "w.csv")])
        assert code == 0 and (tmp_path / "w.csv").exists()

    def test_validation_failure(self, tmp_path):
        path = write_config(tmp_path / "bad.cfg", bogus=1)
        assert main(["couple", "--config", str(path)]) == ExitCode.VALIDATION
        assert main(["couple", "--config", str(tmp_path / "missing.cfg")]) == ExitCode.VALIDATION

    def test_runtime_failure(self, tmp_path):
        path = write_config(tmp_path / "run.cfg", picard_max_iter=1, picard_tol=1e-14, T=0.5)
        assert main(["crossval", "--config", str(path), "--out", str(tmp_path)]) == ExitCode.RUNTIME

    def test_acceptance_failure(self, tmp_path):
        path = write_config(tmp_path / "run.cfg", seeds="0,1", width_levels="1,2,3,4", slope_bracket_n="100,200")
        assert main(["sweep_n", "--config", str(path), "--out", str(tmp_path)]) == ExitCode.ACCEPTANCE
