"""实验编排：单次运行（train / mf / couple）、宽度与步长扫描、全局收敛实验、积分器交叉验证、绘图列导出。

每个任务只依赖 ExperimentConfig；相同配置与 seeds 产出逐字节相同的 CSV。
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from .config import ExperimentConfig, TaskKind
from .data import (
    DataSpec,
    DataStream,
    bayes_risk,
    load_data_spec,
    make_grid_task,
    make_noisy_task,
)
from .errors import (
    AcceptanceError,
    ConfigError,
    PreconditionError,
)
from .finite_net import population_risk, train
from .math_core import (
    ConstantRate,
    ModelSpec,
    ValidationReport,
    build_model,
    certified_constants,
    validate_regularity,
)
from .metrics import (
    LipschitzDiagnostic,
    MetricName,
    read_metric_csv,
    risk_trajectory,
    stationarity_monitor,
    coupling_error_envelope,
    w1_lipschitz_diagnostic,
    write_metric_csv,
)
from . import metrics
from .mf_system import (
    euler_evolve,
    picard_solve,
    reduced_evolve,
    reduced_particle_system,
    trajectory_distance,
)
from .models import NetworkParams, ParticleSystem
from .neuronal_embedding import IIDEmbedding, Law, LawKind, couple, run_coupled, sample_embedding
from .recorder import horizon_steps, is_multiple, make_recorder, matched_steps, record_steps
from .snapshots import save_params
from .stats import SlopeFit, aggregate_by_level, fit_loglog
from .workers import PointError, PoolConfig, run_points

logger = structlog.get_logger(__name__)

# 交叉验证只针对小规模实例
CROSSVAL_MAX_PARTICLES = 16
CROSSVAL_MAX_T = 1.0
# Picard 前若干次迭代的比值不计入压缩检查
PICARD_BURN_IN = 2
# w1 Lipschitz 诊断只取前若干个粒子，点对数按平方增长
LIPSCHITZ_SAMPLE = 128
MIN_SWEEP_LEVELS = 4
N_AXIS = "n_min"
EPS_AXIS = "eps"

_PROVISO_PREFIX = "holds only under"


@dataclass(slots=True)
class TaskReport:
    task: TaskKind
    outputs: List[Path] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)


# ---------------------------- 构造 ----------------------------


def build_data(cfg: ExperimentConfig) -> DataSpec:
    if cfg.data_file:
        return load_data_spec(cfg.data_file)
    if cfg.data_noise > 0:
        return make_noisy_task(
            cfg.data_atoms, cfg.data_task, cfg.data_noise, cfg.data_copies, cfg.data_constant, cfg.data_scale
        )
    return make_grid_task(cfg.data_atoms, cfg.data_task, cfg.data_constant, cfg.data_scale)


def build_embedding(cfg: ExperimentConfig, seed: int, dim_d: int) -> IIDEmbedding:
    return IIDEmbedding(Law.parse(cfg.rho1), Law.parse(cfg.rho2), Law.parse(cfg.rho3), seed, dim_d)


def check_model(model: ModelSpec, spec: DataSpec) -> ValidationReport:
    """计算开始前的正则性检查。

    ∂2𝓛 无界（平方损失）的条款在有限支撑数据上以 |Y| ≤ K 的附加条件放行，并记录警告。
    """

    report = validate_regularity(model, spec)
    blocking = []
    for result in report.failures():
        if result.note.startswith(_PROVISO_PREFIX):
            logger.warning(
                "regularity.proviso",
                clause=result.clause_id,
                note=result.note,
                label_sup=float(np.max(np.abs(spec.ys))),
            )
            continue
        blocking.append(result)
    ValidationReport(blocking).raise_if_failed()
    return report


def prepare(cfg: ExperimentConfig) -> Tuple[DataSpec, ModelSpec]:
    spec = build_data(cfg)
    model = build_model(cfg)
    check_model(model, spec)
    # 嵌入构造会拒绝无界的 rho2 / rho3
    build_embedding(cfg, cfg.seeds[0], spec.dim_d)
    return spec, model


def _out(cfg: ExperimentConfig, name: str) -> Path:
    return Path(cfg.output_dir) / name


# ---------------------------- 单次运行 ----------------------------


def train_run(cfg: ExperimentConfig, save: Optional[Path] = None) -> TaskReport:
    spec, model = prepare(cfg)
    seed = cfg.seeds[0]
    e = build_embedding(cfg, seed, spec.dim_d)
    W0 = NetworkParams(*sample_embedding(e, cfg.n1, cfg.n2))
    # 只需要网络输出，快照保留一个下标即可
    rec = make_recorder(cfg.T, cfg.eps, cfg.record_intervals, keep=(1, 1), outputs_for=(spec, model))
    result = train(W0, DataStream(spec, seed), cfg.T, cfg.eps, model, rec)
    view = rec.view()
    frame = pd.DataFrame({MetricName.TIME.value: view.times, MetricName.RISK.value: risk_trajectory(view, spec, model)})
    path = _out(cfg, "train.csv")
    write_metric_csv(path, frame, {**cfg.metadata(), "seed": seed, "dt": cfg.eps})
    report = TaskReport(TaskKind.TRAIN, [path], {"steps": result.samples_used, "risk_T": float(frame["risk"].iloc[-1])})
    if save is not None:
        save_params(result.params, save)
        report.outputs.append(Path(save))
    return report


def mf_run(cfg: ExperimentConfig) -> TaskReport:
    spec, model = prepare(cfg)
    seed = cfg.seeds[0]
    e = build_embedding(cfg, seed, spec.dim_d)
    P0 = ParticleSystem(*sample_embedding(e, cfg.m1, cfg.m2))
    rec = make_recorder(cfg.T, cfg.h, cfg.record_intervals, keep=(1, 1), outputs_for=(spec, model))
    result = euler_evolve(P0, spec, model, cfg.T, cfg.h, rec)
    view = rec.view()
    frame = pd.DataFrame({MetricName.TIME.value: view.times, MetricName.RISK.value: risk_trajectory(view, spec, model)})
    cert = result.certificate
    meta = {
        **cfg.metadata(),
        "seed": seed,
        "dt": cfg.h,
        "sup_w2": cert.observed_w2,
        "sup_w3": cert.observed_w3,
        "bound_w2": cert.bound_w2,
        "bound_w3": cert.bound_w3,
    }
    path = _out(cfg, "mf.csv")
    write_metric_csv(path, frame, meta)
    snap = _out(cfg, "mf_final.csv")
    save_params(result.particles, snap)
    return TaskReport(TaskKind.MF, [path, snap], {"steps": result.steps, "risk_T": float(frame["risk"].iloc[-1])})


def couple_run(cfg: ExperimentConfig) -> TaskReport:
    spec, model = prepare(cfg)
    seed = cfg.seeds[0]
    e = build_embedding(cfg, seed, spec.dim_d)
    pair = couple(e, cfg.n1, cfg.n2, cfg.m1, cfg.m2)
    record = run_coupled(
        pair,
        spec,
        model,
        cfg.T,
        cfg.eps,
        cfg.h,
        data_seed=seed,
        record_intervals=cfg.record_intervals,
        concurrent_legs=cfg.concurrent_legs,
    )
    meta = {**cfg.metadata(), "seed": seed, "dt": cfg.eps}
    path = _out(cfg, "coupling.csv")
    write_metric_csv(path, record.to_frame(), meta)
    gap = metrics.test_function_gap(record.net_view, record.mf_view, spec, model)
    gap_path = _out(cfg, "gap.csv")
    write_metric_csv(
        gap_path,
        pd.DataFrame(gap.per_time, columns=[MetricName.TIME.value, MetricName.GAP.value]),
        {**meta, "psi": gap.psi_name},
    )
    logger.info("couple.done", D_T=record.D_T, sup_gap=gap.sup_gap)
    return TaskReport(TaskKind.COUPLE, [path, gap_path], {"D_T": record.D_T, "sup_gap": gap.sup_gap})


# ---------------------------- 扫描 ----------------------------


@dataclass(slots=True)
class SweepPoint:
    cfg: ExperimentConfig
    axis: str  # "n_min" | "eps"
    level: float
    seed: int


def _point_geometry(point: SweepPoint) -> Tuple[int, float, float]:
    cfg = point.cfg
    if point.axis == N_AXIS:
        return int(point.level), cfg.eps, cfg.h
    # 粒子参考的步长不超过当前 ε，记录时刻保持重合
    return cfg.n1, float(point.level), min(cfg.h, float(point.level))


def run_sweep_point(point: SweepPoint) -> Dict[str, Any]:
    """单个 (level, seed) 扫描点：模块级函数，可被工作进程 pickle。"""

    cfg = point.cfg
    spec = build_data(cfg)
    model = build_model(cfg)
    n, eps, h = _point_geometry(point)
    m = cfg.oversample_factor * n
    e = build_embedding(cfg, point.seed, spec.dim_d)
    pair = couple(e, n, n, m, m)
    record = run_coupled(
        pair,
        spec,
        model,
        cfg.T,
        eps,
        h,
        data_seed=point.seed,
        record_intervals=cfg.record_intervals,
        concurrent_legs=cfg.concurrent_legs,
    )
    logger.info("sweep.point", axis=point.axis, level=point.level, seed=point.seed, D_T=record.D_T)
    return {
        point.axis: point.level,
        "seed": point.seed,
        "D_T": record.D_T,
        "n1": n,
        "n2": n,
        "m1": m,
        "m2": m,
        "eps": eps,
        "h": h,
    }


@dataclass(slots=True)
class SweepResult:
    axis: str
    raw: pd.DataFrame
    aggregate: pd.DataFrame
    fit: Optional[SlopeFit]
    outputs: List[Path] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return self.fit is None

    def summary(self) -> Dict[str, Any]:
        if self.fit is None:
            return {"axis": self.axis, "degenerate": True}
        return {"axis": self.axis, "slope": self.fit.slope, "stderr": self.fit.stderr}


def _raw_frame(rows: Sequence[Tuple[Any, Dict[str, Any]]], axis: str) -> pd.DataFrame:
    columns = [axis] + [c for c in ("seed", "D_T", "n1", "n2", "m1", "m2", "eps", "h") if c != axis]
    frame = pd.DataFrame([row for _, row in rows], columns=columns)
    return frame.sort_values([axis, "seed"], kind="mergesort").reset_index(drop=True)


def _sweep_levels(cfg: ExperimentConfig, axis: str) -> List[float]:
    levels = cfg.width_levels if axis == N_AXIS else cfg.eps_levels
    if len(set(levels)) < MIN_SWEEP_LEVELS:
        raise ConfigError(f"sweep over {axis} needs >= {MIN_SWEEP_LEVELS} distinct levels, got {levels}")
    if any(level <= 0 for level in levels):
        raise ConfigError(f"sweep levels must be positive, got {levels}")
    return sorted(set(levels))


def _run_sweep(cfg: ExperimentConfig, axis: str, name: str, workers: Optional[int] = None) -> SweepResult:
    spec, model = prepare(cfg)
    levels = _sweep_levels(cfg, axis)
    points = []
    for level in levels:
        for seed in sorted(set(cfg.seeds)):
            point = SweepPoint(cfg, axis, level, seed)
            _, eps, h = _point_geometry(point)
            if not is_multiple(cfg.T, eps):
                raise ConfigError(f"T = {cfg.T} is not a multiple of eps = {eps}")
            matched_steps(record_steps(horizon_steps(cfg.T, eps), cfg.record_intervals), eps, h)
            points.append(((level, seed), point))
    raw_path = _out(cfg, f"{name}_raw.csv")
    meta = {**cfg.metadata(), "axis": axis}
    logger.info("sweep.start", axis=axis, levels=levels, seeds=len(cfg.seeds), workers=workers or cfg.workers)
    try:
        rows = run_points(run_sweep_point, points, PoolConfig(workers=workers or cfg.workers))
    except PointError as exc:
        write_metric_csv(raw_path, _raw_frame(exc.completed, axis), {**meta, "partial": "true"})
        logger.error("sweep.aborted", axis=axis, failed=exc.key, completed=len(exc.completed))
        raise
    raw = _raw_frame(rows, axis)
    write_metric_csv(raw_path, raw, meta)

    agg = aggregate_by_level(raw, axis)
    K = certified_constants(model).K
    agg["envelope"] = [
        coupling_error_envelope(*_envelope_args(cfg, axis, level), cfg.T, cfg.bound_delta, K) for level in agg[axis]
    ]
    fit: Optional[SlopeFit] = None
    if np.all(agg["mean"].to_numpy() == 0.0):
        agg["residual"] = math.nan
        logger.warning("sweep.degenerate", axis=axis, reason="all D_T are zero; slope undefined")
    else:
        fit = fit_loglog(agg[axis].to_numpy(dtype=np.float64), agg["mean"].to_numpy())
        agg["residual"] = fit.residuals
    agg_meta = dict(meta)
    if fit is None:
        agg_meta["degenerate"] = "true"
    else:
        agg_meta.update(slope=repr(fit.slope), stderr=repr(fit.stderr))
    agg_path = _out(cfg, f"{name}.csv")
    write_metric_csv(agg_path, agg, agg_meta)
    result = SweepResult(axis, raw, agg, fit, [raw_path, agg_path])
    logger.info("sweep.done", **result.summary())
    if cfg.assert_acceptance and fit is not None:
        bracket = cfg.slope_bracket_n if axis == N_AXIS else cfg.slope_bracket_eps
        if not bracket[0] <= fit.slope <= bracket[1]:
            raise AcceptanceError(
                f"{name} slope {fit.slope:.3f} outside [{bracket[0]}, {bracket[1]}]", check=f"{name} slope"
            )
        if not fit.stderr < cfg.slope_stderr_max:
            raise AcceptanceError(
                f"{name} slope stderr {fit.stderr:.3f} >= {cfg.slope_stderr_max}", check=f"{name} stderr"
            )
    return result


def _envelope_args(cfg: ExperimentConfig, axis: str, level: float) -> Tuple[float, int, int]:
    if axis == N_AXIS:
        return cfg.eps, int(level), int(level)
    return float(level), cfg.n1, cfg.n1


def sweep_n(cfg: ExperimentConfig, workers: Optional[int] = None) -> SweepResult:
    """宽度扫描：n1 = n2 = n，粒子参考 m = oversample_factor·n，拟合 log D_T 对 log n 的斜率。"""

    return _run_sweep(cfg, N_AXIS, "sweep_n", workers)


def sweep_eps(cfg: ExperimentConfig, workers: Optional[int] = None) -> SweepResult:
    """步长扫描：宽度固定为 n1，拟合 log D_T 对 log ε 的斜率。"""

    return _run_sweep(cfg, EPS_AXIS, "sweep_eps", workers)


# ---------------------------- 全局收敛 ----------------------------


@dataclass(slots=True)
class ConvergenceReport:
    case: str
    times: np.ndarray
    risk: np.ndarray
    stationarity: np.ndarray
    baseline: float
    monotone_slack: float
    worst_increase: float
    lipschitz: Optional[LipschitzDiagnostic]
    network_risk: Optional[float] = None
    network_gap: Optional[float] = None
    checks: Dict[str, bool] = field(default_factory=dict)
    outputs: List[Path] = field(default_factory=list)

    @property
    def initial_risk(self) -> float:
        return float(self.risk[0])

    @property
    def terminal_risk(self) -> float:
        return float(self.risk[-1])

    @property
    def success(self) -> bool:
        return all(self.checks.values())

    def summary(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "case": self.case,
            "initial_risk": self.initial_risk,
            "terminal_risk": self.terminal_risk,
            "baseline": self.baseline,
            "monotone_slack": self.monotone_slack,
            "worst_increase": self.worst_increase,
            "success": self.success,
        }
        if self.network_risk is not None:
            out.update(network_risk=self.network_risk, network_gap=self.network_gap)
        return out


def _convergence_case(spec: DataSpec, model: ModelSpec) -> Tuple[str, float]:
    """确定性标签且 ∂2𝓛 = 0 ⇒ 𝓛 = 0 时目标风险为 0（realizable）；否则损失须对第二个变量凸，以 Bayes 风险为目标（convex）。"""

    if spec.label_fn_deterministic and model.loss.zero_grad_implies_zero_loss:
        return "realizable", 0.0
    if model.loss.convex_in_second:
        return "convex", bayes_risk(spec, model.loss)
    raise PreconditionError(
        "global convergence needs deterministic labels with a loss whose zero gradient implies zero loss, "
        "or a loss convex in its second argument"
    )


def _check_third_layer(cfg: ExperimentConfig, spec: DataSpec, model: ModelSpec, P0: ParticleSystem) -> None:
    xi3 = model.schedule.rates(0.0)[2]
    if xi3 == 0.0:
        if Law.parse(cfg.rho3).sup == 0.0:
            raise PreconditionError(f"xi3 = 0 needs w3 initial values that are nonzero with positive probability, rho3 = {cfg.rho3}")
        return
    initial = population_risk(*P0.weights(), spec, model)
    yhat0 = model.phi3.value(np.zeros(spec.n_atoms))
    reference = float(np.dot(spec.ps, model.loss.value(spec.ys, yhat0)))
    if not initial < reference:
        raise PreconditionError(
            f"trained third layer needs initial risk {initial:.6g} below the zero-output risk {reference:.6g}"
        )


def _safe_K_T(model: ModelSpec, T: float) -> float:
    try:
        return certified_constants(model).K_T(T)
    except OverflowError:
        return math.inf


def _reference_index(times: np.ndarray, t_ref: float = 1.0) -> int:
    idx = int(np.searchsorted(times, t_ref - 1e-12))
    return min(max(idx, 1 if times.size > 1 else 0), times.size - 1)


def convergence_run(cfg: ExperimentConfig) -> ConvergenceReport:
    """在粒子系统上长时间积分，检查风险收敛、单调性与平稳性。"""

    spec, model = prepare(cfg)
    case, baseline = _convergence_case(spec, model)
    seed = cfg.seeds[0]
    e = build_embedding(cfg, seed, spec.dim_d)
    pair = None
    if cfg.convergence_network:
        if not is_multiple(cfg.T, cfg.eps):
            raise ConfigError(f"T = {cfg.T} is not a multiple of eps = {cfg.eps}")
        pair = couple(e, cfg.n1, cfg.n2, cfg.m1, cfg.m2)
        P0 = pair.particles
        net_steps = record_steps(horizon_steps(cfg.T, cfg.eps), cfg.record_intervals)
        mf_rec = make_recorder(cfg.T, cfg.h, steps=matched_steps(net_steps, cfg.eps, cfg.h), outputs_for=(spec, model))
    else:
        P0 = ParticleSystem(*sample_embedding(e, cfg.m1, cfg.m2))
        mf_rec = make_recorder(cfg.T, cfg.h, cfg.record_intervals, outputs_for=(spec, model))
    _check_third_layer(cfg, spec, model, P0)
    logger.info("convergence.start", case=case, m1=cfg.m1, m2=cfg.m2, T=cfg.T, h=cfg.h)

    euler_evolve(P0, spec, model, cfg.T, cfg.h, mf_rec)
    view = mf_rec.view()
    risk = risk_trajectory(view, spec, model)
    stat = stationarity_monitor(view, spec, model)
    lip = None
    if len(view) >= 2 and view.w1.shape[1] >= 2:
        lip = w1_lipschitz_diagnostic(view.times, view.w1[:, :LIPSCHITZ_SAMPLE])
    slack = 2.0 * cfg.h * _safe_K_T(model, cfg.T)
    worst = float(np.max(np.diff(risk))) if risk.size > 1 else 0.0
    ref = _reference_index(view.times)

    report = ConvergenceReport(
        case=case,
        times=view.times,
        risk=risk,
        stationarity=stat,
        baseline=baseline,
        monotone_slack=slack,
        worst_increase=worst,
        lipschitz=lip,
    )
    excess0, excessT = report.initial_risk - baseline, report.terminal_risk - baseline
    report.checks = {
        "terminal risk": excessT <= cfg.risk_tol * max(excess0, 0.0),
        "risk monotonicity": worst <= slack,
        "stationarity": bool(stat[-1] <= cfg.stationarity_ratio * stat[ref]),
    }

    if pair is not None:
        net_rec = make_recorder(cfg.T, cfg.eps, steps=net_steps, keep=(1, 1), outputs_for=(spec, model))
        train(pair.net, DataStream(spec, seed), cfg.T, cfg.eps, model, net_rec)
        net_view = net_rec.view()
        report.network_risk = float(risk_trajectory(net_view, spec, model)[-1])
        report.network_gap = metrics.test_function_gap(net_view, view, spec, model).sup_gap

    frame = pd.DataFrame(
        {
            MetricName.TIME.value: view.times,
            MetricName.RISK.value: risk,
            MetricName.STATIONARITY.value: stat,
        }
    )
    if lip is not None:
        frame["lip_w1"] = lip.running_lip_in_init
    meta = {
        **cfg.metadata(),
        "seed": seed,
        "dt": cfg.h,
        **report.summary(),
    }
    path = _out(cfg, "convergence.csv")
    write_metric_csv(path, frame, meta)
    report.outputs.append(path)
    logger.info("convergence.done", **report.summary(), checks=report.checks)
    if cfg.assert_acceptance:
        for check, passed in report.checks.items():
            if not passed:
                detail = f" (worst increase {worst:.3e}, slack {slack:.3e})" if check == "risk monotonicity" else ""
                raise AcceptanceError(f"convergence check failed: {check}{detail}", check=check)
    return report


# ---------------------------- 交叉验证 ----------------------------


@dataclass(slots=True)
class CrossvalReport:
    rows: pd.DataFrame  # pair, distance, tolerance, passed
    picard_iterations: int
    picard_last_ratio: float
    picard_ratios: List[float] = field(default_factory=list)
    picard_contracting: bool = True
    outputs: List[Path] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.rows["passed"].all()) and self.picard_contracting

    def distance(self, pair: str) -> float:
        return float(self.rows.loc[self.rows["pair"] == pair, "distance"].iloc[0])

    def summary(self) -> Dict[str, Any]:
        return {
            **{row.pair: row.distance for row in self.rows.itertuples()},
            "picard_iterations": self.picard_iterations,
            "picard_last_ratio": self.picard_last_ratio,
            "picard_contracting": self.picard_contracting,
            "passed": self.passed,
        }


def picard_contracting(ratios: Sequence[float], burn_in: int = PICARD_BURN_IN) -> bool:
    """去掉前 burn_in 个比值后余下的比值全部 < 1；比值不足时至少检查最后一个。"""

    if not ratios:
        return True
    tail = list(ratios[burn_in:]) or [ratios[-1]]
    return all(math.isfinite(r) and r < 1.0 for r in tail)


def _reducible(cfg: ExperimentConfig, model: ModelSpec) -> bool:
    sched = model.schedule
    rates_ok = all(isinstance(xi, ConstantRate) and xi.value == 1.0 for xi in (sched.xi1, sched.xi2))
    laws_ok = all(Law.parse(text).kind is not LawKind.NORMAL for text in (cfg.rho2, cfg.rho3))
    return rates_ok and laws_ok


def _reduced_distance(cfg: ExperimentConfig, e: IIDEmbedding, spec: DataSpec, model: ModelSpec) -> float:
    u_grid = sample_embedding(e, cfg.reduced_points, 1)[0]
    u2 = e.rho2.atoms(cfg.reduced_u2_atoms)
    u3 = e.rho3.atoms(cfg.reduced_u3_atoms)
    reduced = reduced_evolve(
        u_grid, u2, u3, spec, model, cfg.T, cfg.h, cfg.record_intervals, cfg.history_limit_mb
    )
    matched = reduced_particle_system(u_grid, u2, u3)
    rec = make_recorder(cfg.T, cfg.h, cfg.record_intervals)
    final = euler_evolve(matched, spec, model, cfg.T, cfg.h, rec).particles
    view = rec.view()
    A2, G, n3 = u2.size, u_grid.shape[0], u3.size
    n_t = len(view)
    dev1 = np.linalg.norm(view.w1.reshape(n_t, G, A2, -1) - reduced.w1[:, :, None, :], axis=-1)
    dev3 = np.abs(view.w3.reshape(n_t, n3, A2) - reduced.w3[:, :, None])
    expected_w2 = matched.w2 + np.repeat(np.repeat(reduced.coupling, A2, axis=0), A2, axis=1)
    return max(float(np.max(dev1)), float(np.max(dev3)), float(np.max(np.abs(final.w2 - expected_w2))))


def crossval(cfg: ExperimentConfig) -> CrossvalReport:
    """Euler、Picard 与约化动力学在同一小实例上的两两距离。"""

    if max(cfg.m1, cfg.m2) > CROSSVAL_MAX_PARTICLES or cfg.T > CROSSVAL_MAX_T:
        raise ConfigError(
            f"crossval needs m1, m2 <= {CROSSVAL_MAX_PARTICLES} and T <= {CROSSVAL_MAX_T}, "
            f"got m=({cfg.m1}, {cfg.m2}), T={cfg.T}"
        )
    spec, model = prepare(cfg)
    e = build_embedding(cfg, cfg.seeds[0], spec.dim_d)
    P0 = ParticleSystem(*sample_embedding(e, cfg.m1, cfg.m2))

    rec = make_recorder(cfg.T, cfg.h, cfg.record_intervals)
    euler_evolve(P0, spec, model, cfg.T, cfg.h, rec)
    view = rec.view()
    picard = picard_solve(P0, spec, model, cfg.T, cfg.picard_grid_n, cfg.picard_tol, cfg.picard_max_iter)
    d_ep = trajectory_distance(view.w1, view.w2, view.w3, *picard.at(view.times))
    rows = [("euler-picard", d_ep, 5.0 * (cfg.h + cfg.T / cfg.picard_grid_n))]

    if _reducible(cfg, model):
        rows.append(("reduced-particles", _reduced_distance(cfg, e, spec, model), 10.0 * cfg.h))
    else:
        logger.info("crossval.reduced_skipped", reason="needs xi1 = xi2 = 1 and atomic rho2, rho3")

    frame = pd.DataFrame(rows, columns=["pair", "distance", "tolerance"])
    frame["passed"] = frame["distance"] <= frame["tolerance"]
    last_ratio = picard.ratios[-1] if picard.ratios else math.nan
    report = CrossvalReport(
        frame, picard.iterations, last_ratio, list(picard.ratios), picard_contracting(picard.ratios)
    )
    path = _out(cfg, "crossval.csv")
    write_metric_csv(
        path,
        frame,
        {
            **cfg.metadata(),
            "picard_grid_n": cfg.picard_grid_n,
            "picard_iterations": picard.iterations,
            "picard_ratios": ";".join(f"{r:.6g}" for r in picard.ratios),
        },
    )
    report.outputs.append(path)
    logger.info("crossval.done", **report.summary())
    if cfg.assert_acceptance:
        for row in frame.itertuples():
            if not row.passed:
                raise AcceptanceError(
                    f"{row.pair} distance {row.distance:.3e} exceeds tolerance {row.tolerance:.3e}", check=row.pair
                )
        if not report.picard_contracting:
            raise AcceptanceError(
                f"Picard ratios after burn-in are not all below 1: {report.picard_ratios}", check="picard contraction"
            )
    return report


# ---------------------------- 绘图列 ----------------------------


def plot_columns(input_path: Path, output_path: Path) -> Path:
    """结果 CSV → 空白分隔的 gnuplot 列文件，首行注释给出列名。"""

    frame, meta = read_metric_csv(input_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with output_path.open("w", encoding="utf-8", newline="") as fh:
        if meta:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        fh.write("# " + " ".join(str(c) for c in frame.columns) + "\n")
        frame.to_csv(fh, sep=" ", header=False, index=False, lineterminator="\n")
    return output_path


def plot_run(cfg: ExperimentConfig, input_path: Optional[Path] = None) -> TaskReport:
    source = input_path or (Path(cfg.plot_input) if cfg.plot_input else None)
    if source is None:
        raise ConfigError("plot needs an input CSV (plot_input or --input)")
    target = plot_columns(Path(source), _out(cfg, Path(source).stem + ".dat"))
    return TaskReport(TaskKind.PLOT, [target], {"input": str(source)})


# ---------------------------- 分派 ----------------------------


def _as_report(task: TaskKind, result: Any) -> TaskReport:
    if isinstance(result, TaskReport):
        return result
    return TaskReport(task, list(result.outputs), result.summary())


def run_task(
    cfg: ExperimentConfig,
    *,
    workers: Optional[int] = None,
    save: Optional[Path] = None,
    input_path: Optional[Path] = None,
) -> TaskReport:
    handlers: Dict[TaskKind, Callable[[], Any]] = {
        TaskKind.TRAIN: lambda: train_run(cfg, save),
        TaskKind.MF: lambda: mf_run(cfg),
        TaskKind.COUPLE: lambda: couple_run(cfg),
        TaskKind.SWEEP_N: lambda: sweep_n(cfg, workers),
        TaskKind.SWEEP_EPS: lambda: sweep_eps(cfg, workers),
        TaskKind.CONVERGENCE: lambda: convergence_run(cfg),
        TaskKind.CROSSVAL: lambda: crossval(cfg),
        TaskKind.PLOT: lambda: plot_run(cfg, input_path),
    }
    return _as_report(cfg.task, handlers[cfg.task]())
