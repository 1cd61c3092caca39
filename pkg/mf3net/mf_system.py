"""MF 极限的粒子 ODE：漂移泛函、显式 Euler、Picard 不动点迭代、约化动力学与先验界监控。

粒子平均代替对 (Ω1, Ω2) 的期望；对数据的期望在有限支撑上精确计算，因此整个系统是确定性的。
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import psutil
import structlog

from .data import DataSpec, expect_values
from .errors import (
    ConfigError,
    IntegratorStepError,
    MemoryGuardError,
    NonConvergenceError,
    StructuralError,
)
from .finite_net import backward_batch
from .math_core import ConstantRate, ModelSpec, prior_speed
from .models import ParticleSystem
from .recorder import TrajectoryRecorder, TrajectoryView, horizon_steps, make_recorder

logger = structlog.get_logger(__name__)

MAX_EULER_STEP = 0.1
DEFAULT_HISTORY_LIMIT_MB = 512.0


@dataclass(slots=True)
class DriftField:
    """Δ1 (m1, d)、Δ2 (m1, m2)、Δ3 (m2,)。不含学习率，符号由积分器施加。"""

    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray


def drift_arrays(
    w1: np.ndarray, w2: np.ndarray, w3: np.ndarray, spec: DataSpec, model: ModelSpec
) -> DriftField:
    if w1.shape[1] != spec.dim_d:
        raise StructuralError(f"particle input dim {w1.shape[1]} != data dim {spec.dim_d}")
    bwd = backward_batch(w1, w2, w3, spec.xs, spec.ys, model)
    fwd = bwd.forward
    m2 = w3.shape[0]
    # 逐原子检查有限性，之后把概率并入 Δ2^H 直接做 einsum
    d3 = expect_values(spec, bwd.c[:, None] * fwd.act2, layer="w3")
    expect_values(spec, bwd.d2H, layer="w2")
    pd2H = spec.ps[:, None] * bwd.d2H
    d2 = np.einsum("aj,ak->jk", fwd.act1, pd2H)
    back = np.einsum("ak,jk->aj", pd2H, w2) / m2
    d1 = np.einsum("aj,ad->jd", back * model.phi1.derivative(fwd.pre1), spec.xs)
    return DriftField(d1=d1, d2=d2, d3=d3)


def drift(P: ParticleSystem, spec: DataSpec, model: ModelSpec) -> DriftField:
    return drift_arrays(P.w1, P.w2, P.w3, spec, model)


# ---------------------------- 先验界 ----------------------------


@dataclass(slots=True)
class PriorBoundCertificate:
    """⦀W⦀_t 的先验界：bound_w3 = W0 + K·T，bound_w2 = W0 + K·T·(W0 + K·T)。"""

    T: float
    K: float
    w0_norm: float
    bound_w3: float
    bound_w2: float
    observed_w3: float
    observed_w2: float
    slack: float

    @property
    def holds(self) -> bool:
        return self.observed_w3 <= self.bound_w3 + self.slack and self.observed_w2 <= self.bound_w2 + self.slack


class BoundMonitor:
    """逐步跟踪 sup|w2|、sup|w3| 的运行最大值，越界（超出 10·h·K）即报错。"""

    __slots__ = ("K", "w0_norm", "slack", "observed_w2", "observed_w3", "t")

    def __init__(self, model: ModelSpec, w2_sup: float, w3_sup: float, h: float) -> None:
        k3, k2 = prior_speed(model)
        self.K = max(k3, k2)
        self.w0_norm = max(w2_sup, w3_sup)
        self.slack = 10.0 * h * self.K if math.isfinite(self.K) else math.inf
        self.observed_w2 = w2_sup
        self.observed_w3 = w3_sup
        self.t = 0.0

    def bounds(self, t: float):
        grow = self.K * t if self.K > 0 else 0.0
        return self.w0_norm + grow * (self.w0_norm + grow), self.w0_norm + grow

    def observe(self, t: float, w2_sup: float, w3_sup: float) -> None:
        self.t = t
        self.observed_w2 = max(self.observed_w2, w2_sup)
        self.observed_w3 = max(self.observed_w3, w3_sup)
        if not math.isfinite(self.K):
            return
        bound_w2, bound_w3 = self.bounds(t)
        if self.observed_w3 > bound_w3 + self.slack or self.observed_w2 > bound_w2 + self.slack:
            raise IntegratorStepError(
                f"a priori bound violated at t={t:.6g}: sup|w3|={self.observed_w3:.6g} "
                f"(bound {bound_w3:.6g}), sup|w2|={self.observed_w2:.6g} (bound {bound_w2:.6g}); "
                "reduce the step size"
            )

    def certificate(self) -> PriorBoundCertificate:
        bound_w2, bound_w3 = self.bounds(self.t)
        return PriorBoundCertificate(
            T=self.t,
            K=self.K,
            w0_norm=self.w0_norm,
            bound_w3=bound_w3,
            bound_w2=bound_w2,
            observed_w3=self.observed_w3,
            observed_w2=self.observed_w2,
            slack=self.slack,
        )


def _sup(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


# ---------------------------- 显式 Euler ----------------------------


@dataclass(slots=True)
class EulerResult:
    particles: ParticleSystem
    certificate: PriorBoundCertificate
    recorder: Optional[TrajectoryRecorder]
    steps: int


def _check_step(h: float, T: float) -> None:
    if not (h > 0 and h <= MAX_EULER_STEP):
        raise ConfigError(f"Euler step h must lie in (0, {MAX_EULER_STEP}], got {h}")
    if T < 0:
        raise ConfigError(f"T must be nonnegative, got {T}")


def euler_evolve(
    P0: ParticleSystem,
    spec: DataSpec,
    model: ModelSpec,
    T: float,
    h: float,
    recorder: Optional[TrajectoryRecorder] = None,
) -> EulerResult:
    """P ← P − h·ξ(t)⊙drift(P)，t_k = k·h；每步核对先验界。"""

    _check_step(h, T)
    steps = horizon_steps(T, h)
    w1, w2, w3 = (np.array(w, copy=True) for w in P0.weights())
    monitor = BoundMonitor(model, _sup(w2), _sup(w3), h)
    if recorder is not None:
        recorder.record(0, w1, w2, w3)
    for k in range(steps):
        xi1, xi2, xi3 = model.schedule.rates(k * h)
        if xi1 or xi2 or xi3:
            D = drift_arrays(w1, w2, w3, spec, model)
            if xi1:
                w1 -= (h * xi1) * D.d1
            if xi2:
                w2 -= (h * xi2) * D.d2
            if xi3:
                w3 -= (h * xi3) * D.d3
        monitor.observe((k + 1) * h, _sup(w2), _sup(w3))
        if recorder is not None:
            recorder.record(k + 1, w1, w2, w3)
    logger.debug("euler.done", steps=steps, h=h, m1=P0.m1, m2=P0.m2)
    return EulerResult(
        particles=ParticleSystem(w1, w2, w3, t=steps * h),
        certificate=monitor.certificate(),
        recorder=recorder,
        steps=steps,
    )


# ---------------------------- Picard 迭代 ----------------------------


def trajectory_distance(a1, a2, a3, b1, b2, b3) -> float:
    """‖·‖_T：时间与下标上 |Δw1|（欧氏范数）、|Δw2|、|Δw3| 的最大值。"""

    dev1 = float(np.max(np.linalg.norm(a1 - b1, axis=-1))) if a1.size else 0.0
    return max(dev1, _sup(a2 - b2), _sup(a3 - b3))


@dataclass(slots=True)
class PicardResult:
    """不动点轨迹：times (G+1,) 上的 w1 (G+1, m1, d)、w2 (G+1, m1, m2)、w3 (G+1, m2)。"""

    times: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    iterations: int
    distances: List[float] = field(default_factory=list)
    ratios: List[float] = field(default_factory=list)
    certificate: Optional[PriorBoundCertificate] = None

    def at(self, times: Sequence[float]):
        """分段线性插值到给定时刻，返回 (w1, w2, w3) 各带时间轴。"""

        times = np.asarray(times, dtype=np.float64)
        T = float(self.times[-1])
        if np.any(times < -1e-12) or np.any(times > T * (1 + 1e-12) + 1e-12):
            raise StructuralError(f"requested times outside [0, {T}]")
        if self.times.size == 1:
            reps = times.size
            return (
                np.repeat(self.w1, reps, axis=0),
                np.repeat(self.w2, reps, axis=0),
                np.repeat(self.w3, reps, axis=0),
            )
        pos = np.clip(times / (self.times[1] - self.times[0]), 0.0, self.times.size - 1)
        lo = np.minimum(np.floor(pos).astype(np.int64), self.times.size - 2)
        frac = pos - lo

        def interp(a: np.ndarray) -> np.ndarray:
            shape = (-1,) + (1,) * (a.ndim - 1)
            f = frac.reshape(shape)
            return (1.0 - f) * a[lo] + f * a[lo + 1]

        return interp(self.w1), interp(self.w2), interp(self.w3)

    def final(self) -> ParticleSystem:
        return ParticleSystem(self.w1[-1], self.w2[-1], self.w3[-1], t=float(self.times[-1]))

    def view(self) -> TrajectoryView:
        return TrajectoryView(
            times=self.times,
            w1=self.w1,
            w2=self.w2,
            w3=self.w3,
            widths=(int(self.w1.shape[1]), int(self.w3.shape[1])),
        )


def picard_solve(
    P0: ParticleSystem,
    spec: DataSpec,
    model: ModelSpec,
    T: float,
    grid_n: int,
    tol: float,
    max_iter: int = 100,
) -> PicardResult:
    """迭代 W ← F_{W(0)}(W)：沿冻结轨迹求漂移，在 grid_n+1 点网格上用梯形公式积分。"""

    if not tol > 0:
        raise ConfigError(f"tol must be positive, got {tol}")
    if grid_n < 1 or max_iter < 1:
        raise ConfigError("grid_n and max_iter must be >= 1")
    if T < 0:
        raise ConfigError(f"T must be nonnegative, got {T}")
    times = np.linspace(0.0, T, grid_n + 1) if T > 0 else np.zeros(1)
    dt = T / grid_n
    n_t = times.size
    base = P0.weights()
    cur = [np.repeat(w[None], n_t, axis=0) for w in base]
    rates = np.array([model.schedule.rates(t) for t in times])
    distances: List[float] = []
    ratios: List[float] = []
    for iteration in range(1, max_iter + 1):
        new = [np.empty_like(c) for c in cur]
        for layer in range(3):
            new[layer][0] = base[layer]
        prev_integrand = None
        acc = [np.zeros_like(w) for w in base]
        for i in range(n_t):
            D = drift_arrays(cur[0][i], cur[1][i], cur[2][i], spec, model)
            integrand = (rates[i, 0] * D.d1, rates[i, 1] * D.d2, rates[i, 2] * D.d3)
            if prev_integrand is not None:
                for layer in range(3):
                    acc[layer] += 0.5 * dt * (prev_integrand[layer] + integrand[layer])
                    new[layer][i] = base[layer] - acc[layer]
            prev_integrand = integrand
        dist = trajectory_distance(*new, *cur)
        if distances and distances[-1] > 0:
            ratios.append(dist / distances[-1])
        distances.append(dist)
        cur = new
        logger.debug("picard.iter", iteration=iteration, distance=dist)
        if dist < tol:
            monitor = BoundMonitor(model, _sup(base[1]), _sup(base[2]), dt)
            for i in range(1, n_t):
                monitor.observe(float(times[i]), _sup(cur[1][i]), _sup(cur[2][i]))
            logger.info("picard.converged", iterations=iteration, distance=dist)
            return PicardResult(
                times=times,
                w1=cur[0],
                w2=cur[1],
                w3=cur[2],
                iterations=iteration,
                distances=distances,
                ratios=ratios,
                certificate=monitor.certificate(),
            )
    last_ratio = ratios[-1] if ratios else math.nan
    raise NonConvergenceError(
        f"Picard iteration did not reach tol={tol} in {max_iter} iterations "
        f"(last distance {distances[-1]:.3e}, last ratio {last_ratio:.3f})",
        last_ratio=last_ratio,
    )


# ---------------------------- 约化动力学 ----------------------------


def reduced_particle_system(
    u_grid: np.ndarray, rho2_atoms: Sequence[float], rho3_atoms: Sequence[float]
) -> ParticleSystem:
    """约化动力学对应的粒子系统。

    第一层粒子 j1 = i·A2 + a（u_grid × ρ2 原子），第二层粒子 j2 = k·A2 + b（ρ3 原子 × ρ2 原子），
    w2[(i,a),(k,b)] = u2[(a+b) mod A2]：循环拉丁方，每一行、每一列都均匀覆盖 ρ2 的全部原子。
    """

    u_grid = np.atleast_2d(np.asarray(u_grid, dtype=np.float64))
    u2 = np.asarray(rho2_atoms, dtype=np.float64).reshape(-1)
    u3 = np.asarray(rho3_atoms, dtype=np.float64).reshape(-1)
    if u2.size == 0 or u3.size == 0 or u_grid.shape[0] == 0:
        raise ConfigError("reduced dynamics needs nonempty u_grid, rho2 and rho3 atoms")
    A2 = u2.size
    w1 = np.repeat(u_grid, A2, axis=0)
    a = np.tile(np.arange(A2), u_grid.shape[0])
    b = np.tile(np.arange(A2), u3.size)
    w2 = u2[(a[:, None] + b[None, :]) % A2]
    w3 = np.repeat(u3, A2)
    return ParticleSystem(w1, w2, w3)


@dataclass(slots=True)
class ReducedResult:
    """约化动力学结果。

    - w1: (n_t, G, d)，记录时刻上的 w1*(t, u) ；w3: (n_t, n3)
    - history: (steps, A, n3)，每步的 Δ2^{H*}(t, z, u3)，用于为新的初值 u1 重放 w1*(·, u1)
    """

    times: np.ndarray
    w1: np.ndarray
    w3: np.ndarray
    coupling: np.ndarray  # (G, n3) 终止时刻的 G(T, u1, u3)，w2* = u2 + G
    mean_u2: float
    h: float
    history: np.ndarray
    certificate: PriorBoundCertificate

    def track(self, u_points: np.ndarray, spec: DataSpec, model: ModelSpec) -> np.ndarray:
        """在存储的 Δ2^{H*} 历史上演化任意初值 u1 的 w1*(t, u1)，返回记录时刻上的值 (n_t, U, d)。"""

        w1 = np.atleast_2d(np.asarray(u_points, dtype=np.float64)).copy()
        n3 = self.history.shape[2] if self.history.size else self.w3.shape[1]
        G_acc = np.zeros((w1.shape[0], n3))
        record = {int(round(t / self.h)) if self.h > 0 else 0: i for i, t in enumerate(self.times)}
        out = np.empty((self.times.size,) + w1.shape)
        if 0 in record:
            out[record[0]] = w1
        for k in range(self.history.shape[0]):
            xi1, xi2, _ = model.schedule.rates(k * self.h)
            pD2H = spec.ps[:, None] * self.history[k]
            pre = np.einsum("ad,id->ai", spec.xs, w1)
            act1 = model.phi1.value(pre)
            s = np.einsum("ak,ik->ai", pD2H, self.mean_u2 + G_acc) / n3
            d1 = np.einsum("ai,ad->id", s * model.phi1.derivative(pre), spec.xs)
            dG = np.einsum("ai,ak->ik", act1, pD2H)
            w1 = w1 - (self.h * xi1) * d1
            G_acc = G_acc - (self.h * xi2) * dG
            if k + 1 in record:
                out[record[k + 1]] = w1
        return out


def _history_budget(limit_mb: float) -> float:
    available = float(psutil.virtual_memory().available)
    return min(limit_mb * 2**20, available / 2.0)


def reduced_evolve(
    u_grid: np.ndarray,
    rho2_atoms: Sequence[float],
    rho3_atoms: Sequence[float],
    spec: DataSpec,
    model: ModelSpec,
    T: float,
    h: float,
    record_intervals: int = 50,
    history_limit_mb: float = DEFAULT_HISTORY_LIMIT_MB,
) -> ReducedResult:
    """i.i.d. 初始化下 w1* 仅依赖自身初值的自洽演化。

    第二层权重写成 w2*(t, u1, u2, u3) = u2 + G(t, u1, u3)，G 为 −∫ξ2 E_Z[Δ2^{H*} φ1] 的运行积分；
    Δ2^{H*}(t, z, u3) 由 (u2, u3) 原子上的辅助系统给出，逐步存入 history。
    """

    _check_step(h, T)
    sched = model.schedule
    if not (
        isinstance(sched.xi1, ConstantRate)
        and isinstance(sched.xi2, ConstantRate)
        and sched.xi1.value == 1.0
        and sched.xi2.value == 1.0
    ):
        raise ConfigError("reduced dynamics requires xi1 = xi2 = 1")
    w1 = np.atleast_2d(np.asarray(u_grid, dtype=np.float64)).copy()
    u2 = np.asarray(rho2_atoms, dtype=np.float64).reshape(-1)
    w3 = np.asarray(rho3_atoms, dtype=np.float64).reshape(-1).copy()
    if u2.size == 0 or w3.size == 0 or w1.shape[0] == 0:
        raise ConfigError("reduced dynamics needs nonempty u_grid, rho2 and rho3 atoms")
    if w1.shape[1] != spec.dim_d:
        raise StructuralError(f"u_grid dim {w1.shape[1]} != data dim {spec.dim_d}")
    steps = horizon_steps(T, h)
    G, n3, A = w1.shape[0], w3.size, spec.n_atoms
    need = float(steps) * A * n3 * 8.0
    budget = _history_budget(history_limit_mb)
    if need > budget:
        raise MemoryGuardError(
            f"reduced history needs {need / 2**20:.1f} MiB, budget is {budget / 2**20:.1f} MiB"
        )
    mean_u2 = float(np.mean(u2))
    G_acc = np.zeros((G, n3))
    history = np.empty((steps, A, n3))
    recorder = make_recorder(T, h, record_intervals)
    w1_rec: List[np.ndarray] = []
    w3_rec: List[np.ndarray] = []
    times_rec: List[float] = []

    def maybe_record(k: int) -> None:
        if recorder.wants(k):
            times_rec.append(k * h)
            w1_rec.append(w1.copy())
            w3_rec.append(w3.copy())

    u2_sup = float(np.max(np.abs(u2)))
    monitor = BoundMonitor(model, u2_sup, _sup(w3), h)
    maybe_record(0)
    X, Y = spec.xs, spec.ys
    for k in range(steps):
        xi1, xi2, xi3 = sched.rates(k * h)
        pre = np.einsum("ad,id->ai", X, w1)
        act1 = model.phi1.value(pre)
        h2 = np.einsum("ai,ik->ak", act1, mean_u2 + G_acc) / G
        act2 = model.phi2.value(h2)
        h3 = np.einsum("ak,k->a", act2, w3) / n3
        c = model.loss.d2(Y, model.phi3.value(h3)) * model.phi3.derivative(h3)
        d2H = c[:, None] * w3[None, :] * model.phi2.derivative(h2)
        expect_values(spec, d2H, layer="w2")
        history[k] = d2H
        pD2H = spec.ps[:, None] * d2H
        s = np.einsum("ak,ik->ai", pD2H, mean_u2 + G_acc) / n3
        d1 = np.einsum("ai,ad->id", s * model.phi1.derivative(pre), X)
        dG = np.einsum("ai,ak->ik", act1, pD2H)
        d3 = np.einsum("a,ak->k", spec.ps * c, act2)
        w1 = w1 - (h * xi1) * d1
        G_acc = G_acc - (h * xi2) * dG
        w3 = w3 - (h * xi3) * d3
        monitor.observe((k + 1) * h, u2_sup + _sup(G_acc), _sup(w3))
        maybe_record(k + 1)
    logger.debug("reduced.done", steps=steps, grid=G, n3=n3, history_mb=need / 2**20)
    return ReducedResult(
        times=np.array(times_rec),
        w1=np.stack(w1_rec),
        w3=np.stack(w3_rec),
        coupling=G_acc,
        mean_u2=mean_u2,
        h=h,
        history=history,
        certificate=monitor.certificate(),
    )
