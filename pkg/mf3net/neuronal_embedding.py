"""构造性的 i.i.d. 神经元嵌入与耦合过程。

同一个随机源按下标生成有限网络与 MF 粒子系统的初始化：
下标 j1 的 w1、下标 (j1, j2) 的 w2、下标 j2 的 w3 只取决于 (master_seed, 层 tag, 下标)，
因此宽度 n 的初始化恰是宽度 m ≥ n 初始化的左上角子块，两条轨迹得以逐路径比较。
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
import pandas as pd
import structlog

from .data import DataSpec, DataStream
from .errors import AssumptionViolation, ConfigError, InvariantError
from .finite_net import train
from .math_core import ModelSpec
from .metrics import CouplingDistance, MetricName, coupling_distance
from .mf_system import EulerResult, PriorBoundCertificate, euler_evolve
from .models import NetworkParams, ParticleSystem
from .recorder import (
    DEFAULT_RECORD_INTERVALS,
    TrajectoryView,
    horizon_steps,
    is_multiple,
    make_recorder,
    matched_steps,
    record_steps,
)
from .rng import StreamTag, generator

logger = structlog.get_logger(__name__)


class LawKind(str, Enum):
    NORMAL = "normal"
    UNIFORM = "uniform"
    POINT = "point"


@dataclass(frozen=True, slots=True)
class Law:
    """一维初始化分布：normal:<std>、uniform:<半宽>、point:<取值>。"""

    kind: LawKind
    param: float

    @classmethod
    def parse(cls, text: str) -> "Law":
        try:
            kind_text, value_text = text.strip().split(":", 1)
            kind = LawKind(kind_text.strip().lower())
            param = float(value_text)
        except ValueError:
            raise ConfigError(f"law must look like normal:<std>, uniform:<a> or point:<c>, got {text!r}") from None
        if not math.isfinite(param) or (kind is not LawKind.POINT and param < 0):
            raise ConfigError(f"invalid law parameter in {text!r}")
        return cls(kind, param)

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.param:g}"

    @property
    def bounded(self) -> bool:
        return self.kind is not LawKind.NORMAL or self.param == 0.0

    @property
    def sup(self) -> float:
        """ess-sup |w|。"""

        if self.kind is LawKind.NORMAL:
            return math.inf if self.param > 0 else 0.0
        return abs(self.param)

    def sample(self, gen: np.random.Generator, size) -> np.ndarray:
        """从流 gen 顺序抽取 size 个值；点分布不消耗随机数。"""

        if self.kind is LawKind.POINT:
            return np.full(size, self.param, dtype=np.float64)
        if self.kind is LawKind.UNIFORM:
            return gen.uniform(-self.param, self.param, size)
        return gen.normal(0.0, self.param, size)

    def atoms(self, count: int) -> np.ndarray:
        """等概率的有限原子离散（约化动力学用）：区间中点分位。"""

        if count < 1:
            raise ConfigError(f"atom count must be >= 1, got {count}")
        if self.kind is LawKind.POINT:
            return np.array([self.param])
        if self.kind is LawKind.UNIFORM:
            return self.param * (2.0 * (np.arange(count) + 0.5) / count - 1.0)
        raise AssumptionViolation("normal laws have no finite bounded atom list")


@dataclass(frozen=True, slots=True)
class IIDEmbedding:
    """i.i.d. 嵌入：w1 ~ ρ1^{⊗d}，w2 ~ ρ2，w3 ~ ρ3，各下标独立。"""

    rho1: Law
    rho2: Law
    rho3: Law
    master_seed: int
    dim_d: int

    def __post_init__(self) -> None:
        for name, law in (("rho2", self.rho2), ("rho3", self.rho3)):
            if not law.bounded:
                raise AssumptionViolation(f"{name} = {law} is unbounded; w2 and w3 initial laws must be bounded")
        if self.dim_d < 1:
            raise ConfigError(f"dim_d must be >= 1, got {self.dim_d}")


def sample_embedding(e: IIDEmbedding, n1: int, n2: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n1 < 1 or n2 < 1:
        raise ConfigError(f"widths must be >= 1, got ({n1}, {n2})")
    seed = e.master_seed
    # w1、w3 各一条流，按行顺序填充；w2 每行 j1 一条流
    w1 = e.rho1.sample(generator(seed, StreamTag.W1), (n1, e.dim_d))
    w2 = np.stack([e.rho2.sample(generator(seed, StreamTag.W2, j1), n2) for j1 in range(n1)])
    w3 = e.rho3.sample(generator(seed, StreamTag.W3), n2)
    return w1, w2, w3


@dataclass(slots=True)
class CoupledPair:
    net: NetworkParams
    particles: ParticleSystem

    @property
    def index_map(self) -> Tuple[int, int]:
        """[n1]×[n2] 以恒等方式嵌入 [m1]×[m2]。"""

        return self.net.n1, self.net.n2


def _block_equal(net: NetworkParams, particles: ParticleSystem) -> bool:
    n1, n2 = net.n1, net.n2
    return (
        np.array_equal(net.w1, particles.w1[:n1])
        and np.array_equal(net.w2, particles.w2[:n1, :n2])
        and np.array_equal(net.w3, particles.w3[:n2])
    )


def couple(e: IIDEmbedding, n1: int, n2: int, m1: int, m2: int) -> CoupledPair:
    if m1 < n1 or m2 < n2:
        raise ConfigError(f"particle counts ({m1}, {m2}) must dominate widths ({n1}, {n2})")
    particles = ParticleSystem(*sample_embedding(e, m1, m2))
    net = NetworkParams(*sample_embedding(e, n1, n2))
    if not _block_equal(net, particles):
        raise InvariantError("network initialization is not a prefix of the particle initialization")
    return CoupledPair(net=net, particles=particles)


@dataclass(slots=True)
class CouplingRecord:
    distance: CouplingDistance
    net_view: TrajectoryView
    mf_view: TrajectoryView
    certificate: PriorBoundCertificate
    n1: int
    n2: int
    m1: int
    m2: int
    eps: float
    h: float
    seed: int

    @property
    def D_T(self) -> float:
        return self.distance.D_T

    def to_frame(self) -> pd.DataFrame:
        dist = self.distance
        n_t = dist.times.size
        return pd.DataFrame(
            {
                MetricName.TIME.value: dist.times,
                MetricName.DEV_W1.value: dist.dev_w1,
                MetricName.DEV_W2.value: dist.dev_w2,
                MetricName.DEV_W3.value: dist.dev_w3,
                MetricName.RUNNING_SUP.value: dist.running_sup,
                "n1": np.full(n_t, self.n1),
                "n2": np.full(n_t, self.n2),
                "m1": np.full(n_t, self.m1),
                "m2": np.full(n_t, self.m2),
                "eps": np.full(n_t, self.eps),
                "seed": np.full(n_t, self.seed),
            }
        )


def run_coupled(
    pair: CoupledPair,
    spec: DataSpec,
    model: ModelSpec,
    T: float,
    eps: float,
    h: Optional[float] = None,
    data_seed: int = 0,
    record_intervals: int = DEFAULT_RECORD_INTERVALS,
    concurrent_legs: bool = False,
    seed_label: Optional[int] = None,
) -> CouplingRecord:
    """SGD 与粒子 ODE 从共享初始化出发，在同一记录网格上比较重叠下标。

    数据流只由 data_seed 决定，与嵌入抽样独立。
    """

    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    if not is_multiple(T, eps):
        raise ConfigError(f"T = {T} is not a multiple of eps = {eps}")
    h = eps if h is None else h
    net_steps = record_steps(horizon_steps(T, eps), record_intervals)
    ode_steps = matched_steps(net_steps, eps, h)
    n1, n2 = pair.net.n1, pair.net.n2
    outputs = (spec, model)
    net_rec = make_recorder(T, eps, steps=net_steps, outputs_for=outputs)
    mf_rec = make_recorder(T, h, steps=ode_steps, keep=(n1, n2), outputs_for=outputs)
    stream = DataStream(spec, data_seed)

    def sgd_leg():
        return train(pair.net, stream, T, eps, model, net_rec)

    def ode_leg() -> EulerResult:
        return euler_evolve(pair.particles, spec, model, T, h, mf_rec)

    if concurrent_legs:
        with ThreadPoolExecutor(max_workers=2, thread_name_prefix="coupling") as pool:
            sgd_future = pool.submit(sgd_leg)
            ode_future = pool.submit(ode_leg)
            sgd_future.result()
            euler = ode_future.result()
    else:
        sgd_leg()
        euler = ode_leg()
    net_view, mf_view = net_rec.view(), mf_rec.view()
    distance = coupling_distance(net_view, mf_view, overlap=(n1, n2))
    if distance.per_time[0] != 0.0:
        raise InvariantError(f"coupled trajectories differ at t=0 by {distance.per_time[0]}")
    record = CouplingRecord(
        distance=distance,
        net_view=net_view,
        mf_view=mf_view,
        certificate=euler.certificate,
        n1=n1,
        n2=n2,
        m1=pair.particles.m1,
        m2=pair.particles.m2,
        eps=eps,
        h=h,
        seed=data_seed if seed_label is None else seed_label,
    )
    logger.debug("coupling.done", n1=n1, n2=n2, m1=record.m1, m2=record.m2, eps=eps, D_T=record.D_T)
    return record
