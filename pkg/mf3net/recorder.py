"""轨迹记录：在统一记录网格上保存权重快照（可只保留重叠块）与网络输出。"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import StructuralError

if TYPE_CHECKING:  # pragma: no cover
    from .data import DataSpec
    from .math_core import ModelSpec

DEFAULT_RECORD_INTERVALS = 50


def horizon_steps(T: float, dt: float) -> int:
    """T 内的步数 ⌊T/dt⌋；T 为 dt 整数倍（误差 1e-9 内）时取整。"""

    if dt <= 0:
        raise StructuralError(f"step size must be positive, got {dt}")
    if T < 0:
        raise StructuralError(f"horizon must be nonnegative, got {T}")
    ratio = T / dt
    nearest = round(ratio)
    if abs(ratio - nearest) <= 1e-9 * max(1.0, ratio):
        return int(nearest)
    return int(np.floor(ratio))


def is_multiple(T: float, dt: float) -> bool:
    ratio = T / dt
    return abs(ratio - round(ratio)) <= 1e-9 * max(1.0, ratio)


def record_steps(total_steps: int, intervals: int = DEFAULT_RECORD_INTERVALS) -> np.ndarray:
    """[0, total_steps] 上近似等距的 intervals+1 个整数步（去重、含两端）。"""

    if intervals < 1:
        raise StructuralError(f"record_intervals must be >= 1, got {intervals}")
    if total_steps == 0:
        return np.zeros(1, dtype=np.int64)
    raw = np.rint(np.linspace(0.0, float(total_steps), intervals + 1)).astype(np.int64)
    return np.unique(raw)


def matched_steps(steps: np.ndarray, dt_from: float, dt_to: float) -> np.ndarray:
    """把一条网格上的记录步换算到另一步长；两者记录时刻必须重合。"""

    target = steps * dt_from / dt_to
    nearest = np.rint(target)
    if np.any(np.abs(target - nearest) > 1e-9 * np.maximum(1.0, target)):
        raise StructuralError(f"recording times k*{dt_from} are not multiples of {dt_to}")
    return nearest.astype(np.int64)


@dataclass(slots=True)
class TrajectoryView:
    """记录下来的轨迹：times 严格递增且首个时刻为 0。

    w1: (n_t, k1, d)，w2: (n_t, k1, k2)，w3: (n_t, k2)，k1/k2 为保留的下标数。
    h3 / yhat: (n_t, n_atoms)，在完整权重上计算（可缺省）。
    """

    times: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    widths: Tuple[int, int]
    h3: Optional[np.ndarray] = None
    yhat: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=np.float64)
        n_t = self.times.shape[0]
        if n_t == 0:
            raise StructuralError("trajectory has no snapshots")
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise StructuralError("trajectory times must start at 0 and increase strictly")
        if not (self.w1.shape[0] == self.w2.shape[0] == self.w3.shape[0] == n_t):
            raise StructuralError("snapshot count does not match the time grid")

    def __len__(self) -> int:
        return int(self.times.shape[0])

    @property
    def spacing(self) -> float:
        return float(np.max(np.diff(self.times))) if len(self) > 1 else 0.0

    def snapshot(self, i: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.w1[i], self.w2[i], self.w3[i]

    def final(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.snapshot(len(self) - 1)


@dataclass(slots=True)
class TrajectoryRecorder:
    """按记录步保存快照。

    - steps: 需要记录的离散步（升序）
    - dt: 步长，记录时刻为 step * dt
    - keep: 只保留前 (k1, k2) 个下标（耦合时的重叠块），None 表示全部
    - outputs_for: 给定 (spec, model) 时额外记录每个数据原子上的 H3 与 ŷ
    """

    steps: np.ndarray
    dt: float
    keep: Optional[Tuple[int, int]] = None
    outputs_for: Optional[Tuple["DataSpec", "ModelSpec"]] = None
    _times: List[float] = field(default_factory=list)
    _w1: List[np.ndarray] = field(default_factory=list)
    _w2: List[np.ndarray] = field(default_factory=list)
    _w3: List[np.ndarray] = field(default_factory=list)
    _h3: List[np.ndarray] = field(default_factory=list)
    _yhat: List[np.ndarray] = field(default_factory=list)
    _wanted: Dict[int, float] = field(default_factory=dict)
    _widths: Tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self._wanted = {int(k): float(k) * self.dt for k in self.steps}

    @property
    def last_step(self) -> int:
        return int(self.steps[-1]) if self.steps.size else 0

    def wants(self, step: int) -> bool:
        return step in self._wanted

    def record(self, step: int, w1: np.ndarray, w2: np.ndarray, w3: np.ndarray) -> None:
        if step not in self._wanted:
            return
        if self._times and self._wanted[step] <= self._times[-1]:
            raise StructuralError(f"step {step} recorded out of order")
        k1, k2 = self.keep if self.keep is not None else (w1.shape[0], w3.shape[0])
        if k1 > w1.shape[0] or k2 > w3.shape[0]:
            raise StructuralError(f"cannot keep block {(k1, k2)} of widths {(w1.shape[0], w3.shape[0])}")
        self._widths = (int(w1.shape[0]), int(w3.shape[0]))
        self._times.append(self._wanted[step])
        self._w1.append(np.array(w1[:k1], copy=True))
        self._w2.append(np.array(w2[:k1, :k2], copy=True))
        self._w3.append(np.array(w3[:k2], copy=True))
        if self.outputs_for is not None:
            from .finite_net import forward_batch

            spec, model = self.outputs_for
            fwd = forward_batch(w1, w2, w3, spec.xs, model)
            self._h3.append(fwd.h3)
            self._yhat.append(fwd.yhat)

    def view(self) -> TrajectoryView:
        if not self._times:
            raise StructuralError("nothing recorded")
        return TrajectoryView(
            times=np.array(self._times),
            w1=np.stack(self._w1),
            w2=np.stack(self._w2),
            w3=np.stack(self._w3),
            widths=self._widths,
            h3=np.stack(self._h3) if self._h3 else None,
            yhat=np.stack(self._yhat) if self._yhat else None,
        )


def make_recorder(
    T: float,
    dt: float,
    intervals: int = DEFAULT_RECORD_INTERVALS,
    keep: Optional[Tuple[int, int]] = None,
    outputs_for: Optional[Tuple["DataSpec", "ModelSpec"]] = None,
    steps: Optional[Sequence[int]] = None,
) -> TrajectoryRecorder:
    if steps is None:
        steps = record_steps(horizon_steps(T, dt), intervals)
    return TrajectoryRecorder(np.asarray(steps, dtype=np.int64), dt, keep=keep, outputs_for=outputs_for)
