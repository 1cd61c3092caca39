"""距离、范数与诊断量。全部是记录快照的纯函数，不会修改轨迹。"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .data import DataSpec
from .errors import StructuralError
from .finite_net import forward_batch
from .math_core import ModelSpec
from .mf_system import drift_arrays
from .recorder import TrajectoryView

PsiMap = Callable[[np.ndarray, np.ndarray], np.ndarray]


class MetricName(str, Enum):
    """输出 CSV 的列名。"""

    TIME = "t"
    DEV_W1 = "dev_w1"
    DEV_W2 = "dev_w2"
    DEV_W3 = "dev_w3"
    RUNNING_SUP = "D_t"
    RISK = "risk"
    STATIONARITY = "stationarity"
    GAP = "gap"


@dataclass(slots=True)
class CouplingDistance:
    times: np.ndarray
    dev_w1: np.ndarray
    dev_w2: np.ndarray
    dev_w3: np.ndarray
    per_time: np.ndarray
    running_sup: np.ndarray

    @property
    def D_T(self) -> float:
        return float(self.running_sup[-1])


@dataclass(slots=True)
class GapReport:
    sup_gap: float
    per_time: np.ndarray  # (n_t, 2)：t, gap
    psi_name: str


def _check_grids(a: TrajectoryView, b: TrajectoryView) -> None:
    if len(a) != len(b):
        raise StructuralError(f"time grids differ in length: {len(a)} vs {len(b)}")
    scale = max(1.0, float(a.times[-1]))
    if np.any(np.abs(a.times - b.times) > 1e-9 * scale):
        raise StructuralError("trajectories are not recorded on a shared time grid")


def coupling_distance(
    a: TrajectoryView, b: TrajectoryView, overlap: Optional[Tuple[int, int]] = None
) -> CouplingDistance:
    """逐时刻三层 sup 偏差（w1 取欧氏范数）及其运行上确界 D_t。"""

    _check_grids(a, b)
    if overlap is None:
        overlap = (min(a.w1.shape[1], b.w1.shape[1]), min(a.w3.shape[1], b.w3.shape[1]))
    k1, k2 = overlap
    if k1 > min(a.w1.shape[1], b.w1.shape[1]) or k2 > min(a.w3.shape[1], b.w3.shape[1]):
        raise StructuralError(f"overlap {overlap} exceeds the recorded blocks")
    if k1 < 1 or k2 < 1:
        raise StructuralError("overlap must contain at least one index per layer")
    dev_w1 = np.max(np.linalg.norm(a.w1[:, :k1] - b.w1[:, :k1], axis=2), axis=1)
    dev_w2 = np.max(np.abs(a.w2[:, :k1, :k2] - b.w2[:, :k1, :k2]), axis=(1, 2))
    dev_w3 = np.max(np.abs(a.w3[:, :k2] - b.w3[:, :k2]), axis=1)
    per_time = np.maximum(np.maximum(dev_w1, dev_w2), dev_w3)
    return CouplingDistance(
        times=a.times.copy(),
        dev_w1=dev_w1,
        dev_w2=dev_w2,
        dev_w3=dev_w3,
        per_time=per_time,
        running_sup=np.maximum.accumulate(per_time),
    )


def sup_norms(a: TrajectoryView) -> Tuple[float, float]:
    """⦀W⦀_T：记录时刻与下标上的 sup|w2|、sup|w3|。"""

    return float(np.max(np.abs(a.w2))), float(np.max(np.abs(a.w3)))


def _full(view: TrajectoryView) -> None:
    if view.w1.shape[1] != view.widths[0] or view.w3.shape[1] != view.widths[1]:
        raise StructuralError("metric needs full snapshots, but only an overlap block was recorded")


def _outputs(view: TrajectoryView, spec: DataSpec, model: ModelSpec) -> np.ndarray:
    if view.yhat is not None:
        return view.yhat
    _full(view)
    return np.stack(
        [forward_batch(*view.snapshot(i), spec.xs, model).yhat for i in range(len(view))]
    )


def risk_trajectory(view: TrajectoryView, spec: DataSpec, model: ModelSpec) -> np.ndarray:
    """逐记录时刻的 𝓛(W(t)) = E_Z[𝓛(Y, ŷ)]。"""

    yhat = _outputs(view, spec, model)
    return np.einsum("k,tk->t", spec.ps, model.loss.value(spec.ys[None, :], yhat))


def test_function_gap(
    net_traj: TrajectoryView,
    mf_traj: TrajectoryView,
    spec: DataSpec,
    model: ModelSpec,
    psi: Optional[PsiMap] = None,
    psi_name: Optional[str] = None,
) -> GapReport:
    """|E_Z ψ(Y, ŷ_net) − E_Z ψ(Y, ŷ_mf)|，默认 ψ = 𝓛。"""

    _check_grids(net_traj, mf_traj)
    if psi is None:
        psi, psi_name = model.loss.value, psi_name or "loss"
    y = spec.ys[None, :]
    a = np.einsum("k,tk->t", spec.ps, np.broadcast_to(psi(y, _outputs(net_traj, spec, model)), (len(net_traj), spec.n_atoms)))
    b = np.einsum("k,tk->t", spec.ps, np.broadcast_to(psi(y, _outputs(mf_traj, spec, model)), (len(mf_traj), spec.n_atoms)))
    gap = np.abs(a - b)
    return GapReport(
        sup_gap=float(np.max(gap)),
        per_time=np.column_stack([net_traj.times, gap]),
        psi_name=psi_name or getattr(psi, "__name__", "psi"),
    )


# 避免 pytest 将其当作测试收集
test_function_gap.__test__ = False  # type: ignore[attr-defined]


def stationarity_monitor(mf_traj: TrajectoryView, spec: DataSpec, model: ModelSpec) -> np.ndarray:
    """每个记录时刻重算 Δ2，返回 max_{j1} mean_{j2} |ξ2(t)·Δ2[j1, j2]|。"""

    _full(mf_traj)
    out = np.empty(len(mf_traj))
    for i, t in enumerate(mf_traj.times):
        xi2 = model.schedule.rates(float(t))[1]
        if xi2 == 0.0:
            out[i] = 0.0
            continue
        D = drift_arrays(*mf_traj.snapshot(i), spec, model)
        out[i] = float(np.max(np.mean(np.abs(xi2 * D.d2), axis=1)))
    return out


@dataclass(slots=True)
class LipschitzDiagnostic:
    lip_in_init: float
    lip_in_time: float
    running_lip_in_init: np.ndarray  # 截至每个记录时刻的 lip_in_init


def w1_lipschitz_diagnostic(
    times: np.ndarray, w1: np.ndarray, u_points: Optional[np.ndarray] = None
) -> LipschitzDiagnostic:
    """w1 轨迹对初值与时间的经验 Lipschitz 比值。

    w1: (n_t, G, d)；u_points 缺省为 w1[0]。初值重合的点对（0/0）被排除。
    """

    times = np.asarray(times, dtype=np.float64)
    w1 = np.asarray(w1, dtype=np.float64)
    if w1.shape[0] < 2 or w1.shape[1] < 2:
        raise StructuralError("Lipschitz diagnostic needs >= 2 times and >= 2 initial points")
    u = w1[0] if u_points is None else np.asarray(u_points, dtype=np.float64)
    du = np.linalg.norm(u[:, None, :] - u[None, :, :], axis=2)
    iu, ju = np.triu_indices(u.shape[0], k=1)
    keep = du[iu, ju] > 0
    iu, ju = iu[keep], ju[keep]
    if iu.size:
        dev = np.linalg.norm(w1[:, iu, :] - w1[:, ju, :], axis=2)  # (n_t, pairs)
        per_time = np.max(dev / du[iu, ju][None, :], axis=1)
        running = np.maximum.accumulate(per_time)
    else:
        running = np.zeros(w1.shape[0])
    step = np.linalg.norm(np.diff(w1, axis=0), axis=2)  # (n_t-1, G)
    lip_time = float(np.max(step / np.diff(times)[:, None]))
    result = LipschitzDiagnostic(float(running[-1]), lip_time, running)
    if not (math.isfinite(result.lip_in_init) and math.isfinite(result.lip_in_time)):
        raise StructuralError("Lipschitz diagnostic produced a non-finite ratio")
    return result


def coupling_error_envelope(eps: float, n1: int, n2: int, T: float, delta: float, K: float) -> float:
    """err_{δ,T} = e^{K_T}(1/√n_min + √ε)·log^{1/2}(3(T+1)n_max²/δ + e)，K_T = K(1 + T^K)。"""

    K_T = K * (1.0 + T**K)
    if K_T > 700.0:
        return math.inf
    n_min, n_max = min(n1, n2), max(n1, n2)
    log_term = math.sqrt(math.log(3.0 * (T + 1.0) * n_max**2 / delta + math.e))
    return math.exp(K_T) * (1.0 / math.sqrt(n_min) + math.sqrt(eps)) * log_term


def write_metric_csv(path: Union[str, Path], frame: pd.DataFrame, metadata: Mapping[str, object]) -> None:
    """CSV 首行为 `# key=value,...` 元数据，其后为表格。"""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ",".join(f"{k}={v}" for k, v in metadata.items())
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {header}\n")
        frame.to_csv(fh, index=False, lineterminator="\n")


def read_metric_csv(path: Union[str, Path]) -> Tuple[pd.DataFrame, dict]:
    path = Path(path)
    metadata: dict = {}
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline()
        if first.startswith("#"):
            for item in first[1:].strip().split(","):
                if "=" in item:
                    key, value = item.split("=", 1)
                    metadata[key.strip()] = value.strip()
        else:
            fh.seek(0)
        frame = pd.read_csv(fh, float_precision="round_trip")
    return frame, metadata
