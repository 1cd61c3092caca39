from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError


@dataclass(slots=True)
class SlopeFit:
    """log(value) = intercept + slope·log(level) 的最小二乘拟合。"""

    slope: float
    intercept: float
    stderr: float
    residuals: np.ndarray

    def predict(self, levels: Sequence[float]) -> np.ndarray:
        return np.exp(self.intercept) * np.asarray(levels, dtype=np.float64) ** self.slope


def fit_loglog(levels: Sequence[float], values: Sequence[float]) -> SlopeFit:
    """对数坐标下的一次多项式最小二乘；slope 的标准误取 polyfit 按残差缩放的协方差（点数 ≥ 3）。"""

    x = np.log(np.asarray(levels, dtype=np.float64))
    y = np.log(np.asarray(values, dtype=np.float64))
    if x.size < 3:
        raise ConfigError(f"a log-log fit needs at least 3 levels, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ConfigError("log-log fit needs strictly positive levels and values")
    if np.ptp(x) == 0.0:
        raise ConfigError("levels must not all be equal")
    (slope, intercept), cov = np.polyfit(x, y, 1, cov=True)
    residuals = y - np.polyval([slope, intercept], x)
    return SlopeFit(float(slope), float(intercept), float(np.sqrt(cov[0, 0])), residuals)


def aggregate_by_level(raw: pd.DataFrame, level: str, value: str = "D_T") -> pd.DataFrame:
    """按 level 聚合各 seed 的结果：均值、标准误、seed 数（按 level、seed 排序后折叠）。"""

    ordered = raw.sort_values([level, "seed"], kind="mergesort")
    grouped = ordered.groupby(level, sort=True)[value]
    out = pd.DataFrame(
        {
            "mean": grouped.mean(),
            "std": grouped.std(ddof=1),
            "seeds": grouped.count(),
        }
    )
    out["std"] = out["std"].fillna(0.0)
    out["stderr"] = out["std"] / np.sqrt(out["seeds"])
    return out.reset_index()


def pooled_stderr(a: float, b: float) -> float:
    return float(np.hypot(a, b))
