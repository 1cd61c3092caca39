from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import NumericError, StructuralError

LAYERS: Tuple[str, str, str] = ("w1", "w2", "w3")


def _as_weights(w1, w2, w3) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    w3 = np.asarray(w3, dtype=np.float64)
    if w1.ndim != 2 or w2.ndim != 2 or w3.ndim != 1:
        raise StructuralError(
            f"expected w1 (n1,d), w2 (n1,n2), w3 (n2,), got {w1.shape}, {w2.shape}, {w3.shape}"
        )
    if w2.shape != (w1.shape[0], w3.shape[0]):
        raise StructuralError(f"w2 shape {w2.shape} inconsistent with w1 {w1.shape} and w3 {w3.shape}")
    if w1.shape[0] < 1 or w3.shape[0] < 1:
        raise StructuralError("widths must be positive")
    for name, w in zip(LAYERS, (w1, w2, w3)):
        bad = ~np.isfinite(w)
        if np.any(bad):
            index = int(np.flatnonzero(bad)[0])
            raise NumericError(f"non-finite entry in {name} at flat index {index}", layer=name, index=index)
    return w1, w2, w3


@dataclass(slots=True)
class NetworkParams:
    """有限宽度网络权重 W(k) = (w1, w2, w3)，step_k 为离散时间。

    - w1: (n1, d)；w2: (n1, n2)；w3: (n2,)
    - 构造时校验维度一致与数值有限。
    """

    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    step_k: int = 0

    def __post_init__(self) -> None:
        self.w1, self.w2, self.w3 = _as_weights(self.w1, self.w2, self.w3)
        if self.step_k < 0:
            raise StructuralError(f"step_k must be nonnegative, got {self.step_k}")

    @property
    def n1(self) -> int:
        return int(self.w1.shape[0])

    @property
    def n2(self) -> int:
        return int(self.w3.shape[0])

    @property
    def d(self) -> int:
        return int(self.w1.shape[1])

    def weights(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.w1, self.w2, self.w3


@dataclass(slots=True)
class ParticleSystem:
    """MF 极限的粒子离散：m1 个第一层粒子、m2 个第二层粒子，t 为连续时间。"""

    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    t: float = 0.0

    def __post_init__(self) -> None:
        self.w1, self.w2, self.w3 = _as_weights(self.w1, self.w2, self.w3)
        if not (np.isfinite(self.t) and self.t >= 0):
            raise StructuralError(f"particle time must be finite and nonnegative, got {self.t}")

    @property
    def m1(self) -> int:
        return int(self.w1.shape[0])

    @property
    def m2(self) -> int:
        return int(self.w3.shape[0])

    @property
    def d(self) -> int:
        return int(self.w1.shape[1])

    def weights(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.w1, self.w2, self.w3


@dataclass(slots=True)
class ForwardTrace:
    h2: np.ndarray
    h3: float
    yhat: float


@dataclass(slots=True)
class Gradients:
    """单样本的 Grad_3 / Grad_2 / Grad_1 与 Δ2^H。"""

    g3: np.ndarray
    g2: np.ndarray
    g1: np.ndarray
    d2H: np.ndarray
