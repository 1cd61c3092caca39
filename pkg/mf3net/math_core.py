"""激活函数、损失函数与学习率调度：值、导数以及显式的正则性常数。

所有映射均为 numpy 向量化函数，且只用模块级函数 / functools.partial 构造，
保证 ModelSpec 可被 pickle 传到工作进程。
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import partial
from typing import TYPE_CHECKING, Callable, Tuple, Union

import numpy as np

from .errors import ConfigError, DomainError
from .regularity import ValidationReport, validate_regularity

if TYPE_CHECKING:  # pragma: no cover
    from .config import ExperimentConfig

ArrayLike = Union[float, np.ndarray]
ScalarMap = Callable[[np.ndarray], np.ndarray]
LossMap = Callable[[np.ndarray, np.ndarray], np.ndarray]

# Lip(tanh') = max|tanh''| = 4/(3*sqrt(3))
TANH_DERIV_LIPSCHITZ = 4.0 / (3.0 * math.sqrt(3.0))


class ActivationKind(str, Enum):
    TANH = "tanh"
    IDENTITY = "identity"
    CUSTOM = "custom"


class LossKind(str, Enum):
    HUBER = "huber"
    SQUARED = "squared"
    CUSTOM = "custom"


# ---------------------------- 激活函数 ----------------------------


def _tanh(u: np.ndarray) -> np.ndarray:
    return np.tanh(u)


def _tanh_prime(u: np.ndarray) -> np.ndarray:
    t = np.tanh(u)
    return 1.0 - t * t


def _identity(u: np.ndarray) -> np.ndarray:
    return np.array(u, dtype=np.float64)


def _ones(u: np.ndarray) -> np.ndarray:
    return np.ones_like(np.asarray(u, dtype=np.float64))


@dataclass(frozen=True, slots=True)
class ActivationSpec:
    """激活函数及其常数。

    - bound_value: sup|φ|，可为 inf（如恒等映射）
    - bound_deriv: sup|φ'|
    - lipschitz_deriv: Lip(φ')
    - deriv_nonvanishing: φ' 处处非零
    """

    name: ActivationKind
    value: ScalarMap
    derivative: ScalarMap
    bound_value: float
    bound_deriv: float
    lipschitz_deriv: float
    deriv_nonvanishing: bool


def tanh_activation() -> ActivationSpec:
    return ActivationSpec(
        name=ActivationKind.TANH,
        value=_tanh,
        derivative=_tanh_prime,
        bound_value=1.0,
        bound_deriv=1.0,
        lipschitz_deriv=TANH_DERIV_LIPSCHITZ,
        deriv_nonvanishing=True,
    )


def identity_activation() -> ActivationSpec:
    return ActivationSpec(
        name=ActivationKind.IDENTITY,
        value=_identity,
        derivative=_ones,
        bound_value=math.inf,
        bound_deriv=1.0,
        lipschitz_deriv=0.0,
        deriv_nonvanishing=True,
    )


def make_activation(name: str) -> ActivationSpec:
    try:
        kind = ActivationKind(name.strip().lower())
    except ValueError:
        raise ConfigError(f"unknown activation: {name!r}") from None
    if kind is ActivationKind.TANH:
        return tanh_activation()
    if kind is ActivationKind.IDENTITY:
        return identity_activation()
    raise ConfigError("custom activations must be constructed in code, not from config")


# ---------------------------- 损失函数 ----------------------------


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DomainError("loss inputs must be finite")


def _huber_value(y: ArrayLike, yhat: ArrayLike, delta: float) -> np.ndarray:
    r = np.asarray(yhat, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def _huber_d2(y: ArrayLike, yhat: ArrayLike, delta: float) -> np.ndarray:
    r = np.asarray(yhat, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return np.clip(r, -delta, delta)


def _squared_value(y: ArrayLike, yhat: ArrayLike) -> np.ndarray:
    r = np.asarray(yhat, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return 0.5 * r * r


def _squared_d2(y: ArrayLike, yhat: ArrayLike) -> np.ndarray:
    return np.asarray(yhat, dtype=np.float64) - np.asarray(y, dtype=np.float64)


def _scalar_or_array(value: np.ndarray, d2: np.ndarray):
    if value.ndim == 0:
        return float(value), float(d2)
    return value, d2


def huber_loss(y: ArrayLike, yhat: ArrayLike, delta: float = 1.0):
    """Huber 损失，返回 (value, d2)，d2 = ∂value/∂ŷ，|d2| ≤ delta。"""

    if not (math.isfinite(delta) and delta > 0):
        raise DomainError(f"huber delta must be positive and finite, got {delta}")
    y_arr = np.asarray(y, dtype=np.float64)
    yhat_arr = np.asarray(yhat, dtype=np.float64)
    _check_finite(y_arr, yhat_arr)
    return _scalar_or_array(_huber_value(y_arr, yhat_arr, delta), _huber_d2(y_arr, yhat_arr, delta))


def squared_loss(y: ArrayLike, yhat: ArrayLike):
    """平方损失 ½(ŷ−y)²；∂2 无界，仅在 |Y| 有界时满足正则性。"""

    y_arr = np.asarray(y, dtype=np.float64)
    yhat_arr = np.asarray(yhat, dtype=np.float64)
    _check_finite(y_arr, yhat_arr)
    return _scalar_or_array(_squared_value(y_arr, yhat_arr), _squared_d2(y_arr, yhat_arr))


@dataclass(frozen=True, slots=True)
class LossSpec:
    """损失函数及其常数。

    kink: Huber 的拐点半径（|ŷ−y| = kink 处 ∂2 不可导），有限差分检查需绕开。
    """

    name: LossKind
    value: LossMap
    d2: LossMap
    bound_d2: float
    lipschitz_d2: float
    convex_in_second: bool
    zero_grad_implies_zero_loss: bool
    kink: float = math.inf


def huber_spec(delta: float = 1.0) -> LossSpec:
    if not (math.isfinite(delta) and delta > 0):
        raise ConfigError(f"huber_delta must be positive, got {delta}")
    return LossSpec(
        name=LossKind.HUBER,
        value=partial(_huber_value, delta=delta),
        d2=partial(_huber_d2, delta=delta),
        bound_d2=delta,
        lipschitz_d2=1.0,
        convex_in_second=True,
        zero_grad_implies_zero_loss=True,
        kink=delta,
    )


def squared_spec() -> LossSpec:
    return LossSpec(
        name=LossKind.SQUARED,
        value=_squared_value,
        d2=_squared_d2,
        bound_d2=math.inf,
        lipschitz_d2=1.0,
        convex_in_second=True,
        zero_grad_implies_zero_loss=True,
    )


# ---------------------------- 学习率调度 ----------------------------


@dataclass(frozen=True, slots=True)
class ConstantRate:
    """常数调度 ξ(t) ≡ value。"""

    value: float

    def __call__(self, t: float) -> float:
        return self.value


@dataclass(frozen=True, slots=True)
class ScheduleSpec:
    xi1: Callable[[float], float]
    xi2: Callable[[float], float]
    xi3: Callable[[float], float]
    bound: float
    lipschitz: float

    def rates(self, t: float) -> Tuple[float, float, float]:
        return float(self.xi1(t)), float(self.xi2(t)), float(self.xi3(t))

    def layer_bound(self, layer: int) -> float:
        """sup ξ_layer；常数调度取其值，否则退回公共上界。"""

        xi = (self.xi1, self.xi2, self.xi3)[layer - 1]
        if isinstance(xi, ConstantRate):
            return xi.value
        return self.bound

    @property
    def all_zero(self) -> bool:
        return self.bound == 0.0


def constant_schedule(xi1: float = 1.0, xi2: float = 1.0, xi3: float = 0.0) -> ScheduleSpec:
    for name, value in (("xi1", xi1), ("xi2", xi2), ("xi3", xi3)):
        if not (math.isfinite(value) and value >= 0):
            raise ConfigError(f"{name} must be a nonnegative constant, got {value}")
    return ScheduleSpec(
        xi1=ConstantRate(float(xi1)),
        xi2=ConstantRate(float(xi2)),
        xi3=ConstantRate(float(xi3)),
        bound=float(max(xi1, xi2, xi3)),
        lipschitz=0.0,
    )


def parse_rate(text: Union[str, float]) -> float:
    """配置中的 ξ 取值：数字常数或 "zero"。"""

    if isinstance(text, (int, float)):
        return float(text)
    token = text.strip().lower()
    if token == "zero":
        return 0.0
    try:
        return float(token)
    except ValueError:
        raise ConfigError(f"schedule must be a constant or 'zero', got {text!r}") from None


# ---------------------------- 组合模型与常数 ----------------------------


@dataclass(frozen=True, slots=True)
class BoundConstants:
    """通用正则常数 K 与 K_T = K(1 + T^K)。"""

    K: float

    def K_T(self, T: float) -> float:
        if T < 0:
            raise DomainError(f"T must be nonnegative, got {T}")
        return self.K * (1.0 + T ** self.K)


@dataclass(frozen=True, slots=True)
class ModelSpec:
    phi1: ActivationSpec
    phi2: ActivationSpec
    phi3: ActivationSpec
    loss: LossSpec
    schedule: ScheduleSpec


def default_model(delta: float = 1.0, xi3: float = 0.0) -> ModelSpec:
    """tanh / tanh / identity + Huber(delta)，ξ1 = ξ2 = 1。"""

    return ModelSpec(
        phi1=tanh_activation(),
        phi2=tanh_activation(),
        phi3=identity_activation(),
        loss=huber_spec(delta),
        schedule=constant_schedule(1.0, 1.0, xi3),
    )


def _product(*factors: float) -> float:
    # 0·inf 记为 0：某层学习率为零时该层不动
    if any(f == 0.0 for f in factors):
        return 0.0
    return math.prod(factors)


def prior_speed(model: ModelSpec) -> Tuple[float, float]:
    """先验速度常数 (k3, k2)：|∂t w3| ≤ k3，|∂t w2| ≤ k2·sup|w3|。"""

    sched = model.schedule
    common = (model.loss.bound_d2, model.phi3.bound_deriv)
    k3 = _product(sched.layer_bound(3), *common, model.phi2.bound_value)
    k2 = _product(
        sched.layer_bound(2),
        *common,
        model.phi2.bound_deriv,
        model.phi1.bound_value,
    )
    return k3, k2


def certified_constants(model: ModelSpec) -> BoundConstants:
    """由声明常数取 K（至少为 1）；无界常数不参与，由 validate_regularity 报告。"""

    candidates = [
        model.phi1.bound_value,
        model.phi2.bound_value,
        model.phi1.bound_deriv,
        model.phi2.bound_deriv,
        model.phi3.bound_deriv,
        model.phi1.lipschitz_deriv,
        model.phi2.lipschitz_deriv,
        model.phi3.lipschitz_deriv,
        model.loss.bound_d2,
        model.loss.lipschitz_d2,
        model.schedule.bound,
        model.schedule.lipschitz,
        *prior_speed(model),
    ]
    finite = [c for c in candidates if math.isfinite(c)]
    return BoundConstants(K=max([1.0, *finite]))


def build_model(config: "ExperimentConfig") -> ModelSpec:
    """按配置键 activation1|2|3、loss、huber_delta、xi1|2|3 构造 ModelSpec。"""

    loss_name = config.loss.strip().lower()
    if loss_name == LossKind.HUBER.value:
        loss = huber_spec(config.huber_delta)
    elif loss_name == LossKind.SQUARED.value:
        loss = squared_spec()
    else:
        raise ConfigError(f"unknown loss: {config.loss!r}")
    return ModelSpec(
        phi1=make_activation(config.activation1),
        phi2=make_activation(config.activation2),
        phi3=make_activation(config.activation3),
        loss=loss,
        schedule=constant_schedule(
            parse_rate(config.xi1), parse_rate(config.xi2), parse_rate(config.xi3)
        ),
    )


__all__ = [
    "ActivationKind",
    "ActivationSpec",
    "BoundConstants",
    "ConstantRate",
    "LossKind",
    "LossSpec",
    "ModelSpec",
    "ScheduleSpec",
    "ValidationReport",
    "build_model",
    "certified_constants",
    "constant_schedule",
    "default_model",
    "huber_loss",
    "huber_spec",
    "identity_activation",
    "make_activation",
    "parse_rate",
    "prior_speed",
    "squared_loss",
    "squared_spec",
    "tanh_activation",
    "validate_regularity",
]
