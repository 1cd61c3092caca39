from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional, Sequence

import math

import numpy as np
import pandas as pd
import structlog

from .errors import AssumptionViolation

if TYPE_CHECKING:  # pragma: no cover
    from .data import DataSpec
    from .math_core import ActivationSpec, ModelSpec

logger = structlog.get_logger(__name__)

# 激活函数检查网格：[-10, 10] 上 10^4 个点
ACTIVATION_GRID = np.linspace(-10.0, 10.0, 10_000)
# 损失函数检查网格（y 与 ŷ 各 201 点）
LOSS_GRID = np.linspace(-10.0, 10.0, 201)
# 调度检查的时间网格
SCHEDULE_GRID = np.linspace(0.0, 100.0, 10_001)
FD_STEP = 1e-4

_REL = 1e-9
_ABS = 1e-12


def _within(measured: float, declared: float) -> bool:
    return math.isfinite(declared) and measured <= declared * (1.0 + _REL) + _ABS


def _adjacent_slope(values: np.ndarray, grid: np.ndarray, axis: int = -1) -> float:
    dv = np.abs(np.diff(values, axis=axis))
    du = np.diff(grid)
    if values.ndim > 1:
        shape = [1] * values.ndim
        shape[axis] = du.size
        du = du.reshape(shape)
    # 相邻点斜率的最大值即为网格上全部点对斜率的最大值
    return float(np.max(dv / du)) if dv.size else 0.0


@dataclass(slots=True)
class ClauseResult:
    clause_id: str
    passed: bool
    measured: float
    declared: float
    note: str = ""


@dataclass(slots=True)
class ValidationReport:
    """正则性检查报告：逐条列出条款、是否通过与实测常数。"""

    results: List[ClauseResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> List[ClauseResult]:
        return [r for r in self.results if not r.passed]

    def get(self, clause_id: str) -> ClauseResult:
        for r in self.results:
            if r.clause_id == clause_id:
                return r
        raise KeyError(clause_id)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.clause_id, r.passed, r.measured, r.declared, r.note) for r in self.results],
            columns=["clause", "passed", "measured", "declared", "note"],
        )

    def raise_if_failed(self) -> None:
        failed = self.failures()
        if failed:
            names = ", ".join(f"{r.clause_id!r}" for r in failed)
            notes = "; ".join(r.note for r in failed if r.note)
            raise AssumptionViolation(
                f"regularity clauses failed: {names}" + (f" ({notes})" if notes else "")
            )


class Clause:
    """正则性条款基类。"""

    clause_id: str

    def check(self, model: "ModelSpec", spec: Optional["DataSpec"] = None) -> Optional[ClauseResult]:
        return None


def _phi(model: "ModelSpec", layer: int) -> "ActivationSpec":
    return getattr(model, f"phi{layer}")


@dataclass(slots=True)
class ActivationBoundClause(Clause):
    """φ_layer（或其导数）K-有界。"""

    layer: int
    derivative: bool = False
    clause_id: str = ""

    def __post_init__(self) -> None:
        tick = "'" if self.derivative else ""
        self.clause_id = f"phi{self.layer}{tick} K-bounded"

    def check(self, model, spec=None):
        act = _phi(model, self.layer)
        fn = act.derivative if self.derivative else act.value
        declared = act.bound_deriv if self.derivative else act.bound_value
        measured = float(np.max(np.abs(fn(ACTIVATION_GRID))))
        note = "" if math.isfinite(declared) else "unbounded"
        return ClauseResult(self.clause_id, _within(measured, declared), measured, declared, note)


@dataclass(slots=True)
class DerivLipschitzClause(Clause):
    layer: int
    clause_id: str = ""

    def __post_init__(self) -> None:
        self.clause_id = f"phi{self.layer}' K-Lipschitz"

    def check(self, model, spec=None):
        act = _phi(model, self.layer)
        measured = _adjacent_slope(act.derivative(ACTIVATION_GRID), ACTIVATION_GRID)
        return ClauseResult(self.clause_id, _within(measured, act.lipschitz_deriv), measured, act.lipschitz_deriv)


@dataclass(slots=True)
class NonvanishingDerivClause(Clause):
    layer: int
    clause_id: str = ""

    def __post_init__(self) -> None:
        self.clause_id = f"phi{self.layer}' non-zero"

    def check(self, model, spec=None):
        act = _phi(model, self.layer)
        measured = float(np.min(np.abs(act.derivative(ACTIVATION_GRID))))
        passed = act.deriv_nonvanishing and measured > 0.0
        note = "" if act.deriv_nonvanishing else "declared as vanishing"
        return ClauseResult(self.clause_id, passed, measured, 0.0, note)


@dataclass(slots=True)
class DerivativeConsistencyClause(Clause):
    """中心差分与声明导数一致：误差 ≤ 10·Lip(φ')·h + 1e-8。"""

    layer: int
    clause_id: str = ""

    def __post_init__(self) -> None:
        self.clause_id = f"phi{self.layer} derivative consistency"

    def check(self, model, spec=None):
        act = _phi(model, self.layer)
        u = ACTIVATION_GRID
        fd = (act.value(u + FD_STEP) - act.value(u - FD_STEP)) / (2.0 * FD_STEP)
        measured = float(np.max(np.abs(act.derivative(u) - fd)))
        declared = 10.0 * act.lipschitz_deriv * FD_STEP + 1e-8
        return ClauseResult(self.clause_id, measured <= declared, measured, declared)


class LossGradBoundClause(Clause):
    clause_id = "d2L K-bounded"

    def check(self, model, spec=None):
        yy, yh = np.meshgrid(LOSS_GRID, LOSS_GRID, indexing="ij")
        measured = float(np.max(np.abs(model.loss.d2(yy, yh))))
        declared = model.loss.bound_d2
        note = "" if math.isfinite(declared) else "holds only under the extra proviso |Y| <= K"
        return ClauseResult(self.clause_id, _within(measured, declared), measured, declared, note)


class LossGradLipschitzClause(Clause):
    clause_id = "d2L K-Lipschitz"

    def check(self, model, spec=None):
        yy, yh = np.meshgrid(LOSS_GRID, LOSS_GRID, indexing="ij")
        measured = _adjacent_slope(model.loss.d2(yy, yh), LOSS_GRID, axis=1)
        declared = model.loss.lipschitz_d2
        return ClauseResult(self.clause_id, _within(measured, declared), measured, declared)


class LossNonnegativeClause(Clause):
    clause_id = "loss nonnegative"

    def check(self, model, spec=None):
        yy, yh = np.meshgrid(LOSS_GRID, LOSS_GRID, indexing="ij")
        measured = float(np.min(model.loss.value(yy, yh)))
        return ClauseResult(self.clause_id, measured >= 0.0, measured, 0.0)


class ZeroGradClause(Clause):
    clause_id = "zero grad implies zero loss"

    def check(self, model, spec=None):
        if not model.loss.zero_grad_implies_zero_loss:
            return ClauseResult(self.clause_id, True, 0.0, 0.0, "not declared")
        yy, yh = np.meshgrid(LOSS_GRID, LOSS_GRID, indexing="ij")
        mask = np.abs(model.loss.d2(yy, yh)) < 1e-12
        values = model.loss.value(yy, yh)[mask]
        measured = float(np.max(values)) if values.size else 0.0
        return ClauseResult(self.clause_id, measured < 1e-10, measured, 1e-10)


class ScheduleBoundClause(Clause):
    clause_id = "xi K-bounded"

    def check(self, model, spec=None):
        sched = model.schedule
        values = np.array([sched.rates(t) for t in SCHEDULE_GRID])
        measured = float(np.max(values))
        passed = bool(np.min(values) >= 0.0) and _within(measured, sched.bound)
        return ClauseResult(self.clause_id, passed, measured, sched.bound)


class ScheduleLipschitzClause(Clause):
    clause_id = "xi K-Lipschitz"

    def check(self, model, spec=None):
        sched = model.schedule
        values = np.array([sched.rates(t) for t in SCHEDULE_GRID])
        measured = _adjacent_slope(values, SCHEDULE_GRID, axis=0)
        return ClauseResult(self.clause_id, _within(measured, sched.lipschitz), measured, sched.lipschitz)


class DataBoundClause(Clause):
    clause_id = "|X| K-bounded"

    def check(self, model, spec=None):
        if spec is None:
            return None
        measured = float(np.max(np.linalg.norm(spec.xs, axis=1)))
        return ClauseResult(self.clause_id, _within(measured, spec.x_bound), measured, spec.x_bound)


def default_clauses() -> Sequence[Clause]:
    return (
        ActivationBoundClause(1),
        ActivationBoundClause(2),
        ActivationBoundClause(1, derivative=True),
        ActivationBoundClause(2, derivative=True),
        ActivationBoundClause(3, derivative=True),
        DerivLipschitzClause(1),
        DerivLipschitzClause(2),
        DerivLipschitzClause(3),
        NonvanishingDerivClause(2),
        NonvanishingDerivClause(3),
        DerivativeConsistencyClause(1),
        DerivativeConsistencyClause(2),
        DerivativeConsistencyClause(3),
        LossGradBoundClause(),
        LossGradLipschitzClause(),
        LossNonnegativeClause(),
        ZeroGradClause(),
        ScheduleBoundClause(),
        ScheduleLipschitzClause(),
        DataBoundClause(),
    )


def validate_regularity(
    model: "ModelSpec",
    spec: Optional["DataSpec"] = None,
    clauses: Optional[Sequence[Clause]] = None,
) -> ValidationReport:
    """逐条检查正则性条款。不抛异常，失败记录在报告中。"""

    report = ValidationReport()
    for clause in clauses or default_clauses():
        result = clause.check(model, spec)
        if result is not None:
            report.results.append(result)
    logger.debug(
        "regularity.checked",
        passed=report.passed,
        failures=[r.clause_id for r in report.failures()],
    )
    return report
