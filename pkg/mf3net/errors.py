from __future__ import annotations

from enum import IntEnum
from typing import Optional


class ExitCode(IntEnum):
    """CLI 退出码。"""

    OK = 0
    RUNTIME = 1  # 运行期数值/结构错误
    VALIDATION = 2  # 配置或模型校验失败（计算前）
    ACCEPTANCE = 3  # 验收断言失败


class Mf3netError(Exception):
    """所有库内异常的基类，携带 CLI 退出码。"""

    exit_code: ExitCode = ExitCode.RUNTIME


class ConfigError(Mf3netError):
    """配置非法或调用前置条件不满足。"""

    exit_code = ExitCode.VALIDATION


class AssumptionViolation(ConfigError):
    """正则性/初始化假设被违反（例如无界的 rho2/rho3）。"""


class PreconditionError(ConfigError):
    """全局收敛实验的前置条件不满足。"""


class DomainError(Mf3netError, ValueError):
    """标量输入非有限或越界。"""

    exit_code = ExitCode.VALIDATION


class StructuralError(Mf3netError):
    """维度或时间网格不一致。"""


class NumericError(Mf3netError):
    """计算中出现 NaN/Inf。

    - layer: 出错层（"w1" / "w2" / "w3"）
    - index: 该层内的扁平下标
    - atom: 数据原子下标（期望计算时）
    """

    def __init__(
        self,
        message: str,
        *,
        layer: Optional[str] = None,
        index: Optional[int] = None,
        atom: Optional[int] = None,
    ) -> None:
        super().__init__(message)
        self.layer = layer
        self.index = index
        self.atom = atom


class IntegratorStepError(Mf3netError):
    """先验界证书被突破：通常意味着步长 h 过大。"""


class NonConvergenceError(Mf3netError):
    """Picard 迭代在 max_iter 内未收敛。"""

    def __init__(self, message: str, *, last_ratio: float) -> None:
        super().__init__(message)
        self.last_ratio = last_ratio


class MemoryGuardError(Mf3netError):
    """约化动力学的历史存储超出预算。"""


class InvariantError(Mf3netError):
    """内部不变量被破坏（如耦合前缀不一致）。"""


class AcceptanceError(Mf3netError):
    """验收检查失败，`check` 为失败项名称。"""

    exit_code = ExitCode.ACCEPTANCE

    def __init__(self, message: str, *, check: str) -> None:
        super().__init__(message)
        self.check = check
