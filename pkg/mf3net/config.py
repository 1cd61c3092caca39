from __future__ import annotations

import os
import typing
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from .errors import ConfigError

WORKERS_ENV = "MF3NET_WORKERS"


class TaskKind(str, Enum):
	"""CLI 任务枚举。"""
	TRAIN = "train"
	MF = "mf"
	COUPLE = "couple"
	SWEEP_N = "sweep_n"
	SWEEP_EPS = "sweep_eps"
	CONVERGENCE = "convergence"
	CROSSVAL = "crossval"
	PLOT = "plot"


# 各任务在键未给出时使用的缺省值（仍可被配置文件与命令行覆盖）
TASK_DEFAULTS: Dict[TaskKind, Dict[str, str]] = {
	# m = n：网络与粒子同初值，D_T 只含 SGD 与步长误差
	TaskKind.SWEEP_EPS: {"n1": "800", "n2": "800", "oversample_factor": "1"},
	# 第三层不训练时 |ŷ| ≤ E|w3| = 0.5，标签缩小到 0.25·sin 才可实现
	TaskKind.CONVERGENCE: {
		"T": "200",
		"h": "0.01",
		"m1": "200",
		"m2": "200",
		"record_intervals": "200",
		"data_scale": "0.25",
	},
	TaskKind.CROSSVAL: {"n1": "8", "n2": "8", "oversample_factor": "1", "T": "0.5", "h": "0.001"},
}


@dataclass
class ExperimentConfig:
	"""实验配置（扁平 key=value，键说明见 docs/config.md）。

	未显式给出的派生量在 __post_init__ 中补齐：
	- h 缺省取 eps
	- m1 / m2 缺省取 oversample_factor * n1 / n2
	"""
	task: TaskKind = TaskKind.COUPLE

	# 模型
	activation1: str = "tanh"
	activation2: str = "tanh"
	activation3: str = "identity"
	loss: str = "huber"
	huber_delta: float = 1.0
	xi1: str = "1"
	xi2: str = "1"
	xi3: str = "0"

	# 数据
	data_task: str = "sin"  # sin | xor_like | constant
	data_atoms: int = 8
	data_constant: float = 0.0
	data_scale: float = 1.0  # 标签整体乘以该系数
	data_noise: float = 0.0  # > 0 时每个 x 携带 data_copies 个带噪标签
	data_copies: int = 3
	data_file: Optional[str] = None

	# 宽度与粒子数
	n1: int = 100
	n2: int = 100
	m1: Optional[int] = None
	m2: Optional[int] = None
	oversample_factor: int = 16

	# 时间离散
	eps: float = 1e-3
	h: Optional[float] = None
	T: float = 1.0
	record_intervals: int = 50

	# 扫描
	seeds: List[int] = field(default_factory=lambda: list(range(10)))
	width_levels: List[int] = field(default_factory=lambda: [50, 100, 200, 400, 800])
	eps_levels: List[float] = field(default_factory=lambda: [0.04, 0.02, 0.01, 0.005])
	bound_delta: float = 0.1

	# 初始化分布
	rho1: str = "normal:1"
	rho2: str = "uniform:1"
	rho3: str = "uniform:1"

	# Picard / 约化动力学
	picard_grid_n: int = 500
	picard_tol: float = 1e-8
	picard_max_iter: int = 100
	reduced_points: int = 5
	reduced_u2_atoms: int = 3
	reduced_u3_atoms: int = 3
	history_limit_mb: float = 512.0

	# 验收
	risk_tol: float = 1e-2
	stationarity_ratio: float = 0.1
	slope_bracket_n: Tuple[float, float] = (-0.7, -0.3)
	slope_bracket_eps: Tuple[float, float] = (0.3, 0.7)
	slope_stderr_max: float = 0.1
	assert_acceptance: bool = True
	convergence_network: bool = False

	# 运行
	concurrent_legs: bool = False
	output_dir: str = "results"
	plot_input: Optional[str] = None
	workers: int = 1
	log_level: str = "info"

	def __post_init__(self) -> None:
		if not isinstance(self.task, TaskKind):
			try:
				self.task = TaskKind(str(self.task).strip())
			except ValueError:
				raise ConfigError(f"unknown task: {self.task!r}") from None
		if self.h is None:
			self.h = self.eps
		if self.m1 is None:
			self.m1 = self.oversample_factor * self.n1
		if self.m2 is None:
			self.m2 = self.oversample_factor * self.n2
		if not self.seeds:
			raise ConfigError("seeds must be nonempty")
		if any(s < 0 for s in self.seeds):
			raise ConfigError("seeds must be nonnegative")
		if self.eps <= 0 or self.h <= 0:
			raise ConfigError(f"eps and h must be positive, got eps={self.eps}, h={self.h}")
		if self.T < 0:
			raise ConfigError(f"T must be nonnegative, got {self.T}")
		if min(self.n1, self.n2) < 1 or self.oversample_factor < 1:
			raise ConfigError("widths and oversample_factor must be >= 1")
		if self.m1 < self.n1 or self.m2 < self.n2:
			raise ConfigError(f"particle counts ({self.m1}, {self.m2}) must dominate widths ({self.n1}, {self.n2})")
		if self.record_intervals < 1:
			raise ConfigError("record_intervals must be >= 1")
		if self.workers < 1:
			raise ConfigError(f"workers must be >= 1, got {self.workers}")

	def metadata(self) -> Dict[str, Any]:
		"""写入结果 CSV 首行的元数据。"""
		return {
			"task": self.task.value,
			"T": self.T,
			"eps": self.eps,
			"h": self.h,
			"n1": self.n1,
			"n2": self.n2,
			"m1": self.m1,
			"m2": self.m2,
			"record_intervals": self.record_intervals,
			"seeds": ";".join(str(s) for s in self.seeds),
		}


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str, hint: Any) -> Any:
	origin = typing.get_origin(hint)
	args = typing.get_args(hint)
	if origin is Union:
		# Optional[X]
		if raw.strip().lower() in {"", "none", "null"}:
			return None
		inner = [a for a in args if a is not type(None)][0]
		return _coerce(key, raw, inner)
	if origin in (list, List):
		return [_coerce(key, item, args[0]) for item in raw.split(",") if item.strip()]
	if origin in (tuple, Tuple):
		items = [item for item in raw.split(",") if item.strip()]
		if len(items) != len(args):
			raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {raw!r}")
		return tuple(_coerce(key, item, a) for item, a in zip(items, args))
	text = raw.strip()
	try:
		if hint is bool:
			lowered = text.lower()
			if lowered in _TRUE:
				return True
			if lowered in _FALSE:
				return False
			raise ValueError(text)
		if hint is int:
			return int(text)
		if hint is float:
			return float(text)
		if isinstance(hint, type) and issubclass(hint, Enum):
			return hint(text)
	except ValueError:
		raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None
	return text


def parse_config_text(text: str, source: str = "<string>") -> Dict[str, str]:
	"""解析扁平 key=value 文本：# 注释与空行忽略，重复键报错。"""
	values: Dict[str, str] = {}
	for lineno, line in enumerate(text.splitlines(), start=1):
		stripped = line.split("#", 1)[0].strip()
		if not stripped:
			continue
		if "=" not in stripped:
			raise ConfigError(f"{source}:{lineno}: expected key=value, got {line.strip()!r}")
		key, value = (part.strip() for part in stripped.split("=", 1))
		if key in values:
			raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
		values[key] = value
	return values


def config_from_mapping(values: Mapping[str, str]) -> ExperimentConfig:
	"""先按 task 填入 TASK_DEFAULTS，再用显式给出的键覆盖。"""
	hints = typing.get_type_hints(ExperimentConfig)
	known = {f.name for f in fields(ExperimentConfig)}
	unknown = sorted(set(values) - known)
	if unknown:
		raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
	task = _coerce("task", values["task"], TaskKind) if "task" in values else TaskKind.COUPLE
	merged = {**TASK_DEFAULTS.get(task, {}), **values}
	kwargs = {key: _coerce(key, raw, hints[key]) for key, raw in merged.items()}
	return ExperimentConfig(**kwargs)


def load_config(path: Union[str, Path], overrides: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
	path = Path(path)
	try:
		text = path.read_text(encoding="utf-8")
	except OSError as exc:
		raise ConfigError(f"cannot read config {path}: {exc}") from None
	values = parse_config_text(text, str(path))
	if overrides:
		values.update({k: v for k, v in overrides.items() if v is not None})
	return config_from_mapping(values)


def resolve_workers(cli_value: Optional[int], cfg: ExperimentConfig) -> int:
	"""优先级：环境变量 MF3NET_WORKERS > --workers > 配置文件。"""
	env = os.environ.get(WORKERS_ENV)
	if env:
		try:
			value = int(env)
		except ValueError:
			raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
	elif cli_value is not None:
		value = cli_value
	else:
		value = cfg.workers
	if value < 1:
		raise ConfigError(f"worker count must be >= 1, got {value}")
	return value
