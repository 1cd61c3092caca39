"""有限支撑的合成数据分布 𝒫：精确期望（MF 漂移）与 i.i.d. 流式抽样（SGD）。

输入 x 的最后一个坐标恒为 1（偏置已并入）。
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog

from .errors import ConfigError, NumericError
from .rng import StreamTag, uniform_block

logger = structlog.get_logger(__name__)

DATA_STREAM_TAG = StreamTag.DATA
_PROB_TOL = 1e-12


class TargetKind(str, Enum):
    SIN = "sin"
    XOR_LIKE = "xor_like"
    CONSTANT = "constant"


Atom = Tuple[np.ndarray, float, float]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DataSpec:
    """有限支撑数据分布。

    xs: (n_atoms, dim_d)，ys: (n_atoms,)，ps: (n_atoms,)
    """

    dim_d: int
    xs: np.ndarray
    ys: np.ndarray
    ps: np.ndarray
    x_bound: float
    label_fn_deterministic: bool

    def __post_init__(self) -> None:
        xs = _readonly(self.xs)
        ys = _readonly(self.ys).reshape(-1)
        ps = _readonly(self.ps).reshape(-1)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        object.__setattr__(self, "ps", ps)
        if xs.ndim != 2 or xs.shape[1] != self.dim_d or self.dim_d < 1:
            raise ConfigError(f"atoms must be vectors of length dim_d={self.dim_d}")
        if not (xs.shape[0] == ys.shape[0] == ps.shape[0]) or xs.shape[0] == 0:
            raise ConfigError("atom arrays must be nonempty and of equal length")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys)) and np.all(np.isfinite(ps))):
            raise ConfigError("atoms must be finite")
        if np.any(ps < 0) or abs(float(np.sum(ps)) - 1.0) > _PROB_TOL:
            raise ConfigError(f"probabilities must be nonnegative and sum to 1, got sum={np.sum(ps)!r}")
        if np.any(xs[:, -1] != 1.0):
            raise ConfigError("every atom must carry the bias coordinate x[d-1] = 1")
        norm = float(np.max(np.linalg.norm(xs, axis=1)))
        if norm > self.x_bound * (1.0 + 1e-12):
            raise ConfigError(f"max |x| = {norm} exceeds x_bound = {self.x_bound}")
        if self.label_fn_deterministic and _has_conflicting_labels(xs, ys):
            raise ConfigError("label_fn_deterministic set but two atoms share x with different y")

    @classmethod
    def from_atoms(
        cls,
        atoms: Sequence[Atom],
        x_bound: Optional[float] = None,
        label_fn_deterministic: Optional[bool] = None,
    ) -> "DataSpec":
        xs = np.array([np.asarray(a[0], dtype=np.float64) for a in atoms])
        ys = np.array([float(a[1]) for a in atoms])
        ps = np.array([float(a[2]) for a in atoms])
        if xs.ndim != 2:
            raise ConfigError("atom inputs must share one dimension")
        if x_bound is None:
            x_bound = float(np.max(np.linalg.norm(xs, axis=1)))
        if label_fn_deterministic is None:
            label_fn_deterministic = not _has_conflicting_labels(xs, ys)
        return cls(xs.shape[1], xs, ys, ps, float(x_bound), bool(label_fn_deterministic))

    @property
    def n_atoms(self) -> int:
        return int(self.ps.shape[0])

    @property
    def atoms(self) -> List[Atom]:
        return [(self.xs[k], float(self.ys[k]), float(self.ps[k])) for k in range(self.n_atoms)]


def _has_conflicting_labels(xs: np.ndarray, ys: np.ndarray) -> bool:
    _, inverse = np.unique(xs, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    for g in np.unique(inverse):
        labels = ys[inverse == g]
        if np.any(labels != labels[0]):
            return True
    return False


def _target_values(u: np.ndarray, target: TargetKind, constant: float) -> np.ndarray:
    if target is TargetKind.SIN:
        return np.sin(u)
    if target is TargetKind.XOR_LIKE:
        # 相邻格点符号交替
        return np.where(np.arange(u.size) % 2 == 0, 1.0, -1.0)
    return np.full(u.shape, float(constant))


def _check_scale(scale: float) -> float:
    if not np.isfinite(scale) or scale <= 0:
        raise ConfigError(f"label scale must be positive and finite, got {scale}")
    return float(scale)


def _parse_target(target: Union[str, TargetKind]) -> TargetKind:
    try:
        return TargetKind(target)
    except ValueError:
        raise ConfigError(f"unknown data target: {target!r}") from None


def make_grid_task(
    m: int,
    target: Union[str, TargetKind] = TargetKind.SIN,
    constant: float = 0.0,
    scale: float = 1.0,
) -> DataSpec:
    """m 个原子 x = (u_k, 1)，u_k 在 [-1, 1] 等距，均匀概率，y = scale·target(u_k)。"""

    if m < 2:
        raise ConfigError(f"grid task needs m >= 2 atoms, got {m}")
    kind = _parse_target(target)
    u = np.linspace(-1.0, 1.0, m)
    xs = np.stack([u, np.ones(m)], axis=1)
    ys = _check_scale(scale) * _target_values(u, kind, constant)
    ps = np.full(m, 1.0 / m)
    return DataSpec(2, xs, ys, ps, float(np.sqrt(2.0)), True)


def make_noisy_task(
    m: int,
    target: Union[str, TargetKind] = TargetKind.SIN,
    noise: float = 0.1,
    copies: int = 3,
    constant: float = 0.0,
    scale: float = 1.0,
) -> DataSpec:
    """带标签噪声的网格任务：每个 x 携带 copies 个标签 scale·target(u) + noise·{-1, ..., +1}。"""

    if m < 2 or copies < 1:
        raise ConfigError("noisy task needs m >= 2 and copies >= 1")
    if noise < 0:
        raise ConfigError(f"noise must be nonnegative, got {noise}")
    kind = _parse_target(target)
    u = np.linspace(-1.0, 1.0, m)
    clean = _check_scale(scale) * _target_values(u, kind, constant)
    offsets = noise * np.linspace(-1.0, 1.0, copies) if copies > 1 else np.zeros(1)
    xs = np.repeat(np.stack([u, np.ones(m)], axis=1), copies, axis=0)
    ys = (clean[:, None] + offsets[None, :]).reshape(-1)
    ps = np.full(m * copies, 1.0 / (m * copies))
    deterministic = not _has_conflicting_labels(xs, ys)
    return DataSpec(2, xs, ys, ps, float(np.sqrt(2.0)), deterministic)


# ---------------------------- 精确期望 ----------------------------


def expect(spec: DataSpec, f: Callable[[np.ndarray, float], Union[float, np.ndarray]]):
    """Σ_k p_k f(x_k, y_k)，按原子顺序确定性累加。"""

    total: Optional[np.ndarray] = None
    for k in range(spec.n_atoms):
        value = np.asarray(f(spec.xs[k], float(spec.ys[k])), dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite integrand at atom {k}", atom=k)
        term = spec.ps[k] * value
        total = term if total is None else total + term
    assert total is not None
    return float(total) if total.ndim == 0 else total


def expect_values(spec: DataSpec, values: np.ndarray, layer: Optional[str] = None) -> np.ndarray:
    """按原子堆叠的取值 values[k, ...] 的精确期望（einsum 固定求和顺序）。"""

    if values.shape[0] != spec.n_atoms:
        raise ConfigError("first axis of values must index data atoms")
    bad = ~np.isfinite(values)
    if np.any(bad):
        atom = int(np.argwhere(bad)[0][0])
        raise NumericError(f"non-finite integrand at atom {atom}", layer=layer, atom=atom)
    return np.einsum("k,k...->...", spec.ps, values)


# ---------------------------- 流式抽样 ----------------------------


@dataclass(frozen=True, slots=True)
class DataStream:
    spec: DataSpec
    seed: int
    counter: int = 0


def _categorical(spec: DataSpec, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(spec.ps)
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, spec.n_atoms - 1)


def draw_indices(stream: DataStream, count: int) -> Tuple[np.ndarray, DataStream]:
    """等价于连续调用 count 次 next_sample，只返回原子下标。"""

    if count < 0:
        raise ConfigError(f"count must be nonnegative, got {count}")
    if count == 0:
        return np.zeros(0, dtype=np.int64), stream
    idx = _categorical(stream.spec, uniform_block(stream.seed, DATA_STREAM_TAG, stream.counter, count))
    return idx.astype(np.int64), DataStream(stream.spec, stream.seed, stream.counter + count)


def next_sample(stream: DataStream) -> Tuple[Tuple[np.ndarray, float], DataStream]:
    idx, advanced = draw_indices(stream, 1)
    k = int(idx[0])
    return (stream.spec.xs[k], float(stream.spec.ys[k])), advanced


# ---------------------------- Bayes 风险 ----------------------------


def bayes_risk(spec: DataSpec, loss, iterations: int = 200) -> float:
    """inf_ỹ E[𝓛(Y, ỹ(X))]：对每个不同的 x 在单调的 ∂2𝓛 上二分求最优预测。"""

    if not loss.convex_in_second:
        raise ConfigError("bayes_risk requires a loss convex in its second argument")
    _, inverse = np.unique(spec.xs, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    risk = 0.0
    for g in np.unique(inverse):
        mask = inverse == g
        ys, ps = spec.ys[mask], spec.ps[mask]
        lo, hi = float(np.min(ys)), float(np.max(ys))
        for _ in range(iterations):
            if hi - lo <= 1e-15 * max(1.0, abs(lo)):
                break
            mid = 0.5 * (lo + hi)
            if float(np.dot(ps, loss.d2(ys, np.full_like(ys, mid)))) > 0.0:
                hi = mid
            else:
                lo = mid
        best = 0.5 * (lo + hi)
        risk += float(np.dot(ps, loss.value(ys, np.full_like(ys, best))))
    return risk


# ---------------------------- 文件格式 ----------------------------


def save_data_spec(spec: DataSpec, path: Union[str, Path]) -> None:
    """首行 `d,n_atoms`，其后每行 `x_0,...,x_{d-1},y,p`。"""

    path = Path(path)
    frame = pd.DataFrame(np.column_stack([spec.xs, spec.ys, spec.ps]))
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"{spec.dim_d},{spec.n_atoms}\n")
        frame.to_csv(fh, header=False, index=False, float_format="%.17g")


def load_data_spec(path: Union[str, Path], x_bound: Optional[float] = None) -> DataSpec:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        try:
            d, n_atoms = (int(v) for v in header.split(","))
        except ValueError:
            raise ConfigError(f"{path}: bad header {header!r}, expected 'd,n_atoms'") from None
        frame = pd.read_csv(fh, header=None, dtype=np.float64, float_precision="round_trip")
    if frame.shape != (n_atoms, d + 2):
        raise ConfigError(f"{path}: expected {n_atoms} rows of {d + 2} values, got {frame.shape}")
    values = frame.to_numpy()
    xs, ys, ps = values[:, :d], values[:, d], values[:, d + 1]
    logger.debug("data.loaded", path=str(path), d=d, n_atoms=n_atoms)
    return DataSpec.from_atoms(list(zip(xs, ys, ps)), x_bound=x_bound)
