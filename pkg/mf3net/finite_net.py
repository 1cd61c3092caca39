"""宽度 (n1, n2) 的三层网络：前向量 H2 / H3 / ŷ，反向量 Grad_1/2/3 与 Δ2^H，单样本 SGD。

所有对神经元下标的求和均用 np.einsum（不走 BLAS），求和顺序固定，结果与线程数无关。
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import structlog

from .data import DataSpec, DataStream, draw_indices
from .errors import ConfigError, NumericError, StructuralError
from .math_core import ModelSpec
from .models import LAYERS, ForwardTrace, Gradients, NetworkParams
from .recorder import TrajectoryRecorder, horizon_steps

logger = structlog.get_logger(__name__)


@dataclass(slots=True)
class BatchForward:
    """对一批输入 X (A, d) 的前向量。"""

    pre1: np.ndarray  # (A, n1)  <w1[j1], x>
    act1: np.ndarray  # (A, n1)  φ1(pre1)
    h2: np.ndarray  # (A, n2)
    act2: np.ndarray  # (A, n2)  φ2(h2)
    h3: np.ndarray  # (A,)
    yhat: np.ndarray  # (A,)


@dataclass(slots=True)
class BatchBackward:
    """c = ∂2𝓛(y, ŷ)·φ3'(H3)，d2H = c·w3·φ2'(H2)，逐输入。"""

    forward: BatchForward
    c: np.ndarray  # (A,)
    d2H: np.ndarray  # (A, n2)


def _check_dims(w1: np.ndarray, X: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[1] != w1.shape[1]:
        raise StructuralError(f"input dimension {X.shape[-1]} does not match w1 columns {w1.shape[1]}")


def forward_batch(w1: np.ndarray, w2: np.ndarray, w3: np.ndarray, X: np.ndarray, model: ModelSpec) -> BatchForward:
    X = np.asarray(X, dtype=np.float64)
    _check_dims(w1, X)
    n1, n2 = w2.shape
    pre1 = np.einsum("ad,jd->aj", X, w1)
    act1 = model.phi1.value(pre1)
    h2 = np.einsum("aj,jk->ak", act1, w2) / n1
    act2 = model.phi2.value(h2)
    h3 = np.einsum("ak,k->a", act2, w3) / n2
    yhat = model.phi3.value(h3)
    return BatchForward(pre1, act1, h2, act2, h3, yhat)


def backward_batch(
    w1: np.ndarray,
    w2: np.ndarray,
    w3: np.ndarray,
    X: np.ndarray,
    Y: np.ndarray,
    model: ModelSpec,
) -> BatchBackward:
    fwd = forward_batch(w1, w2, w3, X, model)
    c = model.loss.d2(np.asarray(Y, dtype=np.float64), fwd.yhat) * model.phi3.derivative(fwd.h3)
    d2H = c[:, None] * w3[None, :] * model.phi2.derivative(fwd.h2)
    return BatchBackward(fwd, c, d2H)


def forward(W: NetworkParams, x: np.ndarray, model: ModelSpec) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise StructuralError(f"x must be a vector, got shape {x.shape}")
    fwd = forward_batch(W.w1, W.w2, W.w3, x[None, :], model)
    return ForwardTrace(h2=fwd.h2[0], h3=float(fwd.h3[0]), yhat=float(fwd.yhat[0]))


def backward(W: NetworkParams, z: Tuple[np.ndarray, float], model: ModelSpec) -> Gradients:
    x, y = z
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise StructuralError(f"x must be a vector, got shape {x.shape}")
    bwd = backward_batch(W.w1, W.w2, W.w3, x[None, :], np.array([float(y)]), model)
    fwd = bwd.forward
    d2H = bwd.d2H[0]
    g3 = bwd.c[0] * fwd.act2[0]
    g2 = np.einsum("j,k->jk", fwd.act1[0], d2H)
    back = np.einsum("k,jk->j", d2H, W.w2) / W.n2
    g1 = np.einsum("j,d->jd", back * model.phi1.derivative(fwd.pre1[0]), x)
    return Gradients(g3=g3, g2=g2, g1=g1, d2H=d2H)


def _checked(name: str, g: np.ndarray) -> np.ndarray:
    bad = ~np.isfinite(g)
    if np.any(bad):
        index = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite gradient in {name} at flat index {index}", layer=name, index=index)
    return g


def sgd_step(W: NetworkParams, z: Tuple[np.ndarray, float], eps: float, model: ModelSpec) -> NetworkParams:
    """W(k+1) = W(k) − ε·ξ(kε)·Grad，返回新对象，不修改 W。"""

    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    xi1, xi2, xi3 = model.schedule.rates(W.step_k * eps)
    grads = backward(W, z, model)
    g1, g2, g3 = (_checked(name, g) for name, g in zip(LAYERS, (grads.g1, grads.g2, grads.g3)))
    return NetworkParams(
        w1=W.w1 - eps * xi1 * g1,
        w2=W.w2 - eps * xi2 * g2,
        w3=W.w3 - eps * xi3 * g3,
        step_k=W.step_k + 1,
    )


@dataclass(slots=True)
class TrainResult:
    params: NetworkParams
    stream: DataStream
    recorder: Optional[TrajectoryRecorder]
    samples_used: int


def train(
    W0: NetworkParams,
    stream: DataStream,
    T: float,
    eps: float,
    model: ModelSpec,
    recorder: Optional[TrajectoryRecorder] = None,
) -> TrainResult:
    """运行 ⌊T/ε⌋ 步 SGD，每步一个新样本；记录器在其记录步收到快照。"""

    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    if W0.d != stream.spec.dim_d:
        raise StructuralError(f"network input dim {W0.d} != data dim {stream.spec.dim_d}")
    steps = horizon_steps(T, eps)
    indices, stream_after = draw_indices(stream, steps)
    spec = stream.spec
    W = W0
    if recorder is not None:
        recorder.record(0, *W.weights())
    for k in range(steps):
        a = int(indices[k])
        W = sgd_step(W, (spec.xs[a], float(spec.ys[a])), eps, model)
        if recorder is not None:
            recorder.record(k + 1, *W.weights())
    logger.debug("sgd.done", steps=steps, eps=eps, n1=W.n1, n2=W.n2)
    return TrainResult(params=W, stream=stream_after, recorder=recorder, samples_used=steps)


def population_risk(w1: np.ndarray, w2: np.ndarray, w3: np.ndarray, spec: DataSpec, model: ModelSpec) -> float:
    """𝓛(W) = E_Z[𝓛(Y, ŷ(X; W))]，对原子精确求期望。"""

    fwd = forward_batch(w1, w2, w3, spec.xs, model)
    return float(np.einsum("k,k->", spec.ps, model.loss.value(spec.ys, fwd.yhat)))
