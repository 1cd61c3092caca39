"""权重快照文件：长表 CSV（layer,row,col,value），首行为 `# n1=..,n2=..,d=..,step_k=..` 元数据。

粒子系统快照使用同一格式，元数据里多一个连续时间字段 t。
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Union

import numpy as np
import pandas as pd

from .errors import StructuralError
from .metrics import read_metric_csv, write_metric_csv
from .models import LAYERS, NetworkParams, ParticleSystem

Params = Union[NetworkParams, ParticleSystem]


def _long_frame(w1: np.ndarray, w2: np.ndarray, w3: np.ndarray) -> pd.DataFrame:
    parts = []
    for name, w in zip(LAYERS, (w1, w2, w3.reshape(1, -1))):
        rows, cols = np.indices(w.shape)
        parts.append(
            pd.DataFrame(
                {"layer": name, "row": rows.reshape(-1), "col": cols.reshape(-1), "value": w.reshape(-1)}
            )
        )
    return pd.concat(parts, ignore_index=True)


def save_params(params: Params, path: Union[str, Path]) -> None:
    w1, w2, w3 = params.weights()
    meta: Dict[str, object] = {"n1": w1.shape[0], "n2": w3.shape[0], "d": w1.shape[1]}
    if isinstance(params, NetworkParams):
        meta["step_k"] = params.step_k
    else:
        meta["t"] = repr(float(params.t))
    write_metric_csv(path, _long_frame(w1, w2, w3), meta)


def load_params(path: Union[str, Path]) -> Params:
    frame, meta = read_metric_csv(path)
    try:
        n1, n2, d = int(meta["n1"]), int(meta["n2"]), int(meta["d"])
    except KeyError as exc:
        raise StructuralError(f"{path}: snapshot metadata lacks {exc}") from None
    shapes = {"w1": (n1, d), "w2": (n1, n2), "w3": (1, n2)}
    arrays = {}
    for name, shape in shapes.items():
        block = frame[frame["layer"] == name]
        if len(block) != shape[0] * shape[1]:
            raise StructuralError(f"{path}: layer {name} has {len(block)} entries, expected {shape[0] * shape[1]}")
        out = np.empty(shape)
        out[block["row"].to_numpy(), block["col"].to_numpy()] = block["value"].to_numpy(dtype=np.float64)
        arrays[name] = out
    w1, w2, w3 = arrays["w1"], arrays["w2"], arrays["w3"].reshape(-1)
    if "t" in meta:
        return ParticleSystem(w1, w2, w3, t=float(meta["t"]))
    return NetworkParams(w1, w2, w3, step_k=int(meta.get("step_k", 0)))
