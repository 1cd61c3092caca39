"""按键派生的随机流：(seed, 流 tag, 键...) 确定一个 numpy Generator。

- 同一个键总得到同一条流，与抽样顺序、线程数无关；
- 流内按顺序填充，因此宽度 n 的抽样是宽度 m ≥ n 抽样的前缀（嵌套一致性）；
- 数据流按固定长度分块、每块一条流，任意计数器位置都可以直接定位。

位生成器用 Philox，键经 SeedSequence 的 spawn_key 派生。
"""

from __future__ import annotations

from enum import IntEnum
from typing import Union

import numpy as np

from .errors import ConfigError

# 数据流每块的长度，块号作为派生键
BLOCK_SIZE = 4096


class StreamTag(IntEnum):
    W1 = 1
    W2 = 2
    W3 = 3
    DATA = 4


TagLike = Union[str, StreamTag]


def stream_tag(tag: TagLike) -> StreamTag:
    if isinstance(tag, StreamTag):
        return tag
    try:
        return StreamTag[str(tag).upper()]
    except KeyError:
        raise ConfigError(f"unknown random stream tag: {tag!r}") from None


def _check_seed(seed: int) -> int:
    if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    if seed < 0:
        raise ConfigError(f"seed must be nonnegative, got {seed}")
    return int(seed)


def generator(seed: int, tag: TagLike, *key: int) -> np.random.Generator:
    """(seed, tag, key...) 对应的独立随机流。"""

    seed = _check_seed(seed)
    parts = [int(k) for k in key]
    if any(k < 0 for k in parts):
        raise ConfigError(f"stream keys must be nonnegative, got {tuple(parts)}")
    seq = np.random.SeedSequence(seed, spawn_key=(int(stream_tag(tag)), *parts))
    return np.random.Generator(np.random.Philox(seq))


def uniform_block(seed: int, tag: TagLike, start: int, count: int) -> np.ndarray:
    """计数器区间 [start, start + count) 上的 [0, 1) 均匀数，与区间如何切分无关。"""

    if start < 0 or count < 0:
        raise ConfigError(f"counter range must be nonnegative, got start={start}, count={count}")
    if count == 0:
        return np.zeros(0, dtype=np.float64)
    first, last = start // BLOCK_SIZE, (start + count - 1) // BLOCK_SIZE
    values = np.concatenate([generator(seed, tag, block).random(BLOCK_SIZE) for block in range(first, last + 1)])
    offset = start - first * BLOCK_SIZE
    return values[offset : offset + count]
