from __future__ import annotations

# 简易多进程扫描执行器：扫描点（level × seed）分发到固定数量的工作进程，
# 结果按 key 排序后折叠，保证与进程数、完成顺序无关

import multiprocessing as mp
import queue
import signal
import time
from dataclasses import dataclass
from typing import Any, Callable, Hashable, List, Optional, Sequence, Tuple

import structlog

from .errors import ExitCode, Mf3netError

logger = structlog.get_logger(__name__)

Point = Tuple[Hashable, Any]


@dataclass(slots=True)
class PoolConfig:
    workers: int = 1
    shutdown_timeout_s: float = 5.0
    poll_interval_s: float = 0.5


class PointError(Mf3netError):
    """某个扫描点失败；completed 为失败前已完成的 (key, result)，按 key 排序。"""

    def __init__(self, message: str, *, key: Hashable, exit_code: int, completed: List[Tuple[Hashable, Any]]) -> None:
        super().__init__(message)
        self.key = key
        self.exit_code = ExitCode(exit_code)
        self.completed = completed


def _worker_loop(worker_id: int, fn: Callable[[Any], Any], in_q: mp.Queue, out_q: mp.Queue) -> None:
    signal.signal(signal.SIGINT, signal.SIG_IGN)
    while True:
        item = in_q.get()
        if item is None:
            break
        key, payload = item
        try:
            out_q.put((key, True, fn(payload)))
        except Exception as exc:  # 失败信息回传主进程，由主进程决定终止
            code = int(getattr(exc, "exit_code", ExitCode.RUNTIME))
            out_q.put((key, False, (type(exc).__name__, str(exc), code)))


def _sorted(done: List[Tuple[Hashable, Any]]) -> List[Tuple[Hashable, Any]]:
    return sorted(done, key=lambda kv: kv[0])


def _run_inline(fn: Callable[[Any], Any], points: Sequence[Point]) -> List[Tuple[Hashable, Any]]:
    done: List[Tuple[Hashable, Any]] = []
    for key, payload in sorted(points, key=lambda kv: kv[0]):
        try:
            done.append((key, fn(payload)))
        except Exception as exc:
            code = int(getattr(exc, "exit_code", ExitCode.RUNTIME))
            raise PointError(
                f"point {key} failed: {type(exc).__name__}: {exc}", key=key, exit_code=code, completed=_sorted(done)
            ) from exc
    return done


def run_points(
    fn: Callable[[Any], Any],
    points: Sequence[Point],
    config: Optional[PoolConfig] = None,
) -> List[Tuple[Hashable, Any]]:
    """对每个 (key, payload) 计算 fn(payload)，返回按 key 排序的 (key, result)。

    - workers == 1 时在本进程内顺序执行
    - 任一点失败即停止派发，抛出 PointError（携带已完成结果，便于写出部分 CSV）
    """

    config = config or PoolConfig()
    if config.workers <= 1 or len(points) <= 1:
        return _run_inline(fn, points)

    num_workers = min(config.workers, len(points))
    in_q: mp.Queue = mp.Queue()
    out_q: mp.Queue = mp.Queue()
    procs: List[mp.Process] = []
    for wid in range(num_workers):
        p = mp.Process(target=_worker_loop, args=(wid, fn, in_q, out_q), daemon=True)
        p.start()
        procs.append(p)

    done: List[Tuple[Hashable, Any]] = []
    failure: Optional[Tuple[Hashable, Tuple[str, str, int]]] = None
    try:
        for point in sorted(points, key=lambda kv: kv[0]):
            in_q.put(point)
        for _ in range(num_workers):
            in_q.put(None)
        pending = len(points)
        while pending and failure is None:
            try:
                key, ok, payload = out_q.get(timeout=config.poll_interval_s)
            except queue.Empty:
                if not any(p.is_alive() for p in procs):
                    raise Mf3netError("all sweep workers exited before finishing") from None
                continue
            pending -= 1
            if ok:
                done.append((key, payload))
                logger.debug("pool.point_done", key=key, remaining=pending)
            else:
                failure = (key, payload)
    finally:
        deadline = time.time() + config.shutdown_timeout_s
        for p in procs:
            if failure is not None:
                p.terminate()
            p.join(max(0.0, deadline - time.time()))
        for p in procs:
            if p.is_alive():
                p.terminate()

    if failure is not None:
        key, (name, message, code) = failure
        raise PointError(f"point {key} failed: {name}: {message}", key=key, exit_code=code, completed=_sorted(done))
    return _sorted(done)
