"""命令行入口：`mf3net <task> --config <file> [--out <dir>] [--workers k]`。

退出码：0 成功；1 运行期错误；2 配置/模型校验失败；3 验收断言失败。
"""

from __future__ import annotations

import argparse
from pathlib import Path
from typing import Dict, List, Optional

import structlog

from .config import TaskKind, config_from_mapping, load_config, resolve_workers
from .errors import ExitCode, Mf3netError
from .harness import run_task
from .log import configure_logging

logger = structlog.get_logger(__name__)


def _parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="mf3net",
        description="Three-layer network SGD, its mean-field particle limit, and coupling experiments.",
    )
    parser.add_argument("task", choices=[t.value for t in TaskKind])
    parser.add_argument("--config", dest="config_path", type=Path, help="flat key=value config file")
    parser.add_argument("--out", dest="output_dir", type=Path, help="output directory (overrides output_dir)")
    parser.add_argument("--workers", type=int, help="sweep worker processes (MF3NET_WORKERS wins)")
    parser.add_argument("--save", type=Path, help="train: write the final network snapshot here")
    parser.add_argument("--input", dest="input_path", type=Path, help="plot: result CSV to convert")
    parser.add_argument("--log-level", dest="log_level", choices=["debug", "info", "warning", "error"])
    parser.add_argument("--log-json", dest="log_json", action="store_true", help="render log events as JSON")
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    args = _parse_args(argv)
    configure_logging(args.log_level or "info", json=args.log_json)
    overrides: Dict[str, str] = {"task": args.task}
    if args.output_dir is not None:
        overrides["output_dir"] = str(args.output_dir)
    if args.log_level:
        overrides["log_level"] = args.log_level
    try:
        if args.config_path is not None:
            cfg = load_config(args.config_path, overrides)
        else:
            cfg = config_from_mapping(overrides)
        if not args.log_level and cfg.log_level != "info":
            configure_logging(cfg.log_level, json=args.log_json)
        workers = resolve_workers(args.workers, cfg)
        report = run_task(cfg, workers=workers, save=args.save, input_path=args.input_path)
    except Mf3netError as exc:
        logger.error("task.failed", task=args.task, error=type(exc).__name__, message=str(exc))
        return int(exc.exit_code)
    except OSError as exc:
        logger.error("task.failed", task=args.task, error=type(exc).__name__, message=str(exc))
        return int(ExitCode.RUNTIME)
    logger.info("task.done", task=args.task, outputs=[str(p) for p in report.outputs], **report.summary)
    return int(ExitCode.OK)


if __name__ == "__main__":
    raise SystemExit(main())
