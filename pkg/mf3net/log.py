"""structlog 配置。

库代码只调用 `structlog.get_logger(__name__)`，配置由入口（CLI/脚本）负责一次完成。
日志写 stderr，CSV 结果文件不受影响。
"""

from __future__ import annotations

import logging
import sys

import structlog

from .errors import ConfigError


def configure_logging(level: str = "info", json: bool = False) -> None:
    numeric_level = getattr(logging, level.upper(), None)
    if not isinstance(numeric_level, int):
        raise ConfigError(f"unknown log level: {level!r}")
    renderer = (
        structlog.processors.JSONRenderer()
        if json
        else structlog.dev.ConsoleRenderer(colors=False)
    )
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso", utc=True),
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(numeric_level),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )
