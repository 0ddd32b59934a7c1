"""
Low-Light Synthesis Structured Logging
structlog over the standard library with rotating files; logs go to stderr so stdout stays
free for command results
"""
import sys
import time
import logging
import logging.handlers
import functools
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, NamedTuple, Optional

import numpy as np
import psutil
import structlog
from structlog.dev import ConsoleRenderer
from structlog.processors import JSONRenderer

MIB = 1024 * 1024


class LogFile(NamedTuple):
    filename: str
    max_bytes: int
    backups: int
    level: Optional[int]  # None follows the configured level


LOG_FILES: Dict[str, LogFile] = {
    'main': LogFile("lowlight_synth.log", 10 * MIB, 5, None),
    'errors': LogFile("lowlight_errors.log", 5 * MIB, 3, logging.ERROR),
}


@dataclass
class LoggingSettings:
    """Logging section of the configuration file"""
    level: str = "INFO"
    json: bool = False
    directory: Optional[str] = None

    def __post_init__(self):
        if not isinstance(logging.getLevelName(str(self.level).upper()), int):
            from error_handler import ConfigurationError
            raise ConfigurationError(f"unknown log level '{self.level}'", field_name="logging.level")

    @property
    def numeric_level(self) -> int:
        return logging.getLevelName(self.level.upper())


class SynthLogManager:
    """Installs structlog rendering and the stderr/file handlers for one process"""

    def __init__(self, settings: LoggingSettings):
        self.settings = settings
        structlog.configure(
            processors=[
                structlog.stdlib.filter_by_level,
                structlog.stdlib.add_logger_name,
                structlog.stdlib.add_log_level,
                structlog.processors.TimeStamper(fmt="iso"),
                structlog.processors.StackInfoRenderer(),
                structlog.processors.format_exc_info,
                JSONRenderer() if settings.json else ConsoleRenderer(colors=False),
            ],
            wrapper_class=structlog.stdlib.BoundLogger,
            logger_factory=structlog.stdlib.LoggerFactory(),
            cache_logger_on_first_use=False,
        )
        self._install_handlers()
        self.logger = structlog.get_logger("lowlight")

    def _install_handlers(self):
        root = logging.getLogger()
        for handler in root.handlers[:]:
            root.removeHandler(handler)
        root.setLevel(self.settings.numeric_level)

        # structlog already rendered the event
        formatter = logging.Formatter('%(message)s')
        handlers = [logging.StreamHandler(sys.stderr)]
        handlers[0].setLevel(self.settings.numeric_level)

        if self.settings.directory:
            log_dir = Path(self.settings.directory)
            log_dir.mkdir(parents=True, exist_ok=True)
            for log_file in LOG_FILES.values():
                handler = logging.handlers.RotatingFileHandler(
                    log_dir / log_file.filename, maxBytes=log_file.max_bytes, backupCount=log_file.backups,
                    encoding="utf-8")
                handler.setLevel(log_file.level if log_file.level is not None else self.settings.numeric_level)
                handlers.append(handler)

        for handler in handlers:
            handler.setFormatter(formatter)
            root.addHandler(handler)

    def get_log_files(self) -> Dict[str, Path]:
        log_dir = Path(self.settings.directory or ".")
        return {name: log_dir / f.filename for name, f in LOG_FILES.items()}

    def log_batch_summary(self, operation: str, total: int, failed: int, **extra):
        self.logger.info(
            "Batch finished",
            operation=operation,
            images=total,
            completed=total - failed,
            failed=failed,
            failure_rate=round(failed / total, 4) if total else 0.0,
            event_type="batch_complete",
            **extra
        )

    def log_system_info(self, **extra):
        self.logger.info("Environment", event_type="system_info", **system_info(), **extra)


def system_info() -> Dict[str, object]:
    """Platform, interpreter, numpy and machine capacity; goes into reports and run logs"""
    return {
        'platform': platform.platform(),
        'python_version': platform.python_version(),
        'numpy_version': np.__version__,
        'cpu_count': psutil.cpu_count(),
        'memory_total': psutil.virtual_memory().total,
    }


def _rss() -> int:
    return psutil.Process().memory_info().rss


class OperationTimer:
    """Times a block and logs start, completion (with RSS growth) or failure"""

    def __init__(self, logger, operation: str, **context):
        self.logger = logger
        self.operation = operation
        self.context = context
        self.duration = 0.0
        self._started = 0.0
        self._rss_before = 0

    def __enter__(self):
        self._started = time.perf_counter()
        self._rss_before = _rss()
        self.logger.debug("Operation started", operation=self.operation,
                          event_type="operation_start", **self.context)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.duration = time.perf_counter() - self._started
        if exc_type:
            self.logger.error("Operation failed", operation=self.operation,
                              duration=round(self.duration, 4), error=str(exc_val),
                              error_type=exc_type.__name__, event_type="operation_error", **self.context)
        else:
            self.logger.debug("Operation completed", operation=self.operation,
                              duration=round(self.duration, 4), rss_growth=_rss() - self._rss_before,
                              event_type="operation_complete", **self.context)


def get_logger(name: str = "lowlight"):
    return structlog.get_logger(name)


def log_operation(operation: str, **context):
    """Wrap a function in an OperationTimer named after it"""
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            with OperationTimer(get_logger(f"lowlight.{func.__name__}"), operation, **context):
                return func(*args, **kwargs)
        return wrapper
    return decorator


log_manager: Optional[SynthLogManager] = None


def setup_logging(settings: Optional[LoggingSettings] = None) -> SynthLogManager:
    """Install the global log manager; called once by the command-line entry point"""
    global log_manager
    log_manager = SynthLogManager(settings or LoggingSettings())
    return log_manager
