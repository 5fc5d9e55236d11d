#!/usr/bin/env python3
"""
JSON logging for slotlog.

Every record is one JSON object on stderr, so CLI results on stdout can be
piped while the log stream is kept for later comparison of runs. Setting
`log_to_file` adds a rotating copy under `log_dir`.

Records of one logger share a run id (`correlation_id`). Keyword arguments
given to the logging helpers become top-level JSON keys.
"""

import logging
import logging.handlers
import json
import os
import sys
import time
import uuid
from datetime import datetime, timezone
from functools import wraps
from typing import Callable
from config import config

LOG_FILE_NAME = "slotlog.log"
LOG_FILE_BYTES = 10 * 1024 * 1024
LOG_FILE_BACKUPS = 5

# record attributes lifted to top-level keys when present
CONTEXT_ATTRIBUTES = ("correlation_id", "operation", "duration_ms", "item_count")


class JSONFormatter(logging.Formatter):
    """Render a LogRecord as a single JSON line."""

    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }
        for attribute in CONTEXT_ATTRIBUTES:
            if hasattr(record, attribute):
                entry[attribute] = getattr(record, attribute)
        entry.update(getattr(record, "extra_fields", {}))
        if record.exc_info:
            entry["exception"] = self.formatException(record.exc_info)
        # numpy scalars and paths fall back to str
        return json.dumps(entry, default=str)


def _console_handler() -> logging.Handler:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JSONFormatter())
    return handler


def _file_handler(log_dir: str) -> logging.Handler:
    os.makedirs(log_dir, exist_ok=True)
    handler = logging.handlers.RotatingFileHandler(
        os.path.join(log_dir, LOG_FILE_NAME),
        maxBytes=LOG_FILE_BYTES,
        backupCount=LOG_FILE_BACKUPS,
    )
    handler.setFormatter(JSONFormatter())
    return handler


class ExperimentLogger:
    """
    Logger shared by the engine, the trainer and the CLI.

    Wraps a stdlib logger whose handlers are attached once per name; later
    instances with the same name reuse them but get a fresh run id.
    """

    def __init__(self, name: str = "slotlog"):
        self.correlation_id = str(uuid.uuid4())
        self.logger = logging.getLogger(name)
        if not self.logger.handlers:
            self._attach_handlers()

    def _attach_handlers(self):
        level_name = str(config.log_level).upper()
        self.logger.setLevel(getattr(logging, level_name, logging.INFO))
        self.logger.addHandler(_console_handler())
        if config.log_to_file:
            self.logger.addHandler(_file_handler(config.log_dir))
        self.logger.propagate = False

    def _emit(self, level: int, message: str, fields: dict):
        self.logger.log(
            level, message,
            extra={"correlation_id": self.correlation_id, "extra_fields": fields},
        )

    def debug(self, message: str, **fields):
        self._emit(logging.DEBUG, message, fields)

    def info(self, message: str, **fields):
        self._emit(logging.INFO, message, fields)

    def warning(self, message: str, **fields):
        self._emit(logging.WARNING, message, fields)

    def error(self, message: str, **fields):
        self._emit(logging.ERROR, message, fields)

    def operation_start(self, operation: str, **fields):
        self.info(f"Operation started: {operation}", operation=operation, **fields)

    def operation_end(self, operation: str, duration_ms: float, **fields):
        self.info(
            f"Operation completed: {operation}",
            operation=operation,
            duration_ms=round(duration_ms, 2),
            **fields,
        )

    def circuit_compiled(self, query: str, node_count: int, variable_count: int):
        """Record the size of a compiled decision diagram."""
        self.info(
            f"Compiled circuit for {query}: {node_count} nodes over {variable_count} variables",
            operation="compile",
            query=query,
            item_count=node_count,
            variable_count=variable_count,
        )

    def epoch_end(self, epoch: int, **metrics):
        self.info(f"Epoch {epoch} finished", operation="train_epoch", epoch=epoch, **metrics)

    def divergence(self, step: int, loss: float):
        """Record a non-finite loss; the caller raises DivergenceError next."""
        self.error(
            f"DIVERGENCE: non-finite loss at step {step}",
            operation="train_step",
            step=step,
            loss=loss,
        )


def timed_operation(operation_name: str):
    """
    Decorator logging start, wall time and outcome of a call.

    Failures are logged with their exception type and re-raised unchanged.
    """
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            log = ExperimentLogger()
            log.operation_start(operation_name)
            started = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                log.error(
                    f"Operation failed: {operation_name}",
                    operation=operation_name,
                    duration_ms=round((time.perf_counter() - started) * 1000, 2),
                    error_type=type(e).__name__,
                    error_message=str(e),
                    status="error",
                )
                raise
            log.operation_end(operation_name, (time.perf_counter() - started) * 1000,
                              status="success")
            return result

        return wrapper
    return decorator


def get_logger(name: str = "slotlog") -> ExperimentLogger:
    return ExperimentLogger(name)


logger = get_logger()
