"""
Error Handler - Centralized logging and exception routing for the cfodds pipeline
Routes logs to the terminal with emoji prioritization and defines the error types every module raises
"""

import logging
import os
import sys
from enum import Enum
from typing import Any, Optional


class CfoddsError(Exception):
    """Base class for every error raised by this package"""


class ConfigurationError(CfoddsError, ValueError):
    """Invalid configuration: names the violated invariant or the offending key"""


class DatasetFormatError(CfoddsError, ValueError):
    """Malformed or invalid dataset record"""

    def __init__(self, message: str, line_number: Optional[int] = None, sample_id: Optional[int] = None):
        location = []
        if line_number is not None:
            location.append(f"line {line_number}")
        if sample_id is not None:
            location.append(f"sample {sample_id}")
        prefix = f"[{', '.join(location)}] " if location else ""
        super().__init__(f"{prefix}{message}")
        self.detail = message
        self.line_number = line_number
        self.sample_id = sample_id


class ShapeError(CfoddsError, ValueError):
    """Array dimensions do not match the network or model spec"""


class StaleCacheError(CfoddsError, RuntimeError):
    """Backward called without a cache from a matching forward pass"""


class DivergenceError(CfoddsError, RuntimeError):
    """Training produced a non-finite loss"""


class TrainingError(CfoddsError, RuntimeError):
    """No training candidate produced a usable model"""


class UndefinedMetricError(CfoddsError, ValueError):
    """Metric undefined for the given labels (e.g. a single class)"""


class MissingArtifactError(CfoddsError, FileNotFoundError):
    """An upstream stage artifact is absent"""

    def __init__(self, path: Any, stage: str = ""):
        hint = f" (run the '{stage}' stage first)" if stage else ""
        super().__init__(f"Missing artifact: expected {path}{hint}")
        self.path = str(path)
        self.stage = stage


class LogLevel(Enum):
    SUCCESS = "✅"
    WARNING = "⚠️"
    ERROR = "❌"
    INFO = "ℹ️"
    DEBUG = "🔍"


class ErrorHandler:
    def __init__(self):
        self.logger = self._setup_logger()

    def _setup_logger(self) -> logging.Logger:
        """Setup structured logging with emoji prioritization"""
        logger = logging.getLogger("cfodds")
        level_name = os.getenv("CFODDS_LOG_LEVEL", "INFO").upper()
        logger.setLevel(getattr(logging, level_name, logging.INFO))
        logger.propagate = False

        if logger.handlers:
            logger.handlers.clear()

        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(logging.DEBUG)

        formatter = logging.Formatter(
            '%(asctime)s | %(levelname)s | %(message)s',
            datefmt='%H:%M:%S'
        )
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

        return logger

    def log_success(self, message: str) -> None:
        self.logger.info(f"{LogLevel.SUCCESS.value} {message}")

    def log_warning(self, message: str) -> None:
        self.logger.warning(f"{LogLevel.WARNING.value} {message}")

    def log_error(self, message: str, exception: Optional[Exception] = None) -> None:
        """Log error message with optional exception details"""
        formatted_msg = f"{LogLevel.ERROR.value} {message}"

        if exception:
            self.logger.error(f"{formatted_msg}: {exception}", exc_info=exception)
        else:
            self.logger.error(formatted_msg)

    def log_info(self, message: str) -> None:
        self.logger.info(f"{LogLevel.INFO.value} {message}")

    def log_debug(self, message: str) -> None:
        self.logger.debug(f"{LogLevel.DEBUG.value} {message}")

    def handle_exception(self, exception: Exception, context: str = "") -> None:
        """Domain errors get one line; anything else keeps its traceback"""
        if isinstance(exception, MissingArtifactError):
            self.log_error(f"{exception} in {context}")
        elif isinstance(exception, (ConfigurationError, DatasetFormatError)):
            self.log_error(f"Invalid input in {context}: {exception}")
        elif isinstance(exception, (DivergenceError, TrainingError)):
            self.log_error(f"Training failed in {context}: {exception}")
        elif isinstance(exception, CfoddsError):
            self.log_error(f"{type(exception).__name__} in {context}: {exception}")
        else:
            self.log_error(f"Unexpected exception in {context}", exception)

    def log_stage_event(self, stage: str, details: str, is_success: bool = True) -> None:
        """Log pipeline stage events with consistent formatting"""
        message = f"{stage.upper()} | {details}"
        if is_success:
            self.log_success(message)
        else:
            self.log_error(message)

    def log_epoch(self, component: str, epoch: int, train_loss: float, val_loss: float) -> None:
        """Per-epoch losses, at debug level"""
        self.log_debug(f"{component} epoch {epoch}: train={train_loss:.6g} val={val_loss:.6g}")

    def log_artifact(self, path: str, digest: str) -> None:
        self.log_debug(f"Wrote {path} ({digest[:12]})")

    def log_startup(self, component: str) -> None:
        self.log_success(f"{component} initialized")

    def log_shutdown(self, component: str) -> None:
        self.log_info(f"{component} shutting down")


_error_handler = ErrorHandler()


def get_error_handler() -> ErrorHandler:
    return _error_handler
