"""
Low-Light Synthesis Error Handling
Provides the error hierarchy, per-file error bookkeeping for batch runs and exit-code mapping
"""
import logging
import functools
from typing import Dict, Any, Optional, List
from enum import Enum
from dataclasses import dataclass, field
from datetime import datetime


class ErrorSeverity(Enum):
    """Error severity levels"""
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"


class ErrorCategory(Enum):
    """Error categories for classification"""
    VALIDATION = "validation"
    PARAMETER = "parameter"
    CONFIGURATION = "configuration"
    IO = "io"
    DIMENSION = "dimension"
    REPLAY = "replay"
    TRAINING = "training"


@dataclass
class ErrorContext:
    """Context information for error handling"""
    operation: str
    file_path: Optional[str] = None
    stream: Optional[int] = None
    timestamp: datetime = field(default_factory=datetime.now)


@dataclass
class ErrorMetrics:
    """Track error counts for the batch report"""
    total_errors: int = 0
    errors_by_category: Dict[str, int] = field(default_factory=dict)
    errors_by_severity: Dict[str, int] = field(default_factory=dict)


class SynthesisError(Exception):
    """Base error of the synthesis pipeline"""
    def __init__(self, message: str, category: ErrorCategory = ErrorCategory.VALIDATION,
                 severity: ErrorSeverity = ErrorSeverity.MEDIUM,
                 context: Optional[ErrorContext] = None,
                 recoverable: bool = True):
        super().__init__(message)
        self.category = category
        self.severity = severity
        self.context = context or ErrorContext("unknown")
        self.recoverable = recoverable


class InvalidImageError(SynthesisError):
    """Image content or color state does not satisfy a stage precondition"""
    def __init__(self, message: str, **kwargs):
        super().__init__(message, ErrorCategory.VALIDATION, ErrorSeverity.MEDIUM, **kwargs)


class ParameterError(SynthesisError):
    """A transformation parameter is outside its valid domain"""
    def __init__(self, message: str, parameter: Optional[str] = None, **kwargs):
        super().__init__(message, ErrorCategory.PARAMETER, ErrorSeverity.MEDIUM, **kwargs)
        self.parameter = parameter


class DimensionError(SynthesisError):
    """Array shapes do not match what the operation needs"""
    def __init__(self, message: str, **kwargs):
        super().__init__(message, ErrorCategory.DIMENSION, ErrorSeverity.MEDIUM, **kwargs)


class ConfigurationError(SynthesisError):
    """Configuration could not be parsed or validated"""
    def __init__(self, message: str, field_name: Optional[str] = None,
                 line: Optional[int] = None, column: Optional[int] = None, **kwargs):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message, ErrorCategory.CONFIGURATION, ErrorSeverity.HIGH,
                         recoverable=False, **kwargs)
        self.field_name = field_name
        self.line = line
        self.column = column


class ImageFormatError(SynthesisError):
    """Unsupported image container or bit depth"""
    def __init__(self, message: str, **kwargs):
        super().__init__(message, ErrorCategory.IO, ErrorSeverity.MEDIUM, **kwargs)


class OutputError(SynthesisError):
    """Output location cannot be written; batches abort on this"""
    def __init__(self, message: str, **kwargs):
        super().__init__(message, ErrorCategory.IO, ErrorSeverity.CRITICAL,
                         recoverable=False, **kwargs)


class ReplayMismatchError(SynthesisError):
    """A sidecar does not reproduce its degraded image"""
    def __init__(self, message: str, **kwargs):
        super().__init__(message, ErrorCategory.REPLAY, ErrorSeverity.HIGH, **kwargs)


class TrainingDivergedError(SynthesisError):
    """Training produced a non-finite loss"""
    def __init__(self, message: str, step: int = -1,
                 breakdown: Optional[Dict[str, float]] = None, **kwargs):
        super().__init__(message, ErrorCategory.TRAINING, ErrorSeverity.HIGH,
                         recoverable=False, **kwargs)
        self.step = step
        self.breakdown = breakdown or {}


class ErrorHandler:
    """Collects per-file errors of a batch and classifies foreign exceptions"""

    def __init__(self, max_error_log_size: int = 10000):
        self.metrics = ErrorMetrics()
        self.error_log: List[Dict[str, Any]] = []
        self.max_error_log_size = max_error_log_size

    def handle_error(self, error: Exception, context: ErrorContext) -> Dict[str, Any]:
        """Record an error and return its manifest entry"""
        if not isinstance(error, SynthesisError):
            error = self._classify_error(error, context)

        self._update_metrics(error)
        entry = self._log_error(error, context)

        if not error.recoverable:
            raise error
        return entry

    def _classify_error(self, error: Exception, context: ErrorContext) -> SynthesisError:
        """Classify generic exceptions into synthesis errors"""
        if isinstance(error, (OSError, EOFError)):
            return ImageFormatError(str(error) or type(error).__name__, context=context)
        if isinstance(error, (ValueError, ArithmeticError)):
            return InvalidImageError(str(error), context=context)
        return SynthesisError(str(error), context=context)

    def _update_metrics(self, error: SynthesisError):
        self.metrics.total_errors += 1
        self.metrics.errors_by_category[error.category.value] = \
            self.metrics.errors_by_category.get(error.category.value, 0) + 1
        self.metrics.errors_by_severity[error.severity.value] = \
            self.metrics.errors_by_severity.get(error.severity.value, 0) + 1

    def _log_error(self, error: SynthesisError, context: ErrorContext) -> Dict[str, Any]:
        error_entry = {
            'file': context.file_path,
            'operation': context.operation,
            'error': str(error),
            'error_type': type(error).__name__,
            'category': error.category.value,
            'severity': error.severity.value,
        }

        self.error_log.append(error_entry)
        if len(self.error_log) > self.max_error_log_size:
            self.error_log = self.error_log[-self.max_error_log_size:]

        log_level = logging.ERROR if error.severity in (ErrorSeverity.HIGH, ErrorSeverity.CRITICAL) \
            else logging.WARNING
        logging.getLogger("lowlight.errors").log(
            log_level, f"Error in {context.operation}: {error}",
            extra={'error_category': error.category.value, 'file_path': context.file_path})
        return error_entry

    def merge_entry(self, entry: Dict[str, Any]):
        """Fold an entry produced by another handler (e.g. a worker process) into this one"""
        self.metrics.total_errors += 1
        for key, bucket in (('category', self.metrics.errors_by_category),
                            ('severity', self.metrics.errors_by_severity)):
            bucket[entry[key]] = bucket.get(entry[key], 0) + 1
        self.error_log.append(entry)

    def get_error_report(self) -> Dict[str, Any]:
        """Summary embedded in manifests"""
        return {
            'total_errors': self.metrics.total_errors,
            'by_category': dict(sorted(self.metrics.errors_by_category.items())),
            'by_severity': dict(sorted(self.metrics.errors_by_severity.items())),
        }


def exit_code_for(error: BaseException) -> int:
    """CLI exit code for an error escaping a command"""
    if isinstance(error, ConfigurationError):
        return 2
    return 1


def reraise_as(error_type: type, operation: str):
    """Decorator wrapping foreign exceptions of an operation into a synthesis error"""
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except SynthesisError:
                raise
            except Exception as e:
                raise error_type(f"{operation} failed: {e}",
                                 context=ErrorContext(operation=operation)) from e
        return wrapper
    return decorator
