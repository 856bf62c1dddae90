"""
Performance Monitor - Tracks pipeline stage timings
Times stages and training sweeps; numbers are logged only and never enter metrics artifacts
"""

import time
from collections import deque
from dataclasses import asdict, dataclass
from typing import Any, Deque, Dict, List, Optional

from error_handler import get_error_handler


@dataclass
class StageTiming:
    started_at: float
    operation: str
    duration: float
    success: bool
    error_type: Optional[str] = None


@dataclass
class OperationStats:
    count: int = 0
    success_count: int = 0
    error_count: int = 0
    total_time: float = 0.0
    slowest: float = 0.0
    last_error: Optional[str] = None

    @property
    def avg_time(self) -> float:
        return self.total_time / self.count if self.count else 0.0

    @property
    def success_rate(self) -> float:
        return 100.0 * self.success_count / self.count if self.count else 0.0

    def add(self, duration: float, success: bool, error_type: Optional[str]) -> None:
        self.count += 1
        self.total_time += duration
        self.slowest = max(self.slowest, duration)
        if success:
            self.success_count += 1
        else:
            self.error_count += 1
            self.last_error = error_type


class PerformanceMonitor:
    def __init__(self, max_history: int = 1000, slow_threshold: float = 60.0):
        self.error_handler = get_error_handler()
        self.slow_threshold = slow_threshold
        self.history: Deque[StageTiming] = deque(maxlen=max_history)
        self.stats: Dict[str, OperationStats] = {}
        self.created_at = time.time()

    @property
    def metrics(self) -> Deque[StageTiming]:
        return self.history

    def time_operation(self, operation_name: str) -> "OperationTimer":
        """Context manager for timing a stage or sweep"""
        return OperationTimer(self, operation_name)

    def record_metric(self, operation: str, duration: float, success: bool, error_type: Optional[str] = None) -> None:
        self.history.append(StageTiming(time.time() - duration, operation, duration, success, error_type))
        self.stats.setdefault(operation, OperationStats()).add(duration, success, error_type)

        if duration > self.slow_threshold:
            self.error_handler.log_warning(f"Slow stage: {operation} took {duration:.1f}s")
        else:
            self.error_handler.log_debug(f"{operation} took {duration:.2f}s")

    def get_operation_stats(self, operation: Optional[str] = None) -> Dict[str, Any]:
        if operation:
            stats = self.stats.get(operation)
            return asdict(stats) if stats else {}
        return {name: asdict(stats) for name, stats in self.stats.items()}

    def get_failures(self) -> List[StageTiming]:
        return [timing for timing in self.history if not timing.success]

    def get_performance_summary(self) -> Dict[str, Any]:
        return {
            'uptime_seconds': round(time.time() - self.created_at, 1),
            'total_operations': len(self.history),
            'operations_by_type': {
                name: {
                    'count': stats.count,
                    'success_rate': stats.success_rate,
                    'avg_time': round(stats.avg_time, 3),
                    'slowest': round(stats.slowest, 3),
                    'last_error': stats.last_error,
                }
                for name, stats in self.stats.items()
            },
        }

    def log_summary(self) -> None:
        for name, stats in self.stats.items():
            self.error_handler.log_info(
                f"{name}: {stats.count} run(s), avg {stats.avg_time:.2f}s, "
                f"slowest {stats.slowest:.2f}s, {stats.success_rate:.0f}% ok")


class OperationTimer:
    def __init__(self, monitor: PerformanceMonitor, operation_name: str):
        self.monitor = monitor
        self.operation_name = operation_name
        self.started: Optional[float] = None
        self.duration: Optional[float] = None

    def __enter__(self) -> "OperationTimer":
        self.started = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> bool:
        self.duration = time.perf_counter() - self.started
        error_type = exc_type.__name__ if exc_type is not None else None
        self.monitor.record_metric(self.operation_name, self.duration, exc_type is None, error_type)
        return False  # exceptions propagate to the stage runner


_performance_monitor = PerformanceMonitor()


def get_performance_monitor() -> PerformanceMonitor:
    return _performance_monitor
