import pytest

from error_handler import TrainingError
from performance_monitor import PerformanceMonitor


def test_timer_records_success_and_failure():
    monitor = PerformanceMonitor()
    with monitor.time_operation("stage:split"):
        pass
    with pytest.raises(TrainingError):
        with monitor.time_operation("stage:split"):
            raise TrainingError("no candidates")

    stats = monitor.get_operation_stats("stage:split")
    assert stats["count"] == 2
    assert stats["success_count"] == 1
    assert stats["last_error"] == "TrainingError"
    assert [m.error_type for m in monitor.get_failures()] == ["TrainingError"]


def test_summary_reports_success_rate():
    monitor = PerformanceMonitor()
    monitor.record_metric("stage:generate", 0.5, True)
    monitor.record_metric("stage:generate", 1.5, False, "ShapeError")
    summary = monitor.get_performance_summary()
    entry = summary["operations_by_type"]["stage:generate"]
    assert entry["count"] == 2
    assert entry["success_rate"] == 50
    assert entry["avg_time"] == 1.0
    assert summary["total_operations"] == 2


def test_history_is_bounded():
    monitor = PerformanceMonitor(max_history=3)
    for _ in range(5):
        monitor.record_metric("stage:report", 0.01, True)
    assert len(monitor.metrics) == 3
    assert monitor.get_operation_stats("stage:report")["count"] == 5


def test_unknown_operation_has_empty_stats():
    assert PerformanceMonitor().get_operation_stats("stage:missing") == {}
