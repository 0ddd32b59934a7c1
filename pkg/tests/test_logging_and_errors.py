"""Error bookkeeping, logging setup and batch progress"""
import logging
from dataclasses import fields

import pytest

import logger as logger_module
from error_handler import (
    ConfigurationError, ErrorCategory, ErrorContext, ErrorHandler, ErrorSeverity, ImageFormatError,
    InvalidImageError, OutputError, ParameterError, ReplayMismatchError, exit_code_for, reraise_as,
)
from logger import LoggingSettings, OperationTimer, get_logger, log_operation, setup_logging, system_info
from progress_tracker import BatchProgress, BatchStats, FileStatus
from sensor_noise import ParamRanges


class TestErrorHandler:

    def test_entry_fields(self):
        handler = ErrorHandler()
        entry = handler.handle_error(ParameterError("k out of range", parameter="k"),
                                     ErrorContext("degrade", file_path="a.png"))
        assert entry == {'file': "a.png", 'operation': "degrade", 'error': "k out of range",
                         'error_type': "ParameterError", 'category': "parameter", 'severity': "medium"}
        assert [f.name for f in fields(ErrorContext)] == ["operation", "file_path", "stream", "timestamp"]

    def test_foreign_exceptions_are_classified(self):
        handler = ErrorHandler()
        io_entry = handler.handle_error(OSError("truncated"), ErrorContext("degrade"))
        value_entry = handler.handle_error(ValueError("nan"), ErrorContext("degrade"))
        assert io_entry['error_type'] == "ImageFormatError" and io_entry['category'] == "io"
        assert value_entry['error_type'] == "InvalidImageError"
        assert handler.get_error_report() == {
            'total_errors': 2, 'by_category': {'io': 1, 'validation': 1}, 'by_severity': {'medium': 2}}

    def test_non_recoverable_errors_propagate(self):
        handler = ErrorHandler()
        with pytest.raises(OutputError):
            handler.handle_error(OutputError("disk full"), ErrorContext("degrade"))
        assert handler.metrics.total_errors == 1

    def test_merge_entry(self):
        worker, parent = ErrorHandler(), ErrorHandler()
        entry = worker.handle_error(ImageFormatError("bad header"), ErrorContext("degrade", file_path="x"))
        parent.merge_entry(entry)
        assert parent.get_error_report() == worker.get_error_report()
        assert parent.error_log == [entry]

    def test_log_is_bounded(self):
        handler = ErrorHandler(max_error_log_size=3)
        for i in range(5):
            handler.handle_error(InvalidImageError(f"e{i}"), ErrorContext("degrade"))
        assert [e['error'] for e in handler.error_log] == ["e2", "e3", "e4"]
        assert handler.metrics.total_errors == 5

    def test_exit_codes(self):
        assert exit_code_for(ConfigurationError("bad")) == 2
        assert exit_code_for(ReplayMismatchError("differs")) == 1
        assert exit_code_for(RuntimeError("boom")) == 1

    def test_configuration_error_position(self):
        error = ConfigurationError("cannot parse", line=3, column=7)
        assert "line 3, column 7" in str(error)
        assert error.category is ErrorCategory.CONFIGURATION
        assert error.severity is ErrorSeverity.HIGH
        assert not error.recoverable

    def test_reraise_as(self):
        @reraise_as(ReplayMismatchError, "load_sidecar")
        def broken():
            raise KeyError("params")

        with pytest.raises(ReplayMismatchError, match="load_sidecar failed") as info:
            broken()
        assert isinstance(info.value.__cause__, KeyError)
        assert info.value.context.operation == "load_sidecar"

    def test_reraise_as_keeps_synthesis_errors(self):
        @reraise_as(ReplayMismatchError, "load_sidecar")
        def rejects():
            raise ParameterError("k")

        with pytest.raises(ParameterError):
            rejects()


class TestLogging:

    def test_unknown_level(self):
        with pytest.raises(ConfigurationError):
            LoggingSettings(level="loud")

    def test_file_handlers(self, tmp_path, restore_logging):
        manager = setup_logging(LoggingSettings(level="DEBUG", json=True, directory=str(tmp_path / "logs")))
        assert logger_module.log_manager is manager
        get_logger("lowlight.test").error("Something failed", event_type="test_event")
        for handler in logging.getLogger().handlers:
            handler.flush()
        files = manager.get_log_files()
        assert '"event_type": "test_event"' in files['main'].read_text()
        assert "Something failed" in files['errors'].read_text()

    def test_batch_summary_skips_error_file(self, tmp_path, restore_logging):
        manager = setup_logging(LoggingSettings(json=True, directory=str(tmp_path / "logs")))
        manager.log_batch_summary("degrade", total=4, failed=1)
        for handler in logging.getLogger().handlers:
            handler.flush()
        files = manager.get_log_files()
        main = files['main'].read_text()
        assert '"failure_rate": 0.25' in main and '"completed": 3' in main
        assert "Batch finished" not in files['errors'].read_text()

    def test_operation_timer(self):
        with OperationTimer(get_logger("lowlight.test"), "sleepless") as timer:
            sum(range(1000))
        assert timer.duration >= 0.0

    def test_log_operation_preserves_result(self):
        @log_operation("double")
        def double(x):
            return 2 * x

        assert double(4) == 8
        assert double.__name__ == "double"

    def test_system_info(self):
        info = system_info()
        assert info['cpu_count'] >= 1 and info['memory_total'] > 0


class TestBatchProgress:

    def test_updates_and_callbacks(self):
        seen = []
        progress = BatchProgress(total=3, callbacks=[lambda p: seen.append(round(p.fraction, 3))])
        progress.update("a.png", success=True)
        progress.update("b.png", success=False)
        assert progress.statuses == {"a.png": FileStatus.COMPLETED, "b.png": FileStatus.FAILED}
        assert seen == [0.333, 0.667]
        assert {s.value for s in FileStatus} == {"completed", "failed"}

    def test_failing_callback_is_contained(self):
        def explode(_):
            raise RuntimeError("observer failed")

        progress = BatchProgress(total=1, callbacks=[explode])
        progress.update("a.png", success=True)
        assert progress.processed == 1

    def test_empty_batch(self):
        progress = BatchProgress(total=0)
        assert progress.fraction == 1.0
        progress.finish()

    def test_timing(self):
        progress = BatchProgress(total=2)
        progress.update("a", True)
        progress.update("b", True)
        timing = progress.timing(0.5, jobs=4)
        assert timing['files_per_second'] == 4.0 and timing['jobs'] == 4 and timing['rss_bytes'] > 0


class TestBatchStats:

    def test_histograms(self):
        stats = BatchStats(ParamRanges())
        for k, clipped in ((0.05, 3), (0.15, 0), (0.95, 1)):
            stats.add_record({'clipped_pixels': clipped, 'tone_clamped': 0,
                              'params': {'k': k, 'delta_s': 1e-3, 'delta_r': 1e-2, 'bits': 12,
                                         'g_r': 2.0, 'g_b': 1.6, 'gamma': 2.5}})
        report = stats.report()
        assert report['images'] == 3 and report['clipped_pixels'] == 4
        assert report['bits'] == {'12': 3, '14': 0, '16': 0}
        k_hist = report['histograms']['k']
        assert len(k_hist['counts']) == 10 and sum(k_hist['counts']) == 3
        assert k_hist['edges'][0] == 0.01 and k_hist['edges'][-1] == 1.0
        assert sum(report['histograms']['log10_delta_s']['counts']) == 3

    def test_baseline_values_share_histograms(self):
        stats = BatchStats(ParamRanges())
        stats.add_record({'baseline_params': {'method': 'retinex', 'L': 0.2}})
        stats.add_record({'baseline_params': {'method': 'invgamma', 'gamma': 4.0}})
        hist = stats.histograms()
        assert sum(hist['k']['counts']) == 1
        assert hist['gamma']['out_of_range'] == 1

    def test_failures(self):
        stats = BatchStats(ParamRanges())
        stats.add_failure({'file': 'x.png'})
        assert stats.report()['failed'] == 1
