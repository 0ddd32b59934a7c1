"""
Batch Progress Tracking and Aggregate Statistics
Per-file status, progress callbacks, clip counters and parameter histograms for manifests
"""
import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List

import numpy as np
import psutil

from logger import get_logger

HISTOGRAM_BINS = 10

logger = get_logger("lowlight.progress")


class FileStatus(Enum):
    """Per-file status enumeration"""
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class BatchProgress:
    """Progress of one batch run"""
    total: int
    operation: str = "degrade"
    processed: int = 0
    failed: int = 0
    statuses: Dict[str, FileStatus] = field(default_factory=dict)
    callbacks: List[Callable[["BatchProgress"], None]] = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()

    @property
    def fraction(self) -> float:
        return 1.0 if self.total == 0 else (self.processed + self.failed) / self.total

    def update(self, source: str, success: bool):
        with self._lock:
            self.statuses[source] = FileStatus.COMPLETED if success else FileStatus.FAILED
            if success:
                self.processed += 1
            else:
                self.failed += 1

        for callback in self.callbacks:
            try:
                callback(self)
            except Exception as e:
                logger.warning("Progress callback failed", error=str(e))

        logger.debug("Batch progress", operation=self.operation, file=source,
                     status=self.statuses[source].value, progress=round(self.fraction, 4),
                     event_type="batch_progress")

    def timing(self, elapsed: float, jobs: int) -> Dict[str, Any]:
        """Wall-clock and memory figures; the only nondeterministic part of a manifest"""
        memory = psutil.Process().memory_info()
        return {
            'wall_seconds': round(elapsed, 6),
            'files_per_second': round((self.processed + self.failed) / elapsed, 3) if elapsed > 0 else None,
            'jobs': jobs,
            'rss_bytes': memory.rss,
        }

    def finish(self):
        from logger import log_manager
        if log_manager is not None:
            log_manager.log_batch_summary(self.operation, self.total, self.failed)
        else:
            logger.info("Batch finished", operation=self.operation, images=self.total,
                        completed=self.processed, failed=self.failed, event_type="batch_complete")


class BatchStats:
    """Aggregates per-image counters and sampled-parameter histograms"""

    def __init__(self, ranges):
        self.ranges = ranges
        self.clipped_pixels = 0
        self.tone_clamped = 0
        self.images = 0
        self.failures: List[Dict[str, Any]] = []
        self.values: Dict[str, List[float]] = {name: [] for name in self.bounds()}
        self.bits_counts: Dict[str, int] = {str(b): 0 for b in ranges.bits}

    def bounds(self) -> Dict[str, tuple]:
        r = self.ranges
        return {
            'k': (r.k.low, r.k.high),
            'log10_delta_s': (r.log_shot.low, r.log_shot.high),
            'g_r': (r.g_r.low, r.g_r.high),
            'g_b': (r.g_b.low, r.g_b.high),
            'gamma': (r.gamma.low, r.gamma.high),
        }

    def add_record(self, record: Dict[str, Any]):
        self.images += 1
        self.clipped_pixels += int(record.get('clipped_pixels', 0))
        self.tone_clamped += int(record.get('tone_clamped', 0))

        params = record.get('params')
        if params:
            self.values['k'].append(params['k'])
            self.values['log10_delta_s'].append(math.log10(params['delta_s']) if params['delta_s'] > 0
                                                else float('-inf'))
            for name in ('g_r', 'g_b', 'gamma'):
                self.values[name].append(params[name])
            key = str(params['bits'])
            self.bits_counts[key] = self.bits_counts.get(key, 0) + 1
        baseline = record.get('baseline_params') or {}
        for source, target in (('L', 'k'), ('k', 'k'), ('gamma', 'gamma')):
            if source in baseline:
                self.values[target].append(baseline[source])

    def add_failure(self, entry: Dict[str, Any]):
        self.failures.append(entry)

    def histograms(self) -> Dict[str, Dict[str, Any]]:
        out = {}
        for name, (lo, hi) in self.bounds().items():
            values = np.asarray(self.values[name], dtype=np.float64)
            inside = values[(values >= lo) & (values <= hi)]
            counts, edges = np.histogram(inside, bins=HISTOGRAM_BINS, range=(lo, hi) if hi > lo else None)
            out[name] = {
                'edges': [round(float(e), 12) for e in edges],
                'counts': [int(c) for c in counts],
                'out_of_range': int(values.size - inside.size),
            }
        return out

    def report(self) -> Dict[str, Any]:
        return {
            'images': self.images,
            'failed': len(self.failures),
            'clipped_pixels': self.clipped_pixels,
            'tone_clamped': self.tone_clamped,
            'histograms': self.histograms(),
            'bits': dict(sorted(self.bits_counts.items())),
        }
