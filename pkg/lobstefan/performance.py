# SPDX-License-Identifier: Apache-2.0

import concurrent.futures
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional

import psutil

logger = logging.getLogger(__name__)


@dataclass
class PerformanceConfig:
    """Configuration for parallel candidate evaluation"""
    max_workers: int = 4
    enable_parallel_processing: bool = True


@dataclass
class ProcessingStats:
    """Statistics for a CLI run"""
    total_time: float = 0.0
    phase_times: Dict[str, float] = field(default_factory=dict)
    memory_peak_mb: int = 0


class SilentProgress:
    """Progress hooks that report nothing; the default for library callers."""
    def phase(self, idx, name, substeps=0):
        pass
    def subphase_step(self, val=None):
        pass
    def set_substeps(self, num):
        pass
    def close(self):
        pass


class PerformanceTracker:
    """Track wall time per phase and peak memory during a run"""

    def __init__(self):
        self.phase_times = {}
        self.start_time = time.time()
        self.memory_peak = 0

    @contextmanager
    def track_phase(self, phase_name: str):
        """Context manager for timing phases"""
        phase_start = time.time()
        try:
            yield
        finally:
            self.phase_times[phase_name] = time.time() - phase_start
            self.track_memory()

    def track_memory(self):
        memory_mb = psutil.Process().memory_info().rss / 1024 / 1024
        self.memory_peak = max(self.memory_peak, memory_mb)
        return memory_mb

    def get_stats(self) -> ProcessingStats:
        return ProcessingStats(
            total_time=time.time() - self.start_time,
            phase_times=self.phase_times.copy(),
            memory_peak_mb=int(self.memory_peak),
        )

    def report_statistics(self) -> str:
        stats = self.get_stats()
        report = [
            "Performance Report:",
            f"  Total Time: {stats.total_time:.2f}s",
            f"  Memory Peak: {stats.memory_peak_mb}MB",
        ]
        if self.phase_times:
            report.append("  Phase Breakdown:")
            for phase, duration in self.phase_times.items():
                percentage = (duration / stats.total_time) * 100 if stats.total_time > 0 else 0.0
                report.append(f"    {phase}: {duration:.2f}s ({percentage:.1f}%)")
        return "\n".join(report)


def get_hardware_info() -> Dict[str, Any]:
    """Get hardware information for sizing the worker pool"""
    memory = psutil.virtual_memory()
    return {
        'cpu_count': psutil.cpu_count() or 1,
        'memory_total_mb': memory.total / 1024 / 1024,
        'memory_available_mb': memory.available / 1024 / 1024,
    }


def create_performance_config(hardware_info: Optional[Dict] = None, max_workers: Optional[int] = None) -> PerformanceConfig:
    """Create a worker configuration that scales with the hardware"""
    if max_workers is not None:
        return PerformanceConfig(max_workers=max(1, max_workers), enable_parallel_processing=max_workers > 1)
    if hardware_info is None:
        hardware_info = get_hardware_info()
    cpu_count = hardware_info.get('cpu_count', 4)
    memory_mb = hardware_info.get('memory_available_mb', 4096)
    workers = min(max(1, cpu_count - 1), 8)
    # each stage-2 candidate keeps a full T x N solve alive
    if memory_mb < 2048:
        workers = min(workers, 2)
    return PerformanceConfig(max_workers=workers, enable_parallel_processing=workers > 1)


def parallel_map(fn: Callable, items: Iterable, max_workers: Optional[int] = None) -> List:
    """Apply fn to every item, possibly concurrently; results keep input order."""
    items = list(items)
    config = create_performance_config(max_workers=max_workers)
    if not config.enable_parallel_processing or len(items) <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=config.max_workers) as executor:
        return list(executor.map(fn, items))
