"""Benchmark harness: configuration, run loop, metrics and reports."""

from .config import RunConfig, load_config
from .metrics import IterationReport, effective_io_throughput
from .bench import BenchmarkResult, run_benchmark
from .report import emit_report

__all__ = ["RunConfig", "load_config", "IterationReport", "effective_io_throughput",
           "BenchmarkResult", "run_benchmark", "emit_report"]
