"""Experiment harness: config, seeded streams, checkpoints, pipelines, benchmarks, report."""

from .bench import LatencyStats, benchmark
from .checkpoint import (BadMagic, CheckpointError, ChecksumMismatch, TruncatedCheckpoint, VersionMismatch,
                         decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint)
from .config import (BenchConfig, ConfigError, EvalConfig, ExperimentConfig, format_config, load_config,
                     parse_config, with_overrides)
from .report import MetricsReport, ReportRow, build_report, emit_table
from .rng import indexed_seed, stream, stream_ints

__all__ = [
    "LatencyStats", "benchmark",
    "CheckpointError", "TruncatedCheckpoint", "ChecksumMismatch", "VersionMismatch", "BadMagic",
    "encode_checkpoint", "decode_checkpoint", "save_checkpoint", "load_checkpoint",
    "ConfigError", "EvalConfig", "BenchConfig", "ExperimentConfig", "parse_config", "load_config",
    "with_overrides", "format_config",
    "MetricsReport", "ReportRow", "build_report", "emit_table",
    "stream", "stream_ints", "indexed_seed",
]
