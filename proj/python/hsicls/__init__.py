"""Leakage-free window sampling and a compact fully convolutional classifier."""

from ._core import (
    AuditError,
    ValidationError,
    WindowPartition,
    audit,
    baseline_overlap,
    count_flops,
    count_params,
    metrics,
    run_eval,
    run_train,
    sample,
    save_dataset,
    set_num_threads,
    synth,
)

__all__ = [
    "AuditError",
    "ValidationError",
    "WindowPartition",
    "audit",
    "baseline_overlap",
    "count_flops",
    "count_params",
    "metrics",
    "run_eval",
    "run_train",
    "sample",
    "save_dataset",
    "set_num_threads",
    "synth",
]
