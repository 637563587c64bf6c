from .collective import DEFAULT_BUCKET_BYTES, Bucket, GradientBucketer, all_reduce, bucketize
from .simulator import (
    REPORT_HEADER,
    CommModel,
    Event,
    EventTrace,
    overlap_schedule,
    big_transformer_layer_bytes,
    report_csv,
    schedule_transfers,
    simulate_epoch,
    speedup_report,
)
from .trainer import StepResult, WorkerAssignment, WorkerResult, train_step_sync, worker_gradients

__all__ = [
    "DEFAULT_BUCKET_BYTES", "Bucket", "GradientBucketer", "all_reduce", "bucketize",
    "REPORT_HEADER", "CommModel", "Event", "EventTrace", "overlap_schedule", "big_transformer_layer_bytes",
    "report_csv", "schedule_transfers", "simulate_epoch", "speedup_report",
    "StepResult", "WorkerAssignment", "WorkerResult", "train_step_sync", "worker_gradients",
]
