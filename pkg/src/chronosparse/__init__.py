"""Sparse multi-source time-series engine.

Data engine (ingest, pipeline), models on a small reverse-mode autodiff
core, a deterministic trainer and a streaming sparse-metric evaluator.
"""

__version__ = "0.1.0"

from .core import MaskKind, SourceId, SplitMix64, TimeSeries, TokenSequence, make_series, missing_rate, rng_stream
from .ingest import Corpus, build_corpus, load_csv_long, load_csv_wide, load_fasta
from .metrics import MetricKind, MetricState, masked_metric, stream_finalize, stream_merge, stream_update
from .models import ModelSpec, init_parameters, model_forward
from .pipeline import Task, WindowSpec, collate_windows, pad_batch, patchify, window_count

__all__ = [
    "Corpus",
    "MaskKind",
    "MetricKind",
    "MetricState",
    "ModelSpec",
    "SourceId",
    "SplitMix64",
    "Task",
    "TimeSeries",
    "TokenSequence",
    "WindowSpec",
    "build_corpus",
    "collate_windows",
    "init_parameters",
    "load_csv_long",
    "load_csv_wide",
    "load_fasta",
    "make_series",
    "masked_metric",
    "missing_rate",
    "model_forward",
    "pad_batch",
    "patchify",
    "rng_stream",
    "stream_finalize",
    "stream_merge",
    "stream_update",
    "window_count",
]
