"""Streaming evaluator: one batch of predictions in memory at a time."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EmptyBatch, NoEvaluablePoints
from .metrics import MetricKind, MetricState, stream_finalize, stream_merge, stream_update
from .models import ModelSpec, model_forward
from .pipeline import DEFAULT_EPS, MaskStrategy, SampleWindow, collate_windows


@dataclass(frozen=True)
class PipelineOptions:
    """Per-batch preprocessing applied before a model sees a window."""

    instance_norm: bool = False
    mask: MaskStrategy = field(default_factory=MaskStrategy)
    eps: float = DEFAULT_EPS


@dataclass
class EvalResult:
    states: dict[MetricKind, MetricState]
    n_windows: int

    @property
    def values(self) -> dict[str, Optional[float]]:
        """Finalized metrics; None marks NoEvaluablePoints."""
        out = {}
        for kind, state in self.states.items():
            try:
                out[kind.value] = stream_finalize(state)
            except NoEvaluablePoints:
                out[kind.value] = None
        return out

    @property
    def excluded(self) -> dict[str, int]:
        return {k.value: s.excluded for k, s in self.states.items() if k in (MetricKind.MAPE, MetricKind.SMAPE)}

    def __getitem__(self, kind) -> float:
        return stream_finalize(self.states[MetricKind.parse(kind)])


Transform = Callable[[np.ndarray], np.ndarray]


def _fold(spec, params, chunks, kinds, options, inverse) -> dict[MetricKind, MetricState]:
    states = {k: MetricState.zero(k) for k in kinds}
    for chunk in chunks:
        batch = collate_windows(chunk, options.instance_norm, options.eps)
        pred = model_forward(spec, params, batch)
        truth = batch.truth_original(spec.task)
        mask = batch.loss_mask(spec.task)
        if inverse is not None:
            pred, truth = inverse(pred), inverse(truth)
        for k in kinds:
            states[k] = stream_update(states[k], pred, truth, mask)
    return states


def evaluate_stream(
    spec: ModelSpec,
    params,
    windows: Sequence[SampleWindow],
    kinds: Sequence,
    batch_size: int = 64,
    options: PipelineOptions = PipelineOptions(),
    inverse: Optional[Transform] = None,
    workers: int = 1,
) -> EvalResult:
    """Fold metric states over batches of ``windows``.

    With ``workers`` > 1 the batch list is split into contiguous shards,
    each folded into a private state on its own thread and combined with
    stream_merge. ``inverse`` maps predictions and truth back to original
    units before scoring.
    """
    if len(windows) == 0:
        raise EmptyBatch("evaluate_stream needs at least one window")
    kinds = [MetricKind.parse(k) for k in kinds]
    chunks = [windows[i : i + batch_size] for i in range(0, len(windows), batch_size)]
    if workers <= 1 or len(chunks) == 1:
        states = _fold(spec, params, chunks, kinds, options, inverse)
    else:
        shards = [s.tolist() for s in np.array_split(np.arange(len(chunks)), workers) if len(s)]
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            parts = list(pool.map(lambda idx: _fold(spec, params, [chunks[i] for i in idx], kinds, options, inverse), shards))
        states = parts[0]
        for part in parts[1:]:
            states = {k: stream_merge(states[k], part[k]) for k in kinds}
    return EvalResult(states, len(windows))
