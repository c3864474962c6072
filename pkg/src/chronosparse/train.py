"""Deterministic trainer: optimizers, schedules, clipping, early stopping, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Parameter
from .core import derive_rng
from .errors import (
    BadMagic,
    ConfigError,
    CorruptPayload,
    EmptyTrainSet,
    ShapeMismatch,
    UnsupportedVersion,
)
from .evaluation import PipelineOptions, evaluate_stream
from .metrics import MetricKind
from .models import ModelSpec, loss_and_grad
from .pipeline import SampleWindow, Task, collate_windows, generate_mask, with_artificial

log = logging.getLogger(__name__)

MAGIC = b"CSPK"
VERSION = 1


@dataclass(frozen=True)
class Scheduler:
    kind: str = "constant"
    period: int = 10
    gamma: float = 0.1
    t_max: int = 100
    lr_min: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "step", "cosine"):
            raise ConfigError(f"unknown scheduler {self.kind!r}")
        if not 0 < self.gamma <= 1:
            raise ConfigError("step gamma must lie in (0, 1]")
        if self.period < 1 or self.t_max < 1:
            raise ConfigError("scheduler period and t_max must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    scheduler: Scheduler = field(default_factory=Scheduler)
    clip_norm: Optional[float] = None
    early_stop_metric: str = "MAE"
    patience: int = 10
    min_delta: float = 0.0
    loss: str = "mse"
    seed: int = 0
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0")
        if self.patience < 0 or self.min_delta < 0 or not math.isfinite(self.min_delta):
            raise ConfigError("patience and min_delta must be finite and >= 0")
        MetricKind.parse(self.early_stop_metric)


# ---------------------------------------------------------------------------
# optimization


def clip_by_global_norm(grads: dict[str, np.ndarray], clip_norm: Optional[float]) -> dict[str, np.ndarray]:
    if clip_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}


def optimizer_step(
    kind: str,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    state: Optional[dict] = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: Optional[float] = None,
) -> tuple[dict[str, np.ndarray], dict]:
    """One update. Returns new parameter arrays and the new optimizer state."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ShapeMismatch(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    grads = clip_by_global_norm(grads, clip_norm)
    state = dict(state or {})
    if kind == "sgd":
        return {k: v - lr * grads[k] if k in grads else v for k, v in params.items()}, state
    if kind != "adam":
        raise ConfigError(f"unknown optimizer {kind!r}")
    t = state.get("t", 0) + 1
    m = dict(state.get("m", {}))
    v = dict(state.get("v", {}))
    out = {}
    for k, theta in params.items():
        if k not in grads:
            out[k] = theta
            continue
        g = grads[k]
        m[k] = beta1 * m.get(k, np.zeros_like(g)) + (1 - beta1) * g
        v[k] = beta2 * v.get(k, np.zeros_like(g)) + (1 - beta2) * g * g
        m_hat = m[k] / (1 - beta1**t)
        v_hat = v[k] / (1 - beta2**t)
        out[k] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out, {"t": t, "m": m, "v": v}


def scheduler_lr(scheduler: Scheduler, base_lr: float, t: int) -> float:
    if scheduler.kind == "constant":
        return base_lr
    if scheduler.kind == "step":
        return base_lr * scheduler.gamma ** (t // scheduler.period)
    frac = min(t, scheduler.t_max) / scheduler.t_max
    return scheduler.lr_min + 0.5 * (base_lr - scheduler.lr_min) * (1 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class EarlyStopState:
    best_value: float = math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    stopped: bool = False
    epoch: int = -1


def early_stop_update(state: EarlyStopState, val_value: float, patience: int, min_delta: float = 0.0) -> EarlyStopState:
    """Lower is better. Improvement means strictly below best - min_delta."""
    epoch = state.epoch + 1
    if val_value < state.best_value - min_delta:
        return EarlyStopState(val_value, epoch, 0, False, epoch)
    since = state.epochs_since_improvement + 1
    return EarlyStopState(state.best_value, state.best_epoch, since, since >= patience, epoch)


# ---------------------------------------------------------------------------
# checkpoints


def _as_arrays(params) -> dict[str, np.ndarray]:
    return {k: (v.value if isinstance(v, Parameter) else np.asarray(v, dtype=np.float64)) for k, v in params.items()}


def save_checkpoint(params, metadata: dict, path) -> None:
    """Write ``CSPK`` + version byte + u32 header length + JSON header + f64 LE payload."""
    arrays = _as_arrays(params)
    header = {
        "metadata": metadata,
        "parameters": [[name, list(a.shape)] for name, a in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BadMagic(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 9:
        raise CorruptPayload(f"{path}: truncated header")
    if data[4] != VERSION:
        raise UnsupportedVersion(f"{path}: checkpoint version {data[4]} (supported: {VERSION})")
    (hlen,) = struct.unpack("<I", data[5:9])
    if 9 + hlen > len(data):
        raise CorruptPayload(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(data[9 : 9 + hlen].decode("utf-8"))
        manifest = [(str(n), tuple(int(d) for d in s)) for n, s in header["parameters"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptPayload(f"{path}: unreadable header ({exc})") from None
    payload = data[9 + hlen :]
    expected = sum(8 * math.prod(shape) for _, shape in manifest)
    if len(payload) != expected:
        raise CorruptPayload(f"{path}: payload has {len(payload)} bytes, manifest declares {expected}")
    params = {}
    offset = 0
    for name, shape in manifest:
        n = math.prod(shape)
        params[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
    return params, header.get("metadata", {})


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: Optional[float]
    lr: float


@dataclass
class TrainResult:
    params: dict[str, Parameter]
    history: list[EpochRecord]
    best_epoch: int
    best_value: Optional[float]
    stopped_early: bool


def _snapshot(params: dict[str, Parameter]) -> dict[str, np.ndarray]:
    return {k: p.value.copy() for k, p in params.items()}


def _mask_batch(windows, strategy, rng):
    return [with_artificial(w, generate_mask(w.input.shape, strategy, rng)) for w in windows]


def train(
    spec: ModelSpec,
    params: dict[str, Parameter],
    train_windows: Sequence[SampleWindow],
    val_windows: Sequence[SampleWindow],
    config: TrainConfig,
    options: PipelineOptions = PipelineOptions(),
    checkpoint_metadata: Optional[dict] = None,
) -> TrainResult:
    """Fit ``params`` in place and return the best-epoch parameters.

    For imputation a fresh artificial mask is drawn per batch from a stream
    derived from (seed, epoch, batch index). Validation windows are used as
    given, so their masks stay fixed across epochs.
    """
    if len(train_windows) == 0:
        raise EmptyTrainSet("no training windows")
    n = len(train_windows)
    bs = config.batch_size
    opt_state: dict = {}
    stop = EarlyStopState()
    best = _snapshot(params)
    best_epoch, best_value = -1, None
    history: list[EpochRecord] = []
    metric = MetricKind.parse(config.early_stop_metric)

    for epoch in range(config.epochs):
        lr = scheduler_lr(config.scheduler, config.lr, epoch)
        order = derive_rng(config.seed, 0, epoch).permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, bs)):
            ws = [train_windows[i] for i in order[start : start + bs]]
            if spec.task is Task.IMPUTE:
                ws = _mask_batch(ws, options.mask, derive_rng(config.seed, 1, epoch, b))
            batch = collate_windows(ws, options.instance_norm, options.eps)
            losses.append(loss_and_grad(spec, params, batch, config.loss))
            grads = {k: p.grad for k, p in params.items()}
            new, opt_state = optimizer_step(
                config.optimizer,
                {k: p.value for k, p in params.items()},
                grads,
                lr,
                opt_state,
                config.beta1,
                config.beta2,
                config.adam_eps,
                config.clip_norm,
            )
            for k, p in params.items():
                p.value = new[k]
        train_loss = float(np.mean(losses))

        val = None
        if val_windows:
            val = evaluate_stream(spec, params, val_windows, [metric], bs, options)[metric]
            stop = early_stop_update(stop, val, config.patience, config.min_delta)
            improved = stop.best_epoch == epoch
        else:
            improved = True
        if improved:
            best = _snapshot(params)
            best_epoch, best_value = epoch, val
            if config.checkpoint_path:
                meta = {"model": spec.to_dict(), "best_epoch": epoch}
                meta.update(checkpoint_metadata or {})
                save_checkpoint(best, meta, config.checkpoint_path)
        history.append(EpochRecord(epoch, train_loss, val, lr))
        log.debug("epoch %d loss %.6g val %s lr %.3g", epoch, train_loss, val, lr)
        if stop.stopped:
            break

    final = {k: Parameter(k, best[k]) for k in params}
    return TrainResult(final, history, best_epoch, best_value, stop.stopped)
