"""Reference models.

Training-free baselines work directly on windows. Trainable models compile
to the autodiff operator set: each builds its graph in its own array
layout (channel-major for the linear family, flattened time x channel for
the patch models) and converts to B x T x C only at the boundary.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .autodiff import Node, Parameter, Tape, backward
from .core import SplitMix64
from .errors import (
    BatchShapeMismatch,
    ConfigError,
    EvenKernel,
    LookbackShorterThanPeriod,
    NoObservedHistory,
    ParamShapeMismatch,
)
from .pipeline import SampleWindow, Task, WindowBatch, patchify_batch

TRAINABLE = ("linear", "dlinear", "patch_mlp", "source_fusion")
BASELINES = ("naive_last", "seasonal_naive", "window_mean")
KINDS = BASELINES + TRAINABLE


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    task: Task = Task.FORECAST
    lookback: int = 1
    horizon: int = 1
    channels: int = 1
    exog: int = 0
    period: int = 1
    kernel: int = 25
    patch_len: int = 8
    patch_stride: int = 8
    hidden: int = 16
    embed_dim: int = 16
    n_sources: int = 1

    def __post_init__(self):
        object.__setattr__(self, "task", Task.parse(self.task))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.period < 1:
            raise ConfigError("period must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise EvenKernel(f"moving-average kernel must be odd and >= 1, got {self.kernel}")
        for name in ("lookback", "horizon", "channels", "patch_len", "patch_stride", "hidden", "embed_dim", "n_sources"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.kind in ("naive_last", "seasonal_naive") and self.task is not Task.FORECAST:
            raise ConfigError(f"{self.kind} is a forecasting baseline")
        if self.kind == "window_mean" and self.task is not Task.IMPUTE:
            raise ConfigError("window_mean is an imputation baseline")
        if self.kind == "source_fusion" and self.exog:
            raise ConfigError("source_fusion does not take exogenous channels")

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE

    @property
    def out_len(self) -> int:
        return self.horizon if self.task is Task.FORECAST else self.lookback

    @property
    def effective_kernel(self) -> int:
        """Configured kernel capped at the largest odd value <= lookback."""
        cap = self.lookback if self.lookback % 2 else self.lookback - 1
        return max(1, min(self.kernel, cap))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ModelOutput:
    values: np.ndarray
    task: Task = Task.FORECAST

    @property
    def forecast(self) -> Optional[np.ndarray]:
        return self.values if self.task is Task.FORECAST else None

    @property
    def reconstruction(self) -> Optional[np.ndarray]:
        return self.values if self.task is Task.IMPUTE else None


# ---------------------------------------------------------------------------
# baselines


def _last_visible(values: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """Most recent visible value along axis -2 (time); raises if none."""
    L = values.shape[-2]
    has = visible.any(axis=-2)
    if not has.all():
        raise NoObservedHistory("a channel has no observed lookback value")
    idx = L - 1 - np.argmax(visible[..., ::-1, :], axis=-2)
    return np.take_along_axis(values, idx[..., None, :], axis=-2)[..., 0, :]


def forecast_naive_last(window: SampleWindow, horizon: Optional[int] = None) -> ModelOutput:
    H = window.target.shape[0] if horizon is None else horizon
    last = _last_visible(window.input, window.visible)
    return ModelOutput(np.repeat(last[None, :], H, axis=0))


def _seasonal(values, visible, m: int, H: int) -> np.ndarray:
    L = values.shape[-2]
    if L < m:
        raise LookbackShorterThanPeriod(f"lookback {L} shorter than period {m}")
    fallback = _last_visible(values, visible)
    out = []
    for h in range(H):
        src = L + h - m * (-(-(h + 1) // m))
        v = values[..., src, :]
        out.append(np.where(visible[..., src, :], v, fallback))
    return np.stack(out, axis=-2)


def forecast_seasonal_naive(window: SampleWindow, m: int, horizon: Optional[int] = None) -> ModelOutput:
    """Repeat the value one or more whole seasons back; missing sources fall back to naive_last."""
    H = window.target.shape[0] if horizon is None else horizon
    return ModelOutput(_seasonal(window.input, window.visible, m, H))


def impute_window_mean(window: SampleWindow) -> ModelOutput:
    """Fill every lookback position with the channel mean of visible entries."""
    vis = window.visible
    n = np.maximum(vis.sum(axis=0), 1)
    mean = np.where(vis, window.input, 0.0).sum(axis=0) / n
    return ModelOutput(np.repeat(mean[None, :], window.input.shape[0], axis=0), Task.IMPUTE)


# ---------------------------------------------------------------------------
# decomposition


def decompose_moving_average(sequence, k: int, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Centered moving-average trend with edge replication, and the remainder.

    The trend is computed as center + mean(window - center), which is exact
    for constant stretches and for k=1.
    """
    if k < 1 or k % 2 == 0:
        raise EvenKernel(f"kernel must be odd and >= 1, got {k}")
    x = np.moveaxis(np.asarray(sequence, dtype=np.float64), axis, -1)
    half = (k - 1) // 2
    if half:
        padded = np.concatenate(
            [np.repeat(x[..., :1], half, axis=-1), x, np.repeat(x[..., -1:], half, axis=-1)], axis=-1
        )
        windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=-1)
        trend = x + (windows - x[..., None]).sum(axis=-1) / k
    else:
        trend = x.copy()
    remainder = x - trend
    return np.moveaxis(trend, -1, axis), np.moveaxis(remainder, -1, axis)


# ---------------------------------------------------------------------------
# parameters


def parameter_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    L, H, C, E = spec.lookback, spec.horizon, spec.channels, spec.exog
    out = spec.out_len
    exog_in = E * (L + H)
    shapes: dict[str, tuple[int, ...]] = {}
    if spec.kind == "linear":
        shapes["linear.weight"] = (L, out)
        shapes["linear.bias"] = (out,)
        if E:
            shapes["linear.exog.weight"] = (exog_in, out)
    elif spec.kind == "dlinear":
        for part in ("trend", "seasonal"):
            shapes[f"dlinear.{part}.weight"] = (L, out)
            shapes[f"dlinear.{part}.bias"] = (out,)
        if E:
            shapes["dlinear.exog.weight"] = (exog_in, out)
    elif spec.kind == "patch_mlp":
        shapes["patch_mlp.embed.weight"] = (spec.patch_len * C, spec.hidden)
        shapes["patch_mlp.embed.bias"] = (spec.hidden,)
        shapes["patch_mlp.head.weight"] = (spec.hidden, out * C)
        shapes["patch_mlp.head.bias"] = (out * C,)
        if E:
            shapes["patch_mlp.exog.weight"] = (exog_in, out * C)
    elif spec.kind == "source_fusion":
        d = spec.embed_dim
        shapes["source_fusion.value.weight"] = (spec.patch_len, d)
        shapes["source_fusion.value.bias"] = (d,)
        shapes["source_fusion.source_embed"] = (spec.n_sources, d)
        shapes["source_fusion.head.weight"] = (d, out * C)
        shapes["source_fusion.head.bias"] = (out * C,)
    return shapes


def init_parameters(spec: ModelSpec, seed: int) -> dict[str, Parameter]:
    """Weights ~ U(-b, b) with b = sqrt(1/fan_in); biases zero."""
    rng = SplitMix64(seed)
    params = {}
    for name, shape in parameter_shapes(spec).items():
        if name.endswith(".bias"):
            value = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / shape[0])
            value = (2.0 * rng.uniform(shape) - 1.0) * bound
        params[name] = Parameter(name, value)
    return params


def check_parameters(spec: ModelSpec, params: dict[str, Parameter]) -> None:
    expected = parameter_shapes(spec)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ParamShapeMismatch(f"parameter names differ (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ParamShapeMismatch(f"{name}: expected shape {shape}, got {params[name].shape}")


# ---------------------------------------------------------------------------
# graphs


class Layout:
    """Conversion between B x T x C arrays and a model's internal layout."""

    def __init__(self, kind: str, T: int, C: int):
        self.kind, self.T, self.C = kind, T, C

    def to_model(self, a: np.ndarray) -> np.ndarray:
        if self.kind == "channel_major":
            return np.ascontiguousarray(np.swapaxes(a, 1, 2))
        return a.reshape(a.shape[0], -1)

    def from_model(self, a: np.ndarray) -> np.ndarray:
        if self.kind == "channel_major":
            return np.swapaxes(a, 1, 2)
        return a.reshape(a.shape[0], self.T, self.C)


def _check_batch(spec: ModelSpec, batch: WindowBatch, fixed_lookback: bool) -> None:
    B, L, C = batch.input.shape
    if C != spec.channels:
        raise BatchShapeMismatch(f"batch has {C} target channels, model expects {spec.channels}")
    if fixed_lookback and L != spec.lookback:
        raise BatchShapeMismatch(f"batch lookback {L} != model lookback {spec.lookback}")
    if batch.exog.shape[-1] != spec.exog:
        raise BatchShapeMismatch(f"batch has {batch.exog.shape[-1]} exogenous channels, model expects {spec.exog}")
    if spec.exog and batch.exog.shape[1] != spec.lookback + spec.horizon:
        raise BatchShapeMismatch("exogenous span must cover lookback + horizon")


def _linear(tape: Tape, x: Node, w: Node, b: Node) -> Node:
    return tape.add(tape.matmul(x, w), b)


def _exog_term(tape, batch, p, name, per_channel: int = 0):
    if name not in p:
        return None
    e = batch.exog.reshape(batch.size, -1)
    if per_channel:
        e = np.repeat(e[:, None, :], per_channel, axis=1)
    return tape.matmul(tape.constant(e), tape.param(p[name]))


def _graph_linear(tape, spec, p, batch):
    x = np.swapaxes(batch.input, 1, 2)  # B, C, L
    out = _linear(tape, tape.constant(x), tape.param(p["linear.weight"]), tape.param(p["linear.bias"]))
    ex = _exog_term(tape, batch, p, "linear.exog.weight", spec.channels)
    return tape.add(out, ex) if ex is not None else out


def _graph_dlinear(tape, spec, p, batch):
    x = np.swapaxes(batch.input, 1, 2)
    trend, seasonal = decompose_moving_average(x, spec.effective_kernel, axis=-1)
    t = _linear(tape, tape.constant(trend), tape.param(p["dlinear.trend.weight"]), tape.param(p["dlinear.trend.bias"]))
    s = _linear(tape, tape.constant(seasonal), tape.param(p["dlinear.seasonal.weight"]), tape.param(p["dlinear.seasonal.bias"]))
    out = tape.add(t, s)
    ex = _exog_term(tape, batch, p, "dlinear.exog.weight", spec.channels)
    return tape.add(out, ex) if ex is not None else out


def _graph_patch_mlp(tape, spec, p, batch):
    P, S = spec.patch_len, spec.patch_stride
    patches, pmask = patchify_batch(batch.input, batch.pad_mask, P, S)  # B,N,P,C / B,N,P
    B, N = patches.shape[:2]
    tokens = tape.constant(patches.reshape(B, N, P * spec.channels))
    h = tape.relu(_linear(tape, tokens, tape.param(p["patch_mlp.embed.weight"]), tape.param(p["patch_mlp.embed.bias"])))
    pooled = tape.masked_mean_pool(h, pmask.any(axis=-1))
    out = _linear(tape, pooled, tape.param(p["patch_mlp.head.weight"]), tape.param(p["patch_mlp.head.bias"]))
    ex = _exog_term(tape, batch, p, "patch_mlp.exog.weight")
    return tape.add(out, ex) if ex is not None else out


def source_tokens(spec: ModelSpec, batch: WindowBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tokenize every source on its own timebase.

    Each (source, channel, patch) becomes one length-P token. Returns
    (tokens B x N_tok x P, token mask B x N_tok, source ids B x N_tok).
    """
    P, S = spec.patch_len, spec.patch_stride
    sources = [(batch.source_index, batch.input, batch.pad_mask)]
    sources += [(idx, ctx.values, ctx.pad_mask) for idx, ctx in batch.contexts]
    toks, masks, ids = [], [], []
    B = batch.size
    for idx, values, pad in sources:
        if values.ndim == 2:
            values = values[..., None]
        patches, pmask = patchify_batch(values, pad, P, S)  # B,N,P,C / B,N,P
        C = values.shape[-1]
        t = np.moveaxis(patches, -1, 1).reshape(B, C * patches.shape[1], P)
        m = np.repeat(pmask.any(axis=-1)[:, None, :], C, axis=1).reshape(B, -1)
        toks.append(t)
        masks.append(m)
        ids.append(np.full(m.shape, idx, dtype=np.int64))
    return np.concatenate(toks, axis=1), np.concatenate(masks, axis=1), np.concatenate(ids, axis=1)


def _graph_source_fusion(tape, spec, p, batch):
    tokens, mask, ids = source_tokens(spec, batch)
    if ids.size and ids.max() >= spec.n_sources:
        raise BatchShapeMismatch(f"source index {ids.max()} >= n_sources {spec.n_sources}")
    v = _linear(tape, tape.constant(tokens), tape.param(p["source_fusion.value.weight"]), tape.param(p["source_fusion.value.bias"]))
    tagged = tape.relu(tape.add(v, tape.embed(tape.param(p["source_fusion.source_embed"]), ids)))
    context = tape.masked_mean_pool(tagged, mask)
    return _linear(tape, context, tape.param(p["source_fusion.head.weight"]), tape.param(p["source_fusion.head.bias"]))


_GRAPHS = {
    "linear": (_graph_linear, "channel_major", True),
    "dlinear": (_graph_dlinear, "channel_major", True),
    "patch_mlp": (_graph_patch_mlp, "flat", False),
    "source_fusion": (_graph_source_fusion, "flat", False),
}


def build_graph(tape: Tape, spec: ModelSpec, params: dict[str, Parameter], batch: WindowBatch) -> tuple[Node, Layout]:
    """Record the forward pass on ``tape``; output stays in normalized units."""
    check_parameters(spec, params)
    fn, layout_kind, fixed = _GRAPHS[spec.kind]
    _check_batch(spec, batch, fixed_lookback=fixed or bool(spec.exog))
    return fn(tape, spec, params, batch), Layout(layout_kind, spec.out_len, spec.channels)


def _baseline_forward(spec: ModelSpec, batch: WindowBatch) -> np.ndarray:
    vis = batch.visible
    if spec.kind == "naive_last":
        last = _last_visible(batch.input, vis)
        return np.repeat(last[:, None, :], spec.horizon, axis=1)
    if spec.kind == "seasonal_naive":
        return _seasonal(batch.input, vis, spec.period, spec.horizon)
    n = np.maximum(vis.sum(axis=1), 1)
    mean = np.where(vis, batch.input, 0.0).sum(axis=1) / n
    return np.repeat(mean[:, None, :], batch.input.shape[1], axis=1)


def model_forward(spec: ModelSpec, params: dict[str, Parameter], batch: WindowBatch) -> np.ndarray:
    """Predictions as B x T x C, denormalized when the batch carries instance-norm stats."""
    if spec.trainable:
        node, layout = build_graph(Tape(), spec, params, batch)
        out = layout.from_model(node.value)
    else:
        if batch.input.shape[-1] != spec.channels:
            raise BatchShapeMismatch(f"batch has {batch.input.shape[-1]} channels, model expects {spec.channels}")
        out = _baseline_forward(spec, batch)
    return batch.denormalize(out)


def loss_graph(
    spec: ModelSpec, params: dict[str, Parameter], batch: WindowBatch, loss: str = "mse", tape: Optional[Tape] = None
) -> tuple[Tape, Node]:
    """Masked training loss in normalized units, recorded on ``tape`` (a fresh one by default)."""
    tape = Tape() if tape is None else tape
    node, layout = build_graph(tape, spec, params, batch)
    target = layout.to_model(batch.truth(spec.task))
    mask = layout.to_model(batch.loss_mask(spec.task))
    if loss == "mse":
        return tape, tape.masked_mse_loss(node, target, mask)
    if loss == "mae":
        return tape, tape.masked_mae_loss(node, target, mask)
    raise ConfigError(f"unknown loss {loss!r}")


def loss_and_grad(spec, params, batch, loss: str = "mse") -> float:
    for p in params.values():
        p.zero_grad()
    tape, node = loss_graph(spec, params, batch, loss)
    backward(tape, node)
    return float(node.value[0])
