"""Batch-level data engine.

Windows are sliced lazily from a series, masked and normalized per sample,
then collated into a WindowBatch right before the model sees them. Padding
and patch layout are decided per batch, never per dataset.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .core import FILL_VALUE, SplitMix64, TimeSeries
from .errors import (
    ChannelMismatch,
    ConfigError,
    EmptyBatch,
    IndexOutOfRange,
    InvalidRate,
    NoSeries,
)

DEFAULT_EPS = 1e-8


class Task(str, enum.Enum):
    FORECAST = "forecast"
    IMPUTE = "impute"

    @classmethod
    def parse(cls, value: "str | Task") -> "Task":
        if isinstance(value, Task):
            return value
        aliases = {"forecasting": "forecast", "imputation": "impute"}
        return cls(aliases.get(value, value))


@dataclass(frozen=True)
class WindowSpec:
    lookback: int
    horizon: int
    stride: int = 1
    exogenous: tuple[int, ...] = ()

    def __post_init__(self):
        if self.lookback < 1 or self.horizon < 1 or self.stride < 1:
            raise ConfigError(
                f"lookback, horizon and stride must be >= 1 (got {self.lookback}, {self.horizon}, {self.stride})"
            )
        object.__setattr__(self, "exogenous", tuple(sorted(set(int(c) for c in self.exogenous))))

    def target_channels(self, n_channels: int) -> list[int]:
        return [c for c in range(n_channels) if c not in self.exogenous]


def window_count(T: int, spec: WindowSpec) -> int:
    span = spec.lookback + spec.horizon
    if T < span:
        return 0
    return (T - span) // spec.stride + 1


@dataclass(frozen=True, eq=False)
class ContextSlice:
    """Another source's recent history, on that source's own timebase."""

    source_index: int
    values: np.ndarray
    observed: np.ndarray


@dataclass(frozen=True, eq=False)
class SampleWindow:
    input: np.ndarray
    input_observed: np.ndarray
    target: np.ndarray
    target_observed: np.ndarray
    exog: np.ndarray
    artificial: np.ndarray
    window_stats: Optional[tuple[np.ndarray, np.ndarray]] = None
    source_index: int = 0
    context: tuple[ContextSlice, ...] = ()
    start: int = 0

    @property
    def visible(self) -> np.ndarray:
        return self.input_observed & ~self.artificial


def slice_window(series: TimeSeries, spec: WindowSpec, k: int) -> SampleWindow:
    n = window_count(series.n_ticks, spec)
    if not 0 <= k < n:
        raise IndexOutOfRange(f"window {k} out of range for {n} windows")
    L, H = spec.lookback, spec.horizon
    s = k * spec.stride
    tgt = spec.target_channels(series.n_channels)
    vals, obs = series.values, series.observed
    exog = np.array(vals[s : s + L + H][:, list(spec.exogenous)], dtype=np.float64)
    return SampleWindow(
        input=np.array(vals[s : s + L][:, tgt]),
        input_observed=np.array(obs[s : s + L][:, tgt]),
        target=np.array(vals[s + L : s + L + H][:, tgt]),
        target_observed=np.array(obs[s + L : s + L + H][:, tgt]),
        exog=exog.reshape(L + H, len(spec.exogenous)),
        artificial=np.zeros((L, len(tgt)), dtype=bool),
        source_index=series.source.index,
        start=s,
    )


def iter_windows(series: TimeSeries, spec: WindowSpec) -> list[SampleWindow]:
    return [slice_window(series, spec, k) for k in range(window_count(series.n_ticks, spec))]


# ---------------------------------------------------------------------------
# patching and padding


def patch_count(L: int, P: int, S: int) -> int:
    return math.ceil(max(L - P, 0) / S) + 1


def patchify(sequence, P: int, S: int, valid=None) -> tuple[np.ndarray, np.ndarray]:
    """Split an L x C sequence into N x P x C patches.

    Positions past the end (or marked invalid by ``valid``) are filled with
    0.0 and flagged false in the N x P patch pad mask.
    """
    if P < 1 or S < 1:
        raise ConfigError(f"patch length and stride must be >= 1 (got {P}, {S})")
    seq = np.asarray(sequence, dtype=np.float64)
    squeeze = seq.ndim == 1
    if squeeze:
        seq = seq[:, None]
    L = seq.shape[0]
    v = np.ones(L, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    patches, mask = patchify_batch(seq[None], v[None], P, S)
    patches, mask = patches[0], mask[0]
    return (patches[..., 0] if squeeze else patches), mask


def patchify_batch(values: np.ndarray, pad_mask: np.ndarray, P: int, S: int):
    """Vectorized patchify over B x L x C with a B x L validity mask."""
    B, L, C = values.shape
    N = patch_count(L, P, S)
    idx = np.arange(N)[:, None] * S + np.arange(P)[None, :]
    inside = idx < L
    safe = np.where(inside, idx, 0)
    patches = values[:, safe, :]
    mask = pad_mask[:, safe] & inside[None]
    patches = np.where(mask[..., None], patches, FILL_VALUE)
    return patches, mask


@dataclass(frozen=True, eq=False)
class Batch:
    """Samples padded to this batch's own max length."""

    values: np.ndarray
    pad_mask: np.ndarray
    lengths: np.ndarray
    n_patches: Optional[int] = None
    patch_len: Optional[int] = None

    def patched(self, P: int, S: int) -> tuple[np.ndarray, np.ndarray, "Batch"]:
        vals = self.values if self.values.ndim == 3 else self.values[..., None]
        patches, mask = patchify_batch(vals.astype(np.float64), self.pad_mask, P, S)
        return patches, mask, replace(self, n_patches=patches.shape[1], patch_len=P)


def pad_batch(samples: Sequence) -> Batch:
    """Pad variable-length samples (ℓ_i x C arrays or 1-D token arrays) to max ℓ_i."""
    if len(samples) == 0:
        raise EmptyBatch("cannot collate an empty batch")
    arrays = [s.tokens if hasattr(s, "tokens") else np.asarray(s) for s in samples]
    rank = arrays[0].ndim
    if any(a.ndim != rank for a in arrays):
        raise ChannelMismatch("samples mix token sequences and multichannel arrays")
    if rank == 2:
        chans = {a.shape[1] for a in arrays}
        if len(chans) > 1:
            raise ChannelMismatch(f"channel counts differ within batch: {sorted(chans)}")
    lengths = np.array([a.shape[0] for a in arrays], dtype=np.int64)
    width = int(lengths.max())
    dtype = np.result_type(*arrays)
    out = np.zeros((len(arrays), width) + arrays[0].shape[1:], dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
    pad_mask = np.arange(width)[None, :] < lengths[:, None]
    return Batch(out, pad_mask, lengths)


# ---------------------------------------------------------------------------
# scaling


@dataclass(frozen=True, eq=False)
class ScalerParams:
    kind: str
    loc: np.ndarray    # mean or min
    scale: np.ndarray  # std or max
    eps: float = DEFAULT_EPS

    @property
    def n_channels(self) -> int:
        return len(self.loc)

    def _divisor(self) -> np.ndarray:
        if self.kind == "standard":
            return self.scale + self.eps
        return (self.scale - self.loc) + self.eps

    def to_dict(self) -> dict:
        return {"kind": self.kind, "loc": self.loc.tolist(), "scale": self.scale.tolist(), "eps": self.eps}


def _as_pairs(series_list) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for s in series_list:
        if isinstance(s, TimeSeries):
            pairs.append((s.values, s.observed))
        else:
            vals, obs = s
            pairs.append((np.asarray(vals, dtype=np.float64), np.asarray(obs, dtype=bool)))
    return pairs


def fit_scaler(kind: str, series_list, eps: float = DEFAULT_EPS) -> ScalerParams:
    """Per-channel statistics over observed entries of every training series."""
    if kind not in ("standard", "minmax"):
        raise ConfigError(f"unknown scaler kind {kind!r}")
    pairs = _as_pairs(series_list)
    if not pairs:
        raise NoSeries("fit_scaler needs at least one series")
    C = pairs[0][0].shape[1]
    if any(v.shape[1] != C for v, _ in pairs):
        raise ChannelMismatch("series passed to fit_scaler differ in channel count")
    vals = np.concatenate([v for v, _ in pairs])
    obs = np.concatenate([o for _, o in pairs])
    loc = np.zeros(C)
    scale = np.ones(C)
    for c in range(C):
        x = vals[obs[:, c], c]
        if x.size == 0:
            continue
        if kind == "standard":
            loc[c] = x.mean()
            scale[c] = np.sqrt(np.mean((x - loc[c]) ** 2))
        else:
            loc[c], scale[c] = x.min(), x.max()
    return ScalerParams(kind, loc, scale, eps)


def apply_scaler(params: ScalerParams, data, observed=None, direction: str = "forward") -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.shape[-1] != params.n_channels:
        raise ChannelMismatch(f"data has {data.shape[-1]} channels, scaler has {params.n_channels}")
    div = params._divisor()
    if direction == "forward":
        out = (data - params.loc) / div
    elif direction == "inverse":
        out = data * div + params.loc
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', not {direction!r}")
    if observed is not None:
        out = np.where(observed, out, FILL_VALUE)
    return out


def scale_series(params: ScalerParams, series: TimeSeries, direction: str = "forward") -> TimeSeries:
    vals = apply_scaler(params, series.values, series.observed, direction)
    vals.flags.writeable = False
    return TimeSeries(series.source, series.timestamps, vals, series.observed, series.channels)


# ---------------------------------------------------------------------------
# instance normalization


def masked_channel_stats(values: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Population mean/std per channel over mask-true entries; (0, 1) for empty channels."""
    n = mask.sum(axis=0)
    safe = np.maximum(n, 1)
    mean = np.where(mask, values, 0.0).sum(axis=0) / safe
    var = np.where(mask, (values - mean) ** 2, 0.0).sum(axis=0) / safe
    empty = n == 0
    return np.where(empty, 0.0, mean), np.where(empty, 1.0, np.sqrt(var))


def instance_normalize(window: SampleWindow, eps: float = DEFAULT_EPS) -> tuple[SampleWindow, tuple]:
    """Standardize input and target with statistics of the visible lookback.

    Artificially hidden entries are excluded from the statistics so nothing
    the model may not see leaks in through them.
    """
    vis = window.visible
    mean, std = masked_channel_stats(window.input, vis)
    div = std + eps
    inp = np.where(window.input_observed, (window.input - mean) / div, FILL_VALUE)
    tgt = np.where(window.target_observed, (window.target - mean) / div, FILL_VALUE)
    stats = (mean, std)
    return replace(window, input=inp, target=tgt, window_stats=stats), stats


def denormalize(values: np.ndarray, stats: tuple[np.ndarray, np.ndarray], eps: float = DEFAULT_EPS) -> np.ndarray:
    mean, std = stats
    return values * (std + eps) + mean


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskStrategy:
    kind: str = "none"
    rate: float = 0.0
    block_len: int = 1
    n_blocks: int = 1

    def __post_init__(self):
        if self.kind not in ("none", "mcar", "block"):
            raise ConfigError(f"unknown mask strategy {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise InvalidRate(f"mask rate {self.rate} outside [0, 1]")
        if self.block_len < 1 or self.n_blocks < 0:
            raise ConfigError("block_len must be >= 1 and n_blocks >= 0")


def generate_mask(shape, strategy: MaskStrategy, rng: SplitMix64) -> np.ndarray:
    """True marks positions to hide. Blocks run along axis 0, independently per channel."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    if strategy.kind == "none":
        return np.zeros(shape, dtype=bool)
    if strategy.kind == "mcar":
        return rng.uniform(shape) < strategy.rate
    mask = np.zeros(shape, dtype=bool)
    T = shape[0]
    if T == 0:
        return mask
    flat = mask.reshape(T, -1)
    for c in range(flat.shape[1]):
        starts = rng.integers(T, strategy.n_blocks)
        for s in starts:
            flat[s : s + strategy.block_len, c] = True
    return mask


def with_artificial(window: SampleWindow, mask: np.ndarray) -> SampleWindow:
    """Attach an artificial mask, restricted to observed lookback entries."""
    return replace(window, artificial=np.asarray(mask, dtype=bool) & window.input_observed)


def compose_masks(window: SampleWindow, task: "Task | str") -> tuple[np.ndarray, np.ndarray]:
    """Return (model_visible, loss_mask) for one window."""
    task = Task.parse(task)
    if task is Task.IMPUTE:
        return window.input_observed & ~window.artificial, window.artificial.copy()
    return window.input_observed.copy(), window.target_observed.copy()


# ---------------------------------------------------------------------------
# collation


@dataclass(frozen=True, eq=False)
class WindowBatch:
    """Collated windows ready for a model.

    ``input`` holds model-visible values only (hidden and padded entries are
    0.0); ``input_values`` keeps the real lookback values as imputation truth.
    """

    input: np.ndarray
    visible: np.ndarray
    input_values: np.ndarray
    input_observed: np.ndarray
    artificial: np.ndarray
    target: np.ndarray
    target_observed: np.ndarray
    exog: np.ndarray
    pad_mask: np.ndarray
    target_pad: np.ndarray
    stats: Optional[tuple[np.ndarray, np.ndarray]] = None
    contexts: tuple[tuple[int, Batch], ...] = ()
    source_index: int = 0
    eps: float = DEFAULT_EPS

    @property
    def size(self) -> int:
        return self.input.shape[0]

    def loss_mask(self, task: "Task | str") -> np.ndarray:
        if Task.parse(task) is Task.IMPUTE:
            return self.artificial & self.pad_mask[..., None]
        return self.target_observed & self.target_pad[..., None]

    def truth(self, task: "Task | str") -> np.ndarray:
        return self.input_values if Task.parse(task) is Task.IMPUTE else self.target

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        if self.stats is None:
            return values
        mean, std = self.stats
        return values * (std + self.eps)[:, None, :] + mean[:, None, :]

    def truth_original(self, task: "Task | str") -> np.ndarray:
        """Truth in pre-instance-norm units, zero where not evaluable."""
        t = self.denormalize(self.truth(task))
        return np.where(self.loss_mask(task), t, 0.0)


def _normalize_context(ctx: ContextSlice, eps: float) -> tuple[np.ndarray, np.ndarray]:
    mean, std = masked_channel_stats(ctx.values, ctx.observed)
    vals = np.where(ctx.observed, (ctx.values - mean) / (std + eps), FILL_VALUE)
    return vals, ctx.observed


def collate_windows(
    windows: Sequence[SampleWindow], instance_norm: bool = False, eps: float = DEFAULT_EPS
) -> WindowBatch:
    if len(windows) == 0:
        raise EmptyBatch("cannot collate an empty batch")
    if instance_norm:
        windows = [instance_normalize(w, eps)[0] for w in windows]
    C = windows[0].input.shape[1]
    if any(w.input.shape[1] != C for w in windows):
        raise ChannelMismatch("windows in a batch differ in channel count")

    inputs = pad_batch([w.input for w in windows])
    visible = pad_batch([w.visible for w in windows]).values
    observed = pad_batch([w.input_observed for w in windows]).values
    artificial = pad_batch([w.artificial for w in windows]).values
    targets = pad_batch([w.target for w in windows])
    target_obs = pad_batch([w.target_observed for w in windows]).values
    exog = np.stack([w.exog for w in windows])

    stats = None
    if instance_norm:
        stats = (np.stack([w.window_stats[0] for w in windows]), np.stack([w.window_stats[1] for w in windows]))

    contexts = []
    if windows[0].context:
        for j, first in enumerate(windows[0].context):
            parts = [(_normalize_context(w.context[j], eps) if instance_norm else (w.context[j].values, w.context[j].observed)) for w in windows]
            b = pad_batch([p[0] for p in parts])
            obs = pad_batch([p[1] for p in parts]).values
            contexts.append((first.source_index, replace(b, values=np.where(obs, b.values, 0.0))))

    return WindowBatch(
        input=np.where(visible, inputs.values, FILL_VALUE),
        visible=visible & inputs.pad_mask[..., None],
        input_values=inputs.values,
        input_observed=observed,
        artificial=artificial,
        target=targets.values,
        target_observed=target_obs,
        exog=exog,
        pad_mask=inputs.pad_mask,
        target_pad=targets.pad_mask,
        stats=stats,
        contexts=tuple(contexts),
        source_index=windows[0].source_index,
        eps=eps,
    )
