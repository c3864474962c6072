"""Foundational data types, mask semantics and the splitmix64 generator."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptySeries, NonMonotonicTimestamps, ShapeMismatch

FILL_VALUE = 0.0
PAD_ID = 0
UNK_ID = 1

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class MaskKind(enum.Enum):
    """The three mask families. They are stored separately and never merged in place."""

    OBSERVED = "observed"      # real data vs. missing
    ARTIFICIAL = "artificial"  # hidden from the model for self-supervision
    PADDING = "padding"        # created by batch collation


@dataclass(frozen=True, order=True)
class SourceId:
    name: str
    index: int = 0


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """One source's regularly indexed multivariate series.

    ``values`` and ``observed`` are T x C; unobserved cells hold exactly 0.0.
    Arrays are made read-only so instances can be shared freely.
    """

    source: SourceId
    timestamps: np.ndarray
    values: np.ndarray
    observed: np.ndarray
    channels: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.channels:
            object.__setattr__(
                self, "channels", tuple(f"c{i}" for i in range(self.values.shape[1]))
            )

    @property
    def n_ticks(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def with_source(self, source: SourceId) -> "TimeSeries":
        return TimeSeries(source, self.timestamps, self.values, self.observed, self.channels)

    def rows(self, start: int, stop: int) -> "TimeSeries":
        """Contiguous row slice sharing the same source id and channels."""
        return TimeSeries(
            self.source,
            self.timestamps[start:stop],
            self.values[start:stop],
            self.observed[start:stop],
            self.channels,
        )

    def identical(self, other: "TimeSeries") -> bool:
        return (
            self.source == other.source
            and self.channels == other.channels
            and np.array_equal(self.timestamps, other.timestamps)
            and self.values.tobytes() == other.values.tobytes()
            and np.array_equal(self.observed, other.observed)
        )


@dataclass(frozen=True, eq=False)
class TokenSequence:
    source: SourceId
    tokens: np.ndarray
    vocabulary: Mapping[str, int]
    name: str = ""

    def __len__(self) -> int:
        return len(self.tokens)


def make_series(
    source: SourceId | str,
    timestamps: Sequence[int],
    values,
    observed=None,
    channels: Sequence[str] = (),
) -> TimeSeries:
    """Validate and canonicalize a series.

    Non-finite values become missing. When ``observed`` is given, cells it
    marks false are zeroed as well.
    """
    if isinstance(source, str):
        source = SourceId(source, 0)
    ts = np.asarray(timestamps, dtype=np.int64).reshape(-1)
    vals = np.array(values, dtype=np.float64)
    if vals.ndim == 1:
        vals = vals.reshape(-1, 1)
    if vals.ndim != 2:
        raise ShapeMismatch(f"values must be T x C, got shape {vals.shape}")
    if len(ts) != vals.shape[0]:
        raise ShapeMismatch(f"{len(ts)} timestamps for {vals.shape[0]} rows")
    if len(ts) > 1 and np.any(np.diff(ts) <= 0):
        raise NonMonotonicTimestamps("timestamps must be strictly increasing")

    finite = np.isfinite(vals)
    if observed is None:
        obs = finite
    else:
        obs = np.array(observed, dtype=bool)
        if obs.ndim == 1:
            obs = obs.reshape(-1, 1)
        if obs.shape != vals.shape:
            raise ShapeMismatch(f"observed shape {obs.shape} != values shape {vals.shape}")
        obs = obs & finite
    vals[~obs] = FILL_VALUE
    if channels and len(channels) != vals.shape[1]:
        raise ShapeMismatch(f"{len(channels)} channel names for {vals.shape[1]} channels")
    return TimeSeries(source, _readonly(ts), _readonly(vals), _readonly(obs), tuple(channels))


def missing_rate(series: TimeSeries) -> float:
    total = series.observed.size
    if total == 0:
        raise EmptySeries(f"source {series.source.name!r} has no cells")
    return float(total - np.count_nonzero(series.observed)) / total


# ---------------------------------------------------------------------------
# splitmix64


def splitmix64_mix(z: int) -> int:
    """The splitmix64 output finalizer applied to one 64-bit state."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def splitmix64(x: int) -> int:
    """First output of a splitmix64 stream seeded with ``x``."""
    return splitmix64_mix((x + _GAMMA) & _MASK64)


def child_seed(parent_seed: int, stream_index: int) -> int:
    return splitmix64((parent_seed ^ stream_index) & _MASK64)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Deterministic splitmix64 stream.

    Scalar and vectorized draws consume the same state sequence, so
    ``uniform(n)`` equals ``n`` successive ``random()`` calls bit for bit.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.state = self.seed

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        return splitmix64_mix(self.state)

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        states = np.uint64(self.state) + steps * np.uint64(_GAMMA)
        self.state = (self.state + n * _GAMMA) & _MASK64
        return _mix_array(states)

    def uniform(self, size) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = math.prod(shape)
        top = (self.u64(n) >> np.uint64(11)).astype(np.float64)
        return (top / 9007199254740992.0).reshape(shape)

    def normal(self, size) -> np.ndarray:
        """Standard normal draws via Box-Muller (cosine branch only)."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = math.prod(shape)
        u = self.uniform(2 * n)
        u1, u2 = 1.0 - u[:n], u[n:]
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)).reshape(shape)

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high)."""
        if size is None:
            return min(int(self.random() * high), high - 1)
        return np.minimum((self.uniform(size) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        draws = self.uniform(max(n - 1, 0))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(draws[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def child(self, stream_index: int) -> "SplitMix64":
        return SplitMix64(child_seed(self.seed, stream_index))


def rng_stream(seed: int) -> SplitMix64:
    return SplitMix64(seed)


def derive_rng(seed: int, *path: int) -> SplitMix64:
    """Nested child stream: derive_rng(s, a, b) == rng(s).child(a).child(b)."""
    rng = SplitMix64(seed)
    for index in path:
        rng = rng.child(index)
    return rng
