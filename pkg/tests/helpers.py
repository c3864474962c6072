"""Shared builders for model, padding and training tests."""

from dataclasses import replace

import numpy as np

from chronosparse.core import SourceId, SplitMix64, make_series
from chronosparse.models import ModelSpec
from chronosparse.pipeline import (
    Batch,
    ContextSlice,
    MaskStrategy,
    Task,
    WindowSpec,
    collate_windows,
    generate_mask,
    iter_windows,
    with_artificial,
)


def random_windows(spec: ModelSpec, n: int, seed: int, missing: float = 0.2, mask_rate: float = 0.3, n_context: int = 0):
    """Random sparse windows shaped for ``spec``; imputation windows get an MCAR artificial mask."""
    rng = np.random.default_rng(seed)
    L, H, C, E = spec.lookback, spec.horizon, spec.channels, spec.exog
    T = L + H + n - 1
    vals = rng.normal(size=(T, C + E))
    obs = rng.random((T, C + E)) >= missing
    obs[:, C:] = True
    s = make_series(SourceId("target", 0), range(T), vals, obs)
    ws = iter_windows(s, WindowSpec(L, H, exogenous=tuple(range(C, C + E))))
    if spec.task is Task.IMPUTE:
        strat = MaskStrategy("mcar", mask_rate)
        ws = [with_artificial(w, generate_mask(w.input.shape, strat, SplitMix64(seed * 1000 + k))) for k, w in enumerate(ws)]
    if n_context:
        out = []
        for w in ws:
            ctx = []
            for j in range(n_context):
                length = int(rng.integers(3, 3 * L))
                c_obs = rng.random((length, 1)) >= missing
                ctx.append(ContextSlice(j + 1, np.where(c_obs, rng.normal(size=(length, 1)), 0.0), c_obs))
            out.append(replace(w, context=tuple(ctx)))
        ws = out
    return ws


def random_batch(spec: ModelSpec, n: int, seed: int, instance_norm: bool = True, **kw):
    return collate_windows(random_windows(spec, n, seed, **kw), instance_norm)


def _grow(a, axis, extra, fill):
    shape = list(a.shape)
    shape[axis] = extra
    return np.concatenate([a, np.broadcast_to(np.asarray(fill, dtype=a.dtype), shape)], axis=axis) if extra else a


def _garbage(rng, a, axis, extra):
    shape = list(a.shape)
    shape[axis] = extra
    if a.dtype == bool:
        return np.concatenate([a, rng.random(shape) < 0.5], axis=axis)
    return np.concatenate([a, rng.normal(size=shape) * 1e3], axis=axis)


def append_padding(batch, rng, extra_samples: int = 0, extra_steps: int = 0, extra_context: int = 0):
    """Append padded samples and/or padded lookback steps filled with garbage.

    Padded cells carry arbitrary values but are flagged false in every
    mask the library reads, so results must not move.
    """
    b = batch
    if extra_steps:
        b = replace(
            b,
            input=_garbage(rng, b.input, 1, extra_steps),
            input_values=_garbage(rng, b.input_values, 1, extra_steps),
            visible=_grow(b.visible, 1, extra_steps, False),
            input_observed=_garbage(rng, b.input_observed, 1, extra_steps),
            artificial=_grow(b.artificial, 1, extra_steps, False),
            pad_mask=_grow(b.pad_mask, 1, extra_steps, False),
        )
    if extra_context:
        ctxs = []
        for idx, c in b.contexts:
            vals = c.values if c.values.ndim == 3 else c.values[..., None]
            ctxs.append((idx, Batch(_garbage(rng, vals, 1, extra_context), _grow(c.pad_mask, 1, extra_context, False), c.lengths)))
        b = replace(b, contexts=tuple(ctxs))
    if extra_samples:
        stats = b.stats
        if stats is not None:
            stats = tuple(np.concatenate([s, np.abs(rng.normal(size=(extra_samples,) + s.shape[1:])) + 1]) for s in stats)
        ctxs = []
        for idx, c in b.contexts:
            ctxs.append((idx, Batch(_garbage(rng, c.values, 0, extra_samples), _grow(c.pad_mask, 0, extra_samples, False), c.lengths)))
        b = replace(
            b,
            input=_garbage(rng, b.input, 0, extra_samples),
            input_values=_garbage(rng, b.input_values, 0, extra_samples),
            visible=_grow(b.visible, 0, extra_samples, False),
            input_observed=_garbage(rng, b.input_observed, 0, extra_samples),
            artificial=_grow(b.artificial, 0, extra_samples, False),
            target=_garbage(rng, b.target, 0, extra_samples),
            target_observed=_garbage(rng, b.target_observed, 0, extra_samples),
            exog=_garbage(rng, b.exog, 0, extra_samples),
            pad_mask=_grow(b.pad_mask, 0, extra_samples, False),
            target_pad=_grow(b.target_pad, 0, extra_samples, False),
            stats=stats,
            contexts=tuple(ctxs),
        )
    return b
