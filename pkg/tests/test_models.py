import itertools
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronosparse.autodiff import Parameter, grad_check
from chronosparse.core import make_series
from chronosparse.errors import (
    BatchShapeMismatch,
    ConfigError,
    EvenKernel,
    LookbackShorterThanPeriod,
    NoObservedHistory,
    ParamShapeMismatch,
)
from chronosparse.models import (
    ModelSpec,
    decompose_moving_average,
    forecast_naive_last,
    forecast_seasonal_naive,
    impute_window_mean,
    init_parameters,
    loss_graph,
    model_forward,
    parameter_shapes,
    source_tokens,
)
from chronosparse.pipeline import (
    ContextSlice,
    WindowSpec,
    collate_windows,
    patchify_batch,
    slice_window,
    with_artificial,
)

from helpers import append_padding, random_batch, random_windows


def window(values, observed=None, H=2):
    values = np.asarray(values, dtype=float).reshape(-1, 1)
    L = len(values)
    obs = np.ones((L, 1), bool) if observed is None else np.asarray(observed, bool).reshape(-1, 1)
    s = make_series("s", range(L + H), np.concatenate([values, np.zeros((H, 1))]), np.concatenate([obs, np.ones((H, 1), bool)]))
    return slice_window(s, WindowSpec(L, H), 0)


def trend_oracle(seq, k):
    """Exact rational moving average with edge replication."""
    half = (k - 1) // 2
    xs = [Fraction(x) for x in seq]
    padded = [xs[0]] * half + xs + [xs[-1]] * half
    return [sum(padded[i : i + k]) / k for i in range(len(xs))]


class TestBaselines:
    def test_naive_last(self):
        assert forecast_naive_last(window([1, 2, 3])).values[:, 0].tolist() == [3, 3]

    def test_naive_last_skips_missing(self):
        w = window([1, 2, 3], observed=[True, True, False])
        assert forecast_naive_last(w).values[:, 0].tolist() == [2, 2]

    def test_naive_last_no_history(self):
        with pytest.raises(NoObservedHistory):
            forecast_naive_last(window([1, 2], observed=[False, False]))

    def test_seasonal(self):
        w = window([1, 2, 3, 1, 2, 3])
        assert forecast_seasonal_naive(w, 3).values[:, 0].tolist() == [1, 2]

    def test_seasonal_m1_is_naive(self):
        assert forecast_seasonal_naive(window([1, 2, 3]), 1).values[:, 0].tolist() == [3, 3]

    def test_seasonal_wrap(self):
        w = window([1, 2, 3, 1, 2, 3], H=4)
        assert forecast_seasonal_naive(w, 3).values[:, 0].tolist() == [1, 2, 3, 1]

    def test_seasonal_missing_source_falls_back(self):
        w = window([1, 2, 3, 1, 2, 3], observed=[True, True, True, False, True, True], H=2)
        # step 0 reads index 3 (missing) so uses the last observed value 3
        assert forecast_seasonal_naive(w, 3).values[:, 0].tolist() == [3, 2]

    def test_seasonal_lookback_too_short(self):
        with pytest.raises(LookbackShorterThanPeriod):
            forecast_seasonal_naive(window([1, 2]), 3)

    def test_window_mean(self):
        w = with_artificial(window([1.0, 2.0, 9.0]), np.array([[False], [False], [True]]))
        assert impute_window_mean(w).values[:, 0].tolist() == [1.5, 1.5, 1.5]


class TestDecomposition:
    def test_hand_values(self):
        trend, rem = decompose_moving_average(np.array([1.0, 2.0, 3.0, 4.0]), 3)
        np.testing.assert_allclose(trend, [4 / 3, 2, 3, 11 / 3], rtol=1e-15)

    def test_k1(self):
        x = np.random.default_rng(0).normal(size=20)
        trend, rem = decompose_moving_average(x, 1)
        assert trend.tobytes() == x.tobytes() and np.all(rem == 0.0)

    def test_constant(self):
        trend, rem = decompose_moving_average(np.full(15, 0.1), 5)
        assert np.all(rem == 0.0) and np.all(trend == 0.1)

    def test_even_kernel(self):
        with pytest.raises(EvenKernel):
            decompose_moving_average(np.ones(5), 4)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=30), st.integers(0, 6))
    def test_matches_rational_oracle(self, xs, half):
        k = 2 * half + 1
        trend, _ = decompose_moving_average(np.array(xs, dtype=float), k)
        want = [float(v) for v in trend_oracle(xs, k)]
        np.testing.assert_allclose(trend, want, rtol=1e-13, atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=40),
        st.integers(0, 12),
    )
    def test_reconstruction(self, xs, half):
        # exact up to one rounding: when |trend| dwarfs |x| the remainder x - trend
        # is itself rounded, so no float pair can sum back to x bit for bit
        x = np.array(xs)
        trend, rem = decompose_moving_average(x, 2 * half + 1)
        assert np.all(np.abs((trend + rem) - x) <= np.spacing(np.maximum(np.abs(x), np.abs(trend))))

    def test_axis(self):
        x = np.random.default_rng(1).normal(size=(3, 10, 2))
        t1, _ = decompose_moving_average(x, 5, axis=1)
        t2, _ = decompose_moving_average(x[:, :, 0], 5, axis=-1)
        np.testing.assert_array_equal(t1[:, :, 0], t2)


TRAINABLE_SPECS = [
    ModelSpec("linear", "forecast", lookback=12, horizon=3, channels=2),
    ModelSpec("linear", "impute", lookback=12, horizon=3, channels=2),
    ModelSpec("linear", "forecast", lookback=12, horizon=3, channels=2, exog=1),
    ModelSpec("dlinear", "forecast", lookback=12, horizon=3, channels=2, kernel=5),
    ModelSpec("dlinear", "impute", lookback=12, horizon=3, channels=1, kernel=25),
    ModelSpec("patch_mlp", "forecast", lookback=12, horizon=3, channels=2, patch_len=4, patch_stride=3, hidden=5),
    ModelSpec("patch_mlp", "impute", lookback=12, horizon=3, channels=2, patch_len=5, patch_stride=5, hidden=4),
    ModelSpec("patch_mlp", "forecast", lookback=12, horizon=3, channels=1, exog=2, patch_len=4, patch_stride=4, hidden=3),
    ModelSpec("source_fusion", "forecast", lookback=12, horizon=3, channels=2, patch_len=4, patch_stride=4, embed_dim=5, n_sources=3),
    ModelSpec("source_fusion", "impute", lookback=12, horizon=3, channels=1, patch_len=3, patch_stride=2, embed_dim=4, n_sources=2),
]


def _n_ctx(spec):
    return spec.n_sources - 1 if spec.kind == "source_fusion" else 0


def _ids(spec):
    return f"{spec.kind}-{spec.task.value}-e{spec.exog}"


class TestForward:
    @pytest.mark.parametrize("spec", TRAINABLE_SPECS, ids=_ids)
    def test_output_shape(self, spec):
        b = random_batch(spec, 5, 0, n_context=_n_ctx(spec))
        out = model_forward(spec, init_parameters(spec, 1), b)
        assert out.shape == (5, spec.out_len, spec.channels)
        assert np.all(np.isfinite(out))

    def test_dlinear_zero_params(self):
        spec = ModelSpec("dlinear", lookback=10, horizon=4, channels=3, kernel=3)
        params = {k: Parameter(k, np.zeros(s)) for k, s in parameter_shapes(spec).items()}
        b = random_batch(spec, 4, 3, instance_norm=False)
        assert np.all(model_forward(spec, params, b) == 0.0)

    def test_patch_count(self):
        spec = ModelSpec("patch_mlp", lookback=10, horizon=1, patch_len=4, patch_stride=4)
        b = random_batch(spec, 2, 0)
        patches, _ = patchify_batch(b.input, b.pad_mask, 4, 4)
        assert patches.shape[1] == 3

    def test_source_fusion_token_count(self):
        spec = ModelSpec("source_fusion", lookback=96, horizon=4, channels=1, patch_len=8, patch_stride=8, n_sources=2)
        ws = random_windows(spec, 2, 0)
        ctx = (np.zeros((37, 1)), np.ones((37, 1), bool))
        ws = [replace(w, context=(ContextSlice(1, *ctx),)) for w in ws]
        b = collate_windows(ws, True)
        tokens, mask, ids = source_tokens(spec, b)
        assert tokens.shape == (2, 17, 8)
        assert mask.sum(axis=1).tolist() == [17, 17]
        assert (ids == 0).sum(axis=1).tolist() == [12, 12]
        out = model_forward(spec, init_parameters(spec, 0), b)
        assert out.shape == (2, 4, 1)

    def test_source_fusion_permutation(self):
        spec = TRAINABLE_SPECS[8]
        b = random_batch(spec, 4, 5, n_context=2)
        params = init_parameters(spec, 2)
        ref = model_forward(spec, params, b)
        for perm in itertools.permutations(range(len(b.contexts))):
            pb = replace(b, contexts=tuple(b.contexts[i] for i in perm))
            assert np.max(np.abs(model_forward(spec, params, pb) - ref)) < 1e-12

    @pytest.mark.parametrize("spec", TRAINABLE_SPECS, ids=_ids)
    def test_hidden_values_do_not_leak(self, spec):
        ws = random_windows(spec, 6, 8, n_context=_n_ctx(spec))
        params = init_parameters(spec, 3)
        rng = np.random.default_rng(0)
        poked = []
        for w in ws:
            hidden = ~w.visible
            poked.append(replace(w, input=np.where(hidden, rng.normal(size=w.input.shape) * 1e3, w.input)))
        a = model_forward(spec, params, collate_windows(ws, False))
        b = model_forward(spec, params, collate_windows(poked, False))
        assert a.tobytes() == b.tobytes()

    def test_param_shape_mismatch(self):
        spec = TRAINABLE_SPECS[0]
        params = init_parameters(spec, 0)
        params["linear.weight"] = Parameter("linear.weight", np.zeros((3, 3)))
        with pytest.raises(ParamShapeMismatch):
            model_forward(spec, params, random_batch(spec, 2, 0))

    def test_batch_shape_mismatch(self):
        spec = TRAINABLE_SPECS[0]
        other = replace(spec, lookback=10)
        with pytest.raises(BatchShapeMismatch):
            model_forward(spec, init_parameters(spec, 0), random_batch(other, 2, 0))

    def test_spec_validation(self):
        with pytest.raises(EvenKernel):
            ModelSpec("dlinear", kernel=4)
        with pytest.raises(ConfigError):
            ModelSpec("transformer")
        with pytest.raises(ConfigError):
            ModelSpec("seasonal_naive", period=0)
        with pytest.raises(ConfigError):
            ModelSpec("patch_mlp", patch_len=0)

    def test_kernel_capped_by_lookback(self):
        assert ModelSpec("dlinear", lookback=10).effective_kernel == 9
        assert ModelSpec("dlinear", lookback=7, kernel=3).effective_kernel == 3


class TestPadding:
    @pytest.mark.parametrize("spec", TRAINABLE_SPECS, ids=_ids)
    def test_padded_samples_inert(self, spec):
        b = random_batch(spec, 5, 1, n_context=_n_ctx(spec))
        params = init_parameters(spec, 4)
        pb = append_padding(b, np.random.default_rng(0), extra_samples=3)
        _, la = loss_graph(spec, params, b)
        _, lb = loss_graph(spec, params, pb)
        assert abs(la.value[0] - lb.value[0]) <= 1e-12
        out = model_forward(spec, params, pb)[:5]
        assert np.max(np.abs(out - model_forward(spec, params, b))) <= 1e-12

    @pytest.mark.parametrize("spec", [s for s in TRAINABLE_SPECS if s.kind in ("patch_mlp", "source_fusion") and s.task.value == "forecast" and not s.exog], ids=_ids)
    def test_padded_steps_inert(self, spec):
        b = random_batch(spec, 4, 2, n_context=_n_ctx(spec))
        params = init_parameters(spec, 5)
        pb = append_padding(b, np.random.default_rng(1), extra_steps=7, extra_context=5)
        assert np.max(np.abs(model_forward(spec, params, pb) - model_forward(spec, params, b))) <= 1e-12


class TestInit:
    def test_deterministic(self):
        spec = TRAINABLE_SPECS[5]
        a, b = init_parameters(spec, 9), init_parameters(spec, 9)
        assert all(a[k].value.tobytes() == b[k].value.tobytes() for k in a)

    @pytest.mark.parametrize("spec", TRAINABLE_SPECS, ids=_ids)
    def test_biases_zero(self, spec):
        for name, p in init_parameters(spec, 0).items():
            if name.endswith(".bias"):
                assert np.all(p.value == 0.0)

    def test_bound(self):
        spec = ModelSpec("linear", lookback=100, horizon=100)
        w = init_parameters(spec, 0)["linear.weight"].value
        assert w.size == 10**4
        bound = np.sqrt(1 / 100)
        assert np.max(np.abs(w)) <= bound
        # the bound should be nearly attained by 10^4 uniform draws
        assert np.max(np.abs(w)) > 0.99 * bound

    def test_names(self):
        names = set(parameter_shapes(TRAINABLE_SPECS[3]))
        assert names == {"dlinear.trend.weight", "dlinear.trend.bias", "dlinear.seasonal.weight", "dlinear.seasonal.bias"}


class TestGradients:
    # MSE only: with the sign-valued MAE gradient, per-sample terms can cancel to an
    # exact analytic zero where central differences return pure round-off, which the
    # 1e-8 floor of the relative error turns into a spurious failure. The MAE op's own
    # gradient is covered in the autodiff tests.
    @pytest.mark.parametrize("spec", TRAINABLE_SPECS, ids=_ids)
    def test_grad_check(self, spec):
        b = random_batch(spec, 3, 11, n_context=_n_ctx(spec))
        params = init_parameters(spec, 12)
        # move biases off zero so relu units are not sitting exactly at a kink
        for name, p in params.items():
            if name.endswith(".bias"):
                p.value = np.random.default_rng(0).normal(size=p.shape) * 0.1
        report = grad_check(lambda tape: loss_graph(spec, params, b, "mse", tape)[1], params)
        assert report.passed, report.per_parameter
