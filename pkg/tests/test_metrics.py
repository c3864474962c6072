import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronosparse.errors import KindMismatch, NoEvaluablePoints, ShapeMismatch
from chronosparse.metrics import (
    ALL_KINDS,
    MetricKind,
    MetricState,
    masked_metric,
    stream_finalize,
    stream_merge,
    stream_update,
)


def oracle(kind, pred, truth, mask):
    """Plain-loop metric over mask-true positions, independent of the library."""
    pairs = [(p, t) for p, t, m in zip(pred.ravel(), truth.ravel(), mask.ravel()) if m]
    if kind == "MAPE":
        pairs = [(p, t) for p, t in pairs if abs(t) >= 1e-8]
        terms = [abs(p - t) / abs(t) for p, t in pairs]
    elif kind == "SMAPE":
        pairs = [(p, t) for p, t in pairs if abs(p) + abs(t) >= 1e-8]
        terms = [2 * abs(p - t) / (abs(p) + abs(t)) for p, t in pairs]
    elif kind == "WAPE":
        den = math.fsum(abs(t) for _, t in pairs)
        if not pairs or den < 1e-8:
            return None
        return math.fsum(abs(p - t) for p, t in pairs) / den
    elif kind in ("MSE", "RMSE"):
        terms = [(p - t) ** 2 for p, t in pairs]
    else:
        terms = [abs(p - t) for p, t in pairs]
    if not terms:
        return None
    v = math.fsum(terms) / len(terms)
    return math.sqrt(v) if kind == "RMSE" else v


def random_sparse(rng, n):
    pred = rng.normal(size=n)
    truth = rng.normal(size=n)
    truth[rng.random(n) < 0.05] = 0.0
    mask = rng.random(n) < rng.uniform(0.2, 0.9)
    return pred, truth, mask


class TestDense:
    @pytest.mark.parametrize(
        "kind,expected",
        [("MAE", 1.5), ("MSE", 2.5), ("RMSE", math.sqrt(2.5)), ("MAPE", 1.0), ("SMAPE", (2 / 3 + 2 / 3) / 2), ("WAPE", 1.0)],
    )
    def test_hand_values(self, kind, expected):
        got = masked_metric(kind, np.array([2.0, 4.0]), np.array([1.0, 2.0]), np.array([True, True]))
        assert math.isclose(got, expected, rel_tol=1e-15)
        assert round(masked_metric("RMSE", np.array([2.0, 4.0]), np.array([1.0, 2.0]), np.ones(2, bool)), 5) == 1.58114

    @pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
    def test_identity_is_zero(self, kind):
        x = np.array([1.0, -2.0, 3.0])
        assert masked_metric(kind, x, x, np.array([True, False, True])) == 0.0

    @pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
    def test_empty_mask(self, kind):
        with pytest.raises(NoEvaluablePoints):
            masked_metric(kind, np.ones(3), np.ones(3), np.zeros(3, bool))

    def test_mape_excludes_zero_truth(self):
        got = masked_metric("MAPE", np.array([1.0, 3.0]), np.array([0.0, 2.0]), np.ones(2, bool))
        assert got == 0.5

    def test_mape_all_zero_truth(self):
        with pytest.raises(NoEvaluablePoints):
            masked_metric("MAPE", np.ones(2), np.zeros(2), np.ones(2, bool))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            masked_metric("MAE", np.ones(2), np.ones(3), np.ones(2, bool))

    def test_unknown_kind(self):
        with pytest.raises(KindMismatch):
            MetricKind.parse("R2")

    @pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
    def test_matches_loop_oracle(self, kind):
        rng = np.random.default_rng(7)
        for _ in range(20):
            p, t, m = random_sparse(rng, 300)
            want = oracle(kind, p, t, m)
            assert math.isclose(masked_metric(kind, p, t, m), want, rel_tol=1e-12)


class TestStreaming:
    def test_all_false_update_is_noop(self):
        s = stream_update(MetricState.zero("MAE"), np.ones(3), np.zeros(3), np.array([True, False, True]))
        assert stream_update(s, np.ones(3), np.zeros(3), np.zeros(3, bool)) == s

    @pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
    def test_two_updates_vs_one(self, kind):
        # small integers keep every partial sum exact, so states match fieldwise
        a = (np.array([2.0, 4.0, 1.0]), np.array([1.0, 2.0, 4.0]), np.array([True, True, False]))
        b = (np.array([8.0, 5.0]), np.array([4.0, 5.0]), np.array([True, True]))
        two = stream_update(stream_update(MetricState.zero(kind), *a), *b)
        one = stream_update(MetricState.zero(kind), *(np.concatenate(x) for x in zip(a, b)))
        assert two.accumulators() == one.accumulators()

    @pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
    def test_100_batches_match_dense(self, kind):
        rng = np.random.default_rng(11)
        batches = [random_sparse(rng, int(rng.integers(1, 80))) for _ in range(100)]
        state = MetricState.zero(kind)
        for b in batches:
            state = stream_update(state, *b)
        dense = oracle(kind, *(np.concatenate(x) for x in zip(*batches)))
        assert abs(stream_finalize(state) - dense) / max(1e-12, dense) < 1e-9

    def test_finalize_hand_states(self):
        assert stream_finalize(MetricState(MetricKind.MAE, sum_abs_err=3.0, count=2)) == 1.5
        assert stream_finalize(MetricState(MetricKind.WAPE, sum_abs_err=3.0, sum_abs_true=3.0, count=2)) == 1.0
        with pytest.raises(NoEvaluablePoints):
            stream_finalize(MetricState.zero("RMSE"))

    def test_exclusion_count(self):
        s = stream_update(MetricState.zero("MAPE"), np.array([1.0, 2.0, 3.0]), np.array([0.0, 1.0, 0.0]), np.ones(3, bool))
        assert s.count == 1 and s.excluded == 2


@st.composite
def states(draw, kind=MetricKind.SMAPE):
    return MetricState(
        kind,
        draw(st.floats(0, 1e6)),
        draw(st.floats(0, 1e6)),
        draw(st.floats(0, 1e6)),
        draw(st.floats(0, 1e6)),
        draw(st.floats(0, 1e6)),
        draw(st.integers(0, 10**6)),
        draw(st.integers(0, 10**6)),
    )


class TestMerge:
    @given(states())
    def test_identity(self, s):
        assert stream_merge(s, MetricState.zero(s.kind)) == s

    @given(states(), states())
    def test_commutative(self, a, b):
        assert stream_merge(a, b) == stream_merge(b, a)

    @settings(max_examples=200)
    @given(states(), states(), states())
    def test_associative(self, a, b, c):
        left = stream_merge(stream_merge(a, b), c).accumulators()
        right = stream_merge(a, stream_merge(b, c)).accumulators()
        for x, y in zip(left, right):
            assert abs(x - y) <= 1e-12 * max(1.0, abs(x))

    def test_kind_mismatch(self):
        with pytest.raises(KindMismatch):
            stream_merge(MetricState.zero("MAE"), MetricState.zero("MSE"))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32), st.integers(1, 10))
    def test_split_then_merge_equals_serial(self, seed, cut):
        rng = np.random.default_rng(seed)
        batches = [random_sparse(rng, 20) for _ in range(10)]
        for kind in ALL_KINDS:
            serial = MetricState.zero(kind)
            for b in batches:
                serial = stream_update(serial, *b)
            left, right = MetricState.zero(kind), MetricState.zero(kind)
            for b in batches[:cut]:
                left = stream_update(left, *b)
            for b in batches[cut:]:
                right = stream_update(right, *b)
            merged = stream_merge(left, right)
            assert merged.count == serial.count and merged.excluded == serial.excluded
            for x, y in zip(merged.accumulators(), serial.accumulators()):
                assert abs(x - y) <= 1e-12 * max(1.0, abs(y))
