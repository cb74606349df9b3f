import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rangexplain import experts, query
from rangexplain.errors import QuerySpecError, ValidationError
from rangexplain.experts import RangeExpertBank

THIRDS = RangeExpertBank(0.0, (0.0, 1 / 3, 2 / 3), 1.0, top_unbounded=True)
THIRDS_BOUNDED = RangeExpertBank(0.0, (0.0, 1 / 3, 2 / 3), 1.0, top_unbounded=False)
Z_08 = np.array([1 / 3, 1 / 3, 0.8 - 2 / 3])


def logistic_by_hand(t):
    return 1.0 / (1.0 + math.exp(-t))


class TestQueryFromTarget:
    def test_identity_target_gives_all_ones(self):
        q = query.query_from_target(THIRDS, lambda y: y)
        np.testing.assert_allclose(q.weights, 1.0, atol=1e-12)
        assert abs(query.evaluate_query(q, Z_08) - 0.8) < 1e-12

    def test_logistic_weights(self):
        q = query.sigmoid_query(THIRDS_BOUNDED, 0.5, 0.1)
        knots = [0.0, 1 / 3, 2 / 3, 1.0]
        g = [logistic_by_hand((k - 0.5) / 0.1) for k in knots]
        oracle = [(g[i + 1] - g[i]) / (1 / 3) for i in range(3)]
        np.testing.assert_allclose(q.weights, oracle, rtol=1e-12)
        # the quoted middle weight 2.0466 is a rounding slip (the exact value is 2.04678)
        np.testing.assert_allclose(q.weights, [0.4566, 2.0466, 0.4566], atol=5e-4)

    def test_constant_target(self):
        q = query.query_from_target(THIRDS, lambda y: 3.0)
        np.testing.assert_array_equal(q.weights, 0.0)
        assert query.evaluate_query(q, Z_08) == 0.0

    def test_non_affine_on_unbounded_top(self):
        with pytest.raises(ValidationError):
            query.sigmoid_query(THIRDS, 0.5, 0.1)

    def test_affine_on_unbounded_top_is_allowed(self):
        q = query.query_from_target(THIRDS, lambda y: 2 * y + 1)
        np.testing.assert_allclose(q.weights, 2.0)

    def test_non_finite_target(self):
        with pytest.raises(ValidationError):
            query.query_from_target(THIRDS_BOUNDED, lambda y: math.inf)

    @given(st.floats(-1, 2), st.floats(0.01, 2))
    @settings(max_examples=100, deadline=None)
    def test_exact_at_breakpoints_and_monotone_weights(self, center, temp):
        g = lambda y: logistic_by_hand((y - center) / temp)  # noqa: E731
        q = query.sigmoid_query(THIRDS_BOUNDED, center, temp)
        assert np.all(q.weights >= 0)
        for y in THIRDS_BOUNDED.offset + THIRDS_BOUNDED.edges:
            got = query.evaluate_query(q, experts.encode(y, THIRDS_BOUNDED))
            assert abs(got - (g(y) - g(THIRDS_BOUNDED.offset))) <= 1e-12


class TestStepQuery:
    def test_breakpoint_reference(self):
        q = query.step_query(THIRDS, 1 / 3)
        np.testing.assert_array_equal(q.weights, [0, 1, 1])
        assert abs(query.evaluate_query(q, Z_08) - (0.8 - 1 / 3)) < 1e-15
        assert q.snap_distance == 0.0

    def test_offset_reference_is_all_ones(self):
        q = query.step_query(THIRDS, 0.0)
        np.testing.assert_array_equal(q.weights, 1.0)

    def test_snapping(self):
        q = query.step_query(THIRDS, 0.30)
        np.testing.assert_array_equal(q.weights, [0, 1, 1])
        assert abs(q.snap_distance - (1 / 3 - 0.30)) < 1e-15
        assert q.descriptor.snapped == 1 / 3

    def test_tie_snaps_down(self):
        bank = RangeExpertBank(0.0, (0.0, 1.0, 2.0), 3.0)
        np.testing.assert_array_equal(query.step_query(bank, 1.5).weights, [0, 1, 1])

    def test_outside_covered_range(self):
        with pytest.raises(ValidationError):
            query.step_query(THIRDS, 1.5)
        with pytest.raises(ValidationError):
            query.step_query(THIRDS, -0.1)

    def test_is_hinge_on_covered_range(self):
        q = query.step_query(THIRDS, 2 / 3)
        for y in np.linspace(0, 1, 41):
            assert abs(query.evaluate_query(q, experts.encode(y, THIRDS)) - max(0.0, y - 2 / 3)) < 1e-12


class TestEvaluate:
    def test_examples(self):
        assert abs(query.evaluate_query(query.Query([0, 1, 1]), Z_08) - 0.4667) < 1e-4
        assert query.evaluate_query(query.Query([0, 0, 0]), Z_08) == 0.0
        assert abs(query.evaluate_query(query.Query([1, 1, 1]), Z_08) - (0.8 - THIRDS.offset)) < 1e-15

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            query.evaluate_query(query.Query([1, 1]), Z_08)

    def test_batch(self):
        Z = experts.encode_many([0.1, 0.5, 0.9], THIRDS)
        np.testing.assert_allclose(query.evaluate_query(query.Query([1, 2, 3]), Z), Z @ [1, 2, 3])

    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
           st.floats(-3, 3))
    @settings(max_examples=100, deadline=None)
    def test_linear_in_weights(self, w1, w2, a):
        lhs = query.evaluate_query(query.Query(np.array(w1) + a * np.array(w2)), Z_08)
        rhs = query.evaluate_query(query.Query(w1), Z_08) + a * query.evaluate_query(query.Query(w2), Z_08)
        assert abs(lhs - rhs) <= 1e-12 * (1 + abs(lhs))

    def test_invalid_weights(self):
        with pytest.raises(ValidationError):
            query.Query([])
        with pytest.raises(ValidationError):
            query.Query([np.nan])


class TestSpecStrings:
    def test_step(self):
        q = query.parse_query_spec("step:ref=0.3", THIRDS)
        np.testing.assert_array_equal(q.weights, [0, 1, 1])

    def test_sigmoid(self):
        q = query.parse_query_spec("sigmoid:center=0.5,temp=0.1", THIRDS_BOUNDED)
        np.testing.assert_allclose(q.weights, query.sigmoid_query(THIRDS_BOUNDED, 0.5, 0.1).weights)

    def test_weights(self):
        np.testing.assert_array_equal(query.parse_query_spec("weights:1,0,2.5", THIRDS).weights, [1, 0, 2.5])

    @pytest.mark.parametrize("spec", ["step", "step:0.3", "step:center=1", "cubic:a=1", "weights:1,2",
                                      "sigmoid:center=a,temp=1"])
    def test_malformed(self, spec):
        with pytest.raises(QuerySpecError):
            query.parse_query_spec(spec, THIRDS_BOUNDED)

    def test_record(self):
        rec = query.step_query(THIRDS, 0.3).record()
        assert rec.startswith("query step(ref=0.3")
        assert "snap_distance=" in rec and rec.endswith("weights=0.0,1.0,1.0")
