import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from nasb.nasgate import EdgeArch, edge_rng, gate_grad_to_alpha, path_weights, sample_gates


def dense_softmax_jacobian(p):
    """J[j, i] = dp_j / dalpha_i built entry by entry."""
    m = len(p)
    jac = np.empty((m, m))
    for j in range(m):
        for i in range(m):
            jac[j, i] = p[j] * ((1.0 if i == j else 0.0) - p[i])
    return jac


class TestPathWeights:
    def test_symmetric(self):
        np.testing.assert_array_equal(path_weights([0, 0]), [0.5, 0.5])

    def test_no_overflow(self):
        p = path_weights([1000.0, 0.0])
        assert np.all(np.isfinite(p)) and p[0] == 1.0 and p[1] < 1e-300

    def test_values(self):
        e = np.exp([1.0, 2.0, 3.0])
        np.testing.assert_allclose(path_weights([1, 2, 3]), e / e.sum(), rtol=1e-14)
        np.testing.assert_allclose(path_weights([1, 2, 3]), [0.0900, 0.2447, 0.6652], atol=5e-5)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=10), st.floats(-100, 100))
    def test_normalized_and_shift_invariant(self, alpha, c):
        p = path_weights(alpha)
        assert abs(p.sum() - 1) < 1e-12
        np.testing.assert_allclose(path_weights(np.array(alpha) + c), p, atol=1e-12)


class TestSampling:
    def test_degenerate(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            np.testing.assert_array_equal(sample_gates([1.0, 0.0, 0.0], rng).g, [1, 0, 0])
            np.testing.assert_array_equal(sample_gates([0.0, 0.0, 1.0], rng).g, [0, 0, 1])

    def test_fair_coin(self):
        rng = np.random.default_rng(7)
        hits = sum(sample_gates([0.5, 0.5], rng).index == 0 for _ in range(10_000))
        assert abs(hits / 10_000 - 0.5) <= 0.015

    def test_deterministic(self):
        r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
        s1 = [sample_gates([0.2, 0.3, 0.5], r1).index for _ in range(100)]
        s2 = [sample_gates([0.2, 0.3, 0.5], r2).index for _ in range(100)]
        assert s1 == s2

    def test_one_hot(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            g = sample_gates(path_weights(rng.standard_normal(10)), rng).g
            assert g.sum() == 1 and set(np.unique(g)) <= {0.0, 1.0}

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError):
            sample_gates([0.5, 0.6], np.random.default_rng(0))

    def test_chi_square(self):
        p = path_weights([0.3, -1.0, 1.2, 0.0, 0.5])
        rng = np.random.default_rng(2024)
        counts = np.bincount([sample_gates(p, rng).index for _ in range(100_000)], minlength=5)
        assert stats.chisquare(counts, 100_000 * p).pvalue > 0.01

    def test_edge_streams_independent_of_order(self):
        a = EdgeArch(np.zeros(4), edge_rng(9, 0, 1))
        b = EdgeArch(np.zeros(4), edge_rng(9, 0, 2))
        first = [a.sample().index for _ in range(20)]
        a2 = EdgeArch(np.zeros(4), edge_rng(9, 0, 1))
        [b.sample() for _ in range(7)]
        assert [a2.sample().index for _ in range(20)] == first

    def test_edge_arch_validation(self):
        with pytest.raises(ValueError):
            EdgeArch(np.array([]), edge_rng(0))
        with pytest.raises(ValueError):
            EdgeArch(np.array([np.inf]), edge_rng(0))


class TestAlphaGradient:
    def test_half_half(self):
        np.testing.assert_allclose(gate_grad_to_alpha([1, 0], [0.5, 0.5]), [0.25, -0.25])

    def test_saturated(self):
        np.testing.assert_array_equal(gate_grad_to_alpha([3.0, -2.0], [1.0, 0.0]), [0, 0])

    def test_dense_jacobian_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            m = int(rng.integers(1, 11))
            p = path_weights(rng.standard_normal(m) * 2)
            gg = rng.standard_normal(m)
            np.testing.assert_allclose(gate_grad_to_alpha(gg, p), dense_softmax_jacobian(p).T @ gg, rtol=0, atol=1e-12)

    @settings(max_examples=200)
    @given(st.integers(1, 10), st.integers(0, 2**31))
    def test_sums_to_zero(self, m, seed):
        rng = np.random.default_rng(seed)
        p = path_weights(rng.standard_normal(m) * 3)
        assert abs(gate_grad_to_alpha(rng.standard_normal(m), p).sum()) < 1e-12

    def test_single_sample_vs_sampled_index(self):
        """The estimate depends on (grad_g, p) only, not on which gate fired."""
        p = path_weights([0.1, 0.7, -0.3])
        gg = np.array([0.0, -1.3, 0.0])
        assert np.array_equal(gate_grad_to_alpha(gg, p), gate_grad_to_alpha(gg.copy(), p.copy()))

    def test_shift_invariance(self):
        alpha = np.array([0.4, -1.0, 2.0])
        gg = np.array([0.5, 0.0, 0.0])
        np.testing.assert_allclose(
            gate_grad_to_alpha(gg, path_weights(alpha)), gate_grad_to_alpha(gg, path_weights(alpha + 17.0)), atol=1e-12
        )
