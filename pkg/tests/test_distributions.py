import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lskd.distributions import (
    cross_entropy,
    entropy,
    fuse_sld,
    grad_kl_wrt_logits,
    is_probability_vector,
    kl_divergence,
    ls_target,
    onehot,
    softmax_t,
)


def mp_softmax(z, tau=1):
    """Arbitrary-precision reference softmax."""
    with mpmath.workdps(50):
        e = [mpmath.exp(mpmath.mpf(x) / tau) for x in z]
        s = sum(e)
        return [float(x / s) for x in e]


def central_diff(f, z, h=1e-5):
    g = np.zeros_like(z)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        g[i] = (f(zp) - f(zm)) / (2 * h)
    return g


logits = arrays(np.float64, st.integers(2, 12), elements=st.floats(-50, 50))
taus = st.floats(1e-3, 1e6)


def prob_vectors(n):
    return arrays(np.float64, n, elements=st.floats(0, 1)).filter(lambda v: v.sum() > 1e-3).map(lambda v: v / v.sum())


class TestSoftmax:
    def test_zeros_uniform(self):
        np.testing.assert_allclose(softmax_t([0, 0, 0], 1.0), [1 / 3] * 3, atol=1e-15)

    def test_infinite_temperature(self):
        np.testing.assert_allclose(softmax_t([1, 2, 3], 1e6), [1 / 3] * 3, atol=1e-6)

    def test_closed_form(self):
        expected = mp_softmax([1, 2, 3])
        np.testing.assert_allclose(expected, [0.09003, 0.24473, 0.66524], atol=1e-5)
        np.testing.assert_allclose(softmax_t([1, 2, 3], 1.0), expected, atol=1e-12)

    def test_overflow_safe(self):
        p = softmax_t([1000.0, 999.0, -1000.0], 0.01)
        assert is_probability_vector(p)
        assert p[0] == pytest.approx(1.0)

    @pytest.mark.parametrize("tau", [0.0, -1.0, float("nan"), float("inf")])
    def test_bad_tau(self, tau):
        with pytest.raises(ValueError):
            softmax_t([1.0, 2.0], tau)

    def test_non_finite_logits(self):
        with pytest.raises(ValueError):
            softmax_t([1.0, np.inf], 1.0)
        with pytest.raises(ValueError):
            softmax_t([np.nan, 0.0], 1.0)

    @given(logits, taus)
    def test_is_distribution(self, z, tau):
        assert is_probability_vector(softmax_t(z, tau))

    @given(logits, st.floats(0.05, 100), st.floats(-1e3, 1e3))
    def test_shift_invariance(self, z, tau, k):
        np.testing.assert_allclose(softmax_t(z + k, tau), softmax_t(z, tau), atol=1e-12)

    @given(logits, st.floats(1e-3, 1e3))
    def test_argmax_preserved(self, z, tau):
        p = softmax_t(z, tau)
        # ties in z or in rounded p make the strict comparison meaningless
        top = np.sort(z)[-2:]
        if top[1] - top[0] > 1e-6 * tau and np.sort(p)[-1] > np.sort(p)[-2]:
            assert np.argmax(p) == np.argmax(z)

    def test_batched_rows(self):
        z = np.array([[0.0, 1.0], [3.0, -1.0]])
        out = softmax_t(z, 2.0)
        for row, p in zip(z, out):
            np.testing.assert_allclose(p, mp_softmax(row, 2), atol=1e-14)


class TestCrossEntropy:
    def test_perfect(self):
        assert cross_entropy(0, [1.0, 0.0, 0.0]) <= 1e-11

    def test_ln2(self):
        assert cross_entropy(1, [0.25, 0.5, 0.25]) == pytest.approx(math.log(2), abs=1e-6)

    def test_ln3(self):
        assert cross_entropy(2, [1 / 3] * 3) == pytest.approx(math.log(3), abs=1e-6)

    def test_clamped_zero(self):
        assert cross_entropy(1, [1.0, 0.0]) == pytest.approx(-math.log(1e-12))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cross_entropy(3, [0.5, 0.5])


class TestKL:
    def test_identical(self):
        p = [0.2, 0.3, 0.5]
        assert abs(kl_divergence(p, p)) <= 1e-10

    def test_closed_form(self):
        with mpmath.workdps(30):
            ref = float(0.5 * mpmath.log(mpmath.mpf(5) / 9) + 0.5 * mpmath.log(5))
        assert ref == pytest.approx(0.51083, abs=1e-5)
        assert kl_divergence([0.5, 0.5], [0.9, 0.1]) == pytest.approx(ref, abs=1e-12)

    def test_onehot_equals_xe(self):
        q = np.array([0.1, 0.6, 0.3])
        assert kl_divergence(onehot(0, 3), q) == pytest.approx(cross_entropy(0, q), abs=1e-10)

    def test_zero_mass_convention(self):
        assert kl_divergence([0.0, 1.0], [0.5, 0.5]) == pytest.approx(math.log(2))

    def test_mismatch(self):
        with pytest.raises(ValueError):
            kl_divergence([0.5, 0.5], [1 / 3] * 3)

    @given(st.integers(2, 8).flatmap(lambda n: st.tuples(prob_vectors(n), prob_vectors(n))))
    def test_gibbs(self, pq):
        p, q = pq
        assert kl_divergence(p, q) >= -1e-9

    @given(st.integers(2, 8).flatmap(lambda n: st.tuples(prob_vectors(n), st.integers(0, n - 1))))
    def test_onehot_reduction(self, qc):
        q, c = qc
        assert kl_divergence(onehot(c, q.size), q) == cross_entropy(c, q)


class TestFusion:
    def test_uniform_teacher_51(self):
        target = float(mpmath.exp(4) / (mpmath.exp(4) + 50))
        sld = fuse_sld(onehot(7, 51), np.full(51, 1 / 51), 4.0, 1.0)
        assert sld[7] == pytest.approx(0.52198, abs=1e-5)
        assert sld[7] == pytest.approx(target, abs=1e-12)

    def test_three_class(self):
        expected = mp_softmax([4.2, 0.7, 0.1])
        np.testing.assert_allclose(expected, [0.955320, 0.028848, 0.015832], atol=1e-6)
        np.testing.assert_allclose(fuse_sld(onehot(0, 3), [0.2, 0.7, 0.1], 4.0, 1.0), expected, atol=1e-12)

    def test_large_alpha_is_onehot(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            t = rng.dirichlet(np.ones(9))
            np.testing.assert_allclose(fuse_sld(onehot(3, 9), t, 1e4, 1.0), onehot(3, 9), atol=1e-6)

    def test_teacher_added_as_probabilities(self):
        # the teacher vector enters the softmax as-is, not as log-probabilities
        t = np.array([0.1, 0.8, 0.1])
        got = fuse_sld(onehot(2, 3), t, 1.0, 1.0)
        np.testing.assert_allclose(got, mp_softmax([0.1, 0.8, 1.1]), atol=1e-14)

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            fuse_sld(onehot(0, 3), [1 / 3] * 3, -1.0, 1.0)

    @given(st.integers(2, 20), st.data())
    @settings(max_examples=200)
    def test_gt_is_strict_max(self, n, data):
        t = data.draw(prob_vectors(n))
        c = data.draw(st.integers(0, n - 1))
        alpha = data.draw(st.floats(1.01, 30))
        sld = fuse_sld(onehot(c, n), t, alpha, 1.0)
        others = np.delete(sld, c)
        assert sld[c] > others.max()

    @given(st.integers(2, 20), st.data())
    @settings(max_examples=200)
    def test_alpha_monotone(self, n, data):
        t = data.draw(prob_vectors(n))
        c = data.draw(st.integers(0, n - 1))
        tau = data.draw(st.floats(0.5, 10))
        a1 = data.draw(st.floats(0, 10))
        a2 = a1 + data.draw(st.floats(0.01, 5))
        y = onehot(c, n)
        assert fuse_sld(y, t, a2, tau)[c] > fuse_sld(y, t, a1, tau)[c]

    @given(st.integers(2, 20), st.data())
    @settings(max_examples=200)
    def test_tau_smooths(self, n, data):
        t = data.draw(prob_vectors(n))
        c = data.draw(st.integers(0, n - 1))
        alpha = data.draw(st.floats(0, 10))
        t1 = data.draw(st.floats(0.05, 20))
        t2 = t1 + data.draw(st.floats(0.0, 20))
        y = onehot(c, n)
        assert entropy(fuse_sld(y, t, alpha, t2)) >= entropy(fuse_sld(y, t, alpha, t1)) - 1e-12


class TestLabelSmoothing:
    def test_matches_fusion_with_uniform(self):
        np.testing.assert_array_equal(ls_target(7, 4.0, 1.0, 51), fuse_sld(onehot(7, 51), np.full(51, 1 / 51), 4.0, 1.0))

    def test_alpha_zero_uniform(self):
        np.testing.assert_allclose(ls_target(2, 0.0, 1.0, 5), np.full(5, 0.2), atol=1e-15)

    def test_three_class(self):
        # closed form: off-target 1 / (2 + e^4), target e^4 / (2 + e^4)
        with mpmath.workdps(30):
            off = float(1 / (2 + mpmath.exp(4)))
            on = float(mpmath.exp(4) / (2 + mpmath.exp(4)))
        assert off == pytest.approx(0.0176684, abs=1e-7)
        np.testing.assert_allclose(ls_target(1, 4.0, 1.0, 3), [off, on, off], atol=1e-12)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            ls_target(0, 4.0, 1.0, 1)


class TestGradient:
    def test_zero_at_minimum(self):
        z = np.array([0.3, -1.2, 2.0, 0.0])
        y = softmax_t(z, 0.7)
        assert np.abs(grad_kl_wrt_logits(y, z, 0.7)).max() <= 1e-9

    def test_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = int(rng.integers(2, 10))
            z = rng.normal(0, 2, n)
            tau = float(rng.uniform(0.3, 5))
            y = rng.dirichlet(np.ones(n))
            g = grad_kl_wrt_logits(y, z, tau)
            fd = central_diff(lambda v: kl_divergence(y, softmax_t(v, tau)), z)
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-9)

    @given(st.integers(2, 10).flatmap(lambda n: st.tuples(prob_vectors(n), arrays(np.float64, n, elements=st.floats(-20, 20)))),
           st.floats(0.01, 100))
    def test_sums_to_zero(self, yz, tau):
        y, z = yz
        assert abs(grad_kl_wrt_logits(y, z, tau).sum()) <= 1e-10 * max(1.0, 1 / tau)


class TestEntropy:
    def test_onehot(self):
        assert entropy(onehot(2, 5)) == 0.0

    @pytest.mark.parametrize("n", [2, 3, 51])
    def test_uniform(self, n):
        assert entropy(np.full(n, 1 / n)) == pytest.approx(math.log(n), abs=1e-12)

    def test_half(self):
        assert entropy([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-10)
