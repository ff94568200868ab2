import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wdl.core import (
    CostSpec,
    Grid,
    InstabilityError,
    ParameterError,
    ValidationError,
    apply_kernel,
    build_cost,
    build_kernel,
    is_simplex,
    make_histogram,
    softmax,
    softmax_vjp,
)
from wdl.oracle import FDSpec, fd_gradient

finite_logits = arrays(np.float64, st.integers(2, 12),
                       elements=st.floats(-30, 30, allow_nan=False))


class TestGrid:
    def test_size_and_coordinates(self):
        g = Grid((2, 3), spacing=(1.0, 0.5))
        assert g.size == 6
        assert g.ndim == 2
        coords = g.coordinates()
        np.testing.assert_allclose(coords[-1], [1.0, 1.0])

    def test_rejects_empty_axis(self):
        with pytest.raises(ValidationError):
            Grid((0,))


class TestBuildCost:
    def test_1d_three_bins(self):
        c = build_cost(CostSpec(Grid((3,))))
        np.testing.assert_array_equal(c, [[0, 1, 4], [1, 0, 1], [4, 1, 0]])

    def test_single_bin(self):
        np.testing.assert_array_equal(build_cost(CostSpec(Grid((1,)))), [[0.0]])

    def test_2d_diagonal(self):
        c = build_cost(CostSpec(Grid((2, 2))))
        # bin (0, 0) is index 0, bin (1, 1) is index 3
        assert c[0, 3] == 2.0

    def test_symmetric_nonnegative(self):
        c = build_cost(CostSpec(Grid((3, 4), spacing=(0.5, 2.0))))
        np.testing.assert_array_equal(c, c.T)
        assert np.all(c >= 0)
        np.testing.assert_array_equal(np.diag(c), 0)

    def test_explicit_validation(self):
        g = Grid((2,))
        with pytest.raises(ValidationError):
            CostSpec(g, kind="explicit", matrix=np.array([[0.0, -1.0], [1.0, 0.0]]))
        with pytest.raises(ValidationError):
            CostSpec(g, kind="explicit", matrix=np.zeros((3, 3)))
        with pytest.raises(ValidationError):
            CostSpec(g, kind="explicit", matrix=np.ones((2, 2)))


class TestBuildKernel:
    def test_explicit_two_bins(self):
        cost = CostSpec(Grid((2,)), kind="explicit", matrix=np.array([[0.0, 1.0], [1.0, 0.0]]))
        k = build_kernel(cost, 1.0)
        assert not k.separable
        e = math.exp(-1)
        np.testing.assert_allclose(k.matrix(), [[1, e], [e, 1]], rtol=1e-15)

    def test_separable_factors_8x8(self):
        k = build_kernel(CostSpec(Grid((8, 8))), 2.0)
        assert k.separable
        i = np.arange(8)
        expected = np.exp(-((i[:, None] - i[None, :]) ** 2) / 2.0)
        for f in k.factors:
            np.testing.assert_allclose(f, expected, rtol=1e-15)

    @pytest.mark.parametrize("gamma", [0.0, -1.0, math.inf])
    def test_bad_gamma(self, gamma):
        with pytest.raises(ParameterError):
            build_kernel(CostSpec(Grid((3,))), gamma)

    def test_positive_entries(self):
        k = build_kernel(CostSpec(Grid((5, 4))), 3.0)
        assert np.all(k.matrix() > 0)

    def test_separable_matches_dense_random(self):
        rng = np.random.default_rng(0)
        k = build_kernel(CostSpec(Grid((8, 8))), 2.0)
        dense = k.matrix()
        worst = 0.0
        for _ in range(100):
            b = rng.uniform(0.01, 1.0, 64)
            for transpose in (False, True):
                ref = (dense.T if transpose else dense) @ b
                got = k.apply(b, transpose=transpose)
                worst = max(worst, np.max(np.abs(got - ref) / np.abs(ref)))
        assert worst < 1e-12

    def test_log_apply_matches_log_of_apply(self):
        rng = np.random.default_rng(1)
        k = build_kernel(CostSpec(Grid((4, 6))), 0.7)
        v = rng.uniform(0.1, 2.0, (3, 24))
        np.testing.assert_allclose(k.log_apply(np.log(v)), np.log(k.apply(v)), rtol=1e-13)
        s = np.sign(rng.standard_normal(v.shape))
        val, sg = k.log_apply(np.log(v), s, transpose=True)
        np.testing.assert_allclose(sg * np.exp(val), k.apply(s * v, transpose=True),
                                   rtol=1e-10, atol=1e-14)

    def test_log_apply_survives_underflowing_kernel(self):
        k = build_kernel(CostSpec(Grid((30,))), 0.01)
        v = np.full(30, -np.inf)
        v[0] = 0.0
        out = k.log_apply(v)
        # log of kernel column 0: -(i - 0)^2 / gamma, far below exp's range
        np.testing.assert_allclose(out, -np.arange(30.0) ** 2 / 0.01, rtol=1e-14)


class TestApplyKernel:
    def test_zero_cost_gives_ones(self):
        n = 5
        cost = CostSpec(Grid((n,)), kind="explicit", matrix=np.zeros((n, n)))
        k = build_kernel(cost, 1.0)
        p = make_histogram(np.arange(1.0, n + 1))
        np.testing.assert_allclose(apply_kernel(k, p), np.ones(n), rtol=1e-15)

    def test_huge_gamma_is_nearly_all_ones(self):
        k = build_kernel(CostSpec(Grid((6,))), 1e9)
        v = make_histogram(np.arange(1.0, 7.0))
        assert np.max(np.abs(k.matrix() @ v - v.sum())) < 1e-6

    def test_separable_2d_matches_dense(self):
        rng = np.random.default_rng(2)
        k = build_kernel(CostSpec(Grid((3, 5))), 1.5)
        v = rng.uniform(size=15)
        ref = k.matrix() @ v
        np.testing.assert_allclose(apply_kernel(k, v), ref, rtol=1e-12)

    def test_errors(self):
        k = build_kernel(CostSpec(Grid((3,))), 1.0)
        with pytest.raises(ValidationError):
            apply_kernel(k, np.ones(4))
        with pytest.raises(ValidationError):
            apply_kernel(k, np.array([1.0, -1.0, 1.0]))
        with pytest.raises(ValidationError):
            apply_kernel(k, np.zeros(3))


class TestHistogram:
    def test_normalizes(self):
        np.testing.assert_allclose(make_histogram([1, 1, 2]), [0.25, 0.25, 0.5])

    def test_jitter(self):
        h = make_histogram([0.0, 1.0], jitter=1e-9)
        assert np.all(h > 0)
        assert is_simplex(h)

    @pytest.mark.parametrize("bad", [[0.0, 0.0], [1.0, -0.5], [np.nan, 1.0], []])
    def test_rejects(self, bad):
        with pytest.raises(ValidationError):
            make_histogram(bad)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(0.001, 1e6)))
    def test_simplex_closure(self, v):
        h = make_histogram(v, jitter=1e-9)
        assert np.all(h >= 0)
        assert abs(h.sum() - 1) <= 1e-10


class TestSoftmax:
    @pytest.mark.parametrize("u, expected", [
        ((0.0, 0.0), (0.5, 0.5)),
        ((0.0, 0.0, 0.0), (1 / 3, 1 / 3, 1 / 3)),
        ((0.0, math.log(3.0)), (0.25, 0.75)),
    ])
    def test_examples(self, u, expected):
        np.testing.assert_allclose(softmax(np.array(u)), expected, rtol=1e-15)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValidationError):
            softmax(np.array([0.0, np.inf]))

    @settings(max_examples=50, deadline=None)
    @given(finite_logits, st.floats(-50, 50))
    def test_simplex_and_shift_invariance(self, u, c):
        f = softmax(u)
        assert np.all(f > 0)
        assert abs(f.sum() - 1) <= 1e-12
        np.testing.assert_allclose(softmax(u + c), f, rtol=1e-9, atol=1e-300)

    def test_vjp_example(self):
        np.testing.assert_allclose(softmax_vjp(np.zeros(2), np.array([1.0, 0.0])),
                                   [0.25, -0.25], rtol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(finite_logits, st.floats(-10, 10))
    def test_vjp_annihilates_constants(self, u, c):
        np.testing.assert_allclose(softmax_vjp(u, np.full(u.shape, c)), 0.0, atol=1e-12)

    def test_vjp_matches_fd(self):
        rng = np.random.default_rng(3)
        u = rng.standard_normal(6)
        cot = rng.standard_normal(6)
        fd = fd_gradient(lambda x: float(softmax(x) @ cot), u, FDSpec(step=1e-6))
        np.testing.assert_allclose(softmax_vjp(u, cot), fd, atol=1e-7)

    def test_vjp_shape_mismatch(self):
        with pytest.raises(ValidationError):
            softmax_vjp(np.zeros(3), np.zeros(2))


def test_instability_error_message():
    err = InstabilityError("barycenter", 7, indices=(2, 5))
    text = str(err)
    assert "iteration 7" in text and "[2, 5]" in text and "log-domain" in text
    assert isinstance(err, FloatingPointError)
