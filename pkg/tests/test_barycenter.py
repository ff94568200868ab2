import math

import numpy as np
import pytest

from wdl.barycenter import (
    barycenter,
    barycenter_forward,
    barycenter_generalized,
    barycenter_heavyball,
    barycenter_log_domain,
    barycenter_unbalanced,
    fixed_point_residual,
    log_separable_kernel,
)
from wdl.core import (
    CostSpec,
    Grid,
    InstabilityError,
    ParameterError,
    ValidationError,
    build_kernel,
    make_histogram,
)
from wdl.datasets import gaussian_bump, middle_mass


def dirac_pair(n=41, at=(10, 30), jitter=1e-9):
    d = np.zeros((2, n))
    d[0, at[0]] = 1.0
    d[1, at[1]] = 1.0
    return make_histogram(d, jitter=jitter)


def random_atoms(rng, s, n):
    a = rng.uniform(0.05, 1.0, (s, n))
    return a / a.sum(-1, keepdims=True)


def corner_atoms(side=8):
    """Two zero-background patches in opposite corners of a square grid."""
    d = np.zeros((2, side, side))
    d[0, :2, :2] = 1.0
    d[1, -2:, -2:] = 1.0
    return make_histogram(d.reshape(2, -1))


class TestPlainForward:
    def test_one_hot_weights(self):
        rng = np.random.default_rng(0)
        k = build_kernel(CostSpec(Grid((12,))), 1.0)
        atoms = random_atoms(rng, 3, 12)
        for s in range(3):
            lam = np.eye(3)[s]
            tr = barycenter_forward(atoms, lam, k, 6)
            expected = k.apply(atoms[s] / k.apply(np.ones(12)), transpose=True)
            np.testing.assert_allclose(tr.P, expected, rtol=1e-12)
            np.testing.assert_allclose(tr.b[:, s], 1.0, rtol=1e-12)

    def test_permutation(self):
        rng = np.random.default_rng(1)
        k = build_kernel(CostSpec(Grid((10,))), 1.0)
        atoms = random_atoms(rng, 2, 10)
        p1 = barycenter_forward(atoms, np.array([0.3, 0.7]), k, 20).P
        p2 = barycenter_forward(atoms[::-1], np.array([0.7, 0.3]), k, 20).P
        np.testing.assert_array_equal(p1, p2)

    def test_dirac_midpoint(self):
        k = build_kernel(CostSpec(Grid((41,))), 0.5)
        P = barycenter_forward(dirac_pair(), np.array([0.5, 0.5]), k, 200).P
        assert int(np.argmax(P)) == 20

    def test_dirac_three_quarters(self):
        k = build_kernel(CostSpec(Grid((41,))), 0.5)
        P = barycenter_forward(dirac_pair(), np.array([0.75, 0.25]), k, 200).P
        assert abs(int(np.argmax(P)) - 15) <= 1

    def test_trace_shapes_linear_in_L(self):
        rng = np.random.default_rng(2)
        k = build_kernel(CostSpec(Grid((6,))), 1.0)
        atoms = random_atoms(rng, 2, 6)
        for L in (3, 6):
            tr = barycenter_forward(atoms, np.array([0.4, 0.6]), k, L)
            assert tr.phi.shape == (L, 2, 6)
            assert tr.b.shape == (L + 1, 2, 6)

    def test_batched_weights(self):
        rng = np.random.default_rng(3)
        k = build_kernel(CostSpec(Grid((7,))), 1.0)
        atoms = random_atoms(rng, 2, 7)
        lams = np.array([[0.2, 0.8], [0.9, 0.1]])
        batch = barycenter_forward(atoms, lams, k, 15).P
        for i in range(2):
            np.testing.assert_allclose(batch[i], barycenter_forward(atoms, lams[i], k, 15).P,
                                       rtol=1e-14)

    def test_mass_near_one_when_converged(self):
        rng = np.random.default_rng(4)
        for gamma in (1.0, 2.0):
            k = build_kernel(CostSpec(Grid((16,))), gamma)
            P = barycenter_forward(random_atoms(rng, 3, 16), rng.dirichlet(np.ones(3)), k, 500).P
            assert 1 - 1e-3 <= P.sum() <= 1 + 1e-3

    def test_fixed_point_at_convergence(self):
        rng = np.random.default_rng(5)
        k = build_kernel(CostSpec(Grid((10,))), 1.0)
        tr = barycenter_forward(random_atoms(rng, 2, 10), np.array([0.5, 0.5]), k, 2000)
        assert tr.residuals[-1] <= 1e-10
        assert fixed_point_residual(tr.b[-1], tr.b[-2]) <= 1e-10

    def test_translation_equivariance(self):
        n, shift = 50, 7
        k = build_kernel(CostSpec(Grid((n,))), 1.0)
        t = np.arange(n)
        base = np.stack([np.exp(-0.5 * ((t - 10) / 2) ** 2), np.exp(-0.5 * ((t - 22) / 2) ** 2)])
        moved = np.stack([np.roll(row, shift) for row in base])
        lam = np.array([0.35, 0.65])
        p0 = barycenter_forward(make_histogram(base, 1e-9), lam, k, 300).P
        p1 = barycenter_forward(make_histogram(moved, 1e-9), lam, k, 300).P
        assert int(np.argmax(p1)) - int(np.argmax(p0)) == shift

    def test_validation(self):
        k = build_kernel(CostSpec(Grid((4,))), 1.0)
        with pytest.raises(ValidationError):
            barycenter_forward(np.ones((2, 5)) / 5, np.array([0.5, 0.5]), k, 3)
        with pytest.raises(ValidationError):
            barycenter_forward(np.ones((2, 4)) / 4, np.array([1.0]), k, 3)
        with pytest.raises(ParameterError):
            barycenter_forward(np.ones((2, 4)) / 4, np.array([0.5, 0.5]), k, 0)

    def test_instability(self):
        k = build_kernel(CostSpec(Grid((8, 8))), 0.05)
        with pytest.raises(InstabilityError, match="log-domain"):
            barycenter_forward(corner_atoms(), np.array([0.5, 0.5]), k, 50)


class TestHeavyball:
    def test_tau_zero_is_bit_identical(self):
        rng = np.random.default_rng(6)
        k = build_kernel(CostSpec(Grid((9,))), 0.7)
        atoms = random_atoms(rng, 3, 9)
        lam = rng.dirichlet(np.ones(3))
        plain = barycenter_forward(atoms, lam, k, 25)
        hb = barycenter_heavyball(atoms, lam, k, 25, tau=0.0)
        np.testing.assert_array_equal(plain.P, hb.P)
        np.testing.assert_array_equal(plain.b, hb.b)

    def test_positive_tau_rejected(self):
        k = build_kernel(CostSpec(Grid((4,))), 1.0)
        with pytest.raises(ParameterError):
            barycenter_heavyball(np.ones((2, 4)) / 4, np.array([0.5, 0.5]), k, 3, tau=0.1)

    def test_same_fixed_point_as_plain(self):
        k = build_kernel(CostSpec(Grid((41,))), 0.5)
        lam = np.array([0.75, 0.25])
        plain = barycenter_forward(dirac_pair(), lam, k, 1000).P
        hb = barycenter_heavyball(dirac_pair(), lam, k, 1000, tau=-0.1).P
        np.testing.assert_allclose(hb, plain, atol=1e-8)

    def test_faster_after_50_iterations(self):
        k = build_kernel(CostSpec(Grid((41,))), 0.5)
        lam = np.array([0.75, 0.25])
        r0 = barycenter_heavyball(dirac_pair(), lam, k, 50, tau=0.0).residuals[-1]
        r1 = barycenter_heavyball(dirac_pair(), lam, k, 50, tau=-0.1).residuals[-1]
        assert r1 <= r0


class TestUnbalanced:
    def test_large_rho_recovers_balanced(self):
        rng = np.random.default_rng(7)
        k = build_kernel(CostSpec(Grid((16,))), 1.0)
        for _ in range(3):
            atoms = random_atoms(rng, 2, 16)
            lam = rng.dirichlet(np.ones(2))
            bal = barycenter_forward(atoms, lam, k, 300).P
            unb = barycenter_unbalanced(atoms, lam, k, 300, rho=1e6).P
            assert np.abs(unb - bal).sum() < 1e-4

    def test_single_atom_positive_mass(self):
        rng = np.random.default_rng(8)
        k = build_kernel(CostSpec(Grid((10,))), 1.0)
        P = barycenter_unbalanced(random_atoms(rng, 1, 10), np.array([1.0]), k, 200, rho=2.0).P
        assert np.all(P > 0) and np.isfinite(P.sum()) and P.sum() > 0

    def test_infinite_rho_rejected(self):
        k = build_kernel(CostSpec(Grid((4,))), 1.0)
        with pytest.raises(ParameterError):
            barycenter_unbalanced(np.ones((2, 4)) / 4, np.array([0.5, 0.5]), k, 3, rho=math.inf)

    def test_bumps_in_disjoint_thirds(self):
        # one bump centred in each outer third of a 60-bin grid
        d = np.stack([gaussian_bump(60, 10, 2.0, (0, 20)), gaussian_bump(60, 50, 2.0, (40, 60))])
        atoms = make_histogram(d, jitter=1e-9)
        k = build_kernel(CostSpec(Grid((60,))), 7.0)
        for lam in ([0.5, 0.5], [0.3, 0.7]):
            lam = np.array(lam)
            unb = barycenter_unbalanced(atoms, lam, k, 100, rho=20.0).P
            bal = barycenter_forward(atoms, lam, k, 100).P
            assert middle_mass(unb) < 0.01
            assert middle_mass(bal) >= 0.01


class TestLogDomain:
    def test_matches_plain(self):
        rng = np.random.default_rng(9)
        k = build_kernel(CostSpec(Grid((8, 8))), 2.0)
        atoms = random_atoms(rng, 2, 64)
        lam = np.array([0.3, 0.7])
        plain = barycenter_forward(atoms, lam, k, 30)
        logd = barycenter_log_domain(atoms, lam, k, 30)
        assert np.max(np.abs(np.exp(logd.logP) - plain.P)) < 1e-8
        np.testing.assert_allclose(logd.b, np.log(plain.b), atol=1e-9)

    def test_small_gamma_finite_where_plain_fails(self):
        k = build_kernel(CostSpec(Grid((8, 8))), 0.05)
        atoms = corner_atoms()
        lam = np.array([0.5, 0.5])
        tr = barycenter_log_domain(atoms, lam, k, 50)
        assert np.all(np.isfinite(tr.logP))
        with pytest.raises(InstabilityError):
            barycenter_forward(atoms, lam, k, 50)

    def test_one_hot_identity(self):
        rng = np.random.default_rng(10)
        k = build_kernel(CostSpec(Grid((4, 5))), 0.5)
        atoms = random_atoms(rng, 2, 20)
        tr = barycenter_log_domain(atoms, np.array([0.0, 1.0]), k, 4)
        expected = k.log_apply(np.log(atoms[1]) - k.log_apply(np.zeros(20)), transpose=True)
        np.testing.assert_allclose(tr.logP, expected, rtol=1e-13)

    def test_dense_cost_warns(self):
        n = 5
        c = np.abs(np.subtract.outer(np.arange(n), np.arange(n))).astype(float)
        k = build_kernel(CostSpec(Grid((n,)), kind="explicit", matrix=c), 1.0)
        atoms = np.ones((2, n)) / n
        with pytest.warns(RuntimeWarning, match="dense"):
            tr = barycenter_log_domain(atoms, np.array([0.5, 0.5]), k, 5)
        np.testing.assert_allclose(tr.P, barycenter_forward(atoms, np.array([0.5, 0.5]), k, 5).P,
                                   rtol=1e-12)


class TestLogSeparableKernel:
    @pytest.mark.parametrize("side", [4, 8])
    def test_matches_dense(self, side):
        rng = np.random.default_rng(side)
        k = build_kernel(CostSpec(Grid((side, side))), 1.0)
        axis_costs = CostSpec(Grid((side, side))).axis_costs()
        dense = k.matrix()
        for _ in range(20):
            b = rng.uniform(0.01, 1.0, (side, side))
            got = np.exp(log_separable_kernel(axis_costs, 1.0, np.log(b)))
            ref = (dense @ b.ravel()).reshape(side, side)
            assert np.max(np.abs(got - ref) / ref) < 1e-12

    def test_dirac_gives_kernel_column(self):
        k = build_kernel(CostSpec(Grid((4, 4))), 1.0)
        v = np.full((4, 4), -np.inf)
        v[1, 2] = 0.0
        out = log_separable_kernel(CostSpec(Grid((4, 4))).axis_costs(), 1.0, v)
        np.testing.assert_allclose(out.ravel(), k.log_matrix()[:, 1 * 4 + 2], rtol=1e-14)

    def test_huge_dynamic_range(self):
        side, gamma = 6, 0.01
        rng = np.random.default_rng(11)
        # entries of b spread over 300 decades, the largest beyond float range
        logb = rng.uniform(60.0, 750.0, (side, side))
        logb[0, 0], logb[-1, -1] = 60.0, 750.0
        out = log_separable_kernel(CostSpec(Grid((side, side))).axis_costs(), gamma, logb)
        assert np.all(np.isfinite(out))
        k = build_kernel(CostSpec(Grid((side, side))), gamma)
        with np.errstate(over="ignore", invalid="ignore"):
            dense = np.log(k.matrix() @ np.exp(logb).ravel())
        assert not np.all(np.isfinite(dense))


def test_dispatch():
    rng = np.random.default_rng(12)
    k = build_kernel(CostSpec(Grid((6,))), 1.0)
    atoms = random_atoms(rng, 2, 6)
    lam = np.array([0.5, 0.5])
    plain = barycenter(atoms, lam, k, 20)
    np.testing.assert_allclose(barycenter(atoms, lam, k, 20, log_domain=True), plain, rtol=1e-12)
    np.testing.assert_array_equal(
        barycenter(atoms, lam, k, 20, tau=-0.2),
        barycenter_generalized(atoms, lam, k, 20, tau=-0.2).P,
    )
    with pytest.raises(ParameterError):
        barycenter(atoms, lam, k, 20, tau=-0.1, log_domain=True)
