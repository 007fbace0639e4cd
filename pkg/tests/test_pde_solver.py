import math

import numpy as np
import pytest

from floquet_growth.model_core import Constant, DensityField, DivisionKernel, Grid, One, SquareWave
from floquet_growth.pde_solver import (DegenerateError, NonConvergedError, adjoint_floquet, evolve,
                                       floquet_eigen, monodromy, step)

from oracles import MU_CONSTANT_K1_A1, dense_transport_solution


def square_kernel(kappa=10.0, tau=0.6, a=0.22):
    return DivisionKernel(kappa, SquareWave(tau), One(), a)


@pytest.fixture
def grid():
    return Grid.from_period(1, 100, x_max=3.0)


def test_zero_rate_is_pure_shift(grid):
    k = DivisionKernel(0.0, Constant(1.0), One(), 0.5)
    rng = np.random.default_rng(0)
    v = rng.random(grid.n_ages)
    out = step(DensityField(v, grid.dx), k, grid)
    assert out.values[0] == 0.0
    np.testing.assert_array_equal(out.values[1:], v[:-1])
    assert out.lost_mass == pytest.approx(grid.dx * v[-1])
    assert out.time == pytest.approx(grid.dx)


def test_linearity(grid):
    k = square_kernel()
    rng = np.random.default_rng(1)
    u, v = rng.random(grid.n_ages), rng.random(grid.n_ages)
    f = lambda w: evolve(DensityField(w, grid.dx), k, grid, 37)[0].values  # noqa: E731
    np.testing.assert_allclose(f(2.0 * u + 3.0 * v), 2.0 * f(u) + 3.0 * f(v), rtol=1e-12)


def test_positivity_for_stiff_rates(grid):
    k = square_kernel(kappa=1e6)
    n = DensityField.indicator(grid, 0.1, 0.5)
    out, masses = evolve(n, k, grid, 250)
    assert np.all(out.values >= 0)
    assert np.all(masses > 0)


def test_mass_gain_equals_divided_mass(grid):
    """Apart from truncation loss, mass changes only through divisions."""
    k = square_kernel()
    n = DensityField.indicator(grid, 0.0, 0.5)
    cur = n
    for _ in range(60):
        nxt = step(cur, k, grid)
        absorbed = nxt.values[0] / 2 * grid.dx
        gained = nxt.mass + nxt.lost_mass - getattr(cur, "lost_mass", 0.0) - cur.mass
        assert gained == pytest.approx(absorbed, rel=1e-12, abs=1e-15)
        cur = nxt


def test_matches_loop_reference():
    g = Grid.from_period(1, 200, x_max=2.5)
    k = square_kernel(kappa=7.0, tau=0.6, a=0.22)
    n0 = DensityField.indicator(g, 0.05, 0.6)
    out, masses = evolve(n0, k, g, 500)
    ref, ref_m = dense_transport_solution(n0.values, 7.0, 0.6, 0.22, g.dx, 500, 2.5)
    np.testing.assert_allclose(out.values, ref, rtol=1e-11, atol=1e-14)
    np.testing.assert_allclose(masses, ref_m, rtol=1e-11)


def test_monodromy_rejects_zero(grid):
    with pytest.raises(ValueError):
        monodromy(DensityField(np.zeros(grid.n_ages), grid.dx), square_kernel(), grid)


def test_off_grid_time_rejected(grid):
    with pytest.raises(ValueError):
        step(DensityField(np.ones(grid.n_ages), grid.dx), square_kernel(), grid, t=0.0123)


def test_density_grid_mismatch(grid):
    with pytest.raises(ValueError):
        step(DensityField(np.ones(5), grid.dx), square_kernel(), grid)


class TestFloquet:
    def test_constant_rate_first_order(self):
        k = DivisionKernel(1.0, Constant(1.0), One(), 1.0)
        errs = []
        for steps in (100, 200, 400):
            g = Grid.from_period(1, steps, x_max=40.0)
            errs.append(abs(floquet_eigen(k, g, store_profile=False).lam - MU_CONSTANT_K1_A1))
        assert errs[0] < 5e-3
        for e0, e1 in zip(errs, errs[1:]):
            assert 1.8 < e0 / e1 < 2.2

    def test_lambda_nondecreasing_in_kappa(self):
        g = Grid.from_period(1, 100, x_max=4.0)
        lams = [floquet_eigen(square_kernel(kappa=kp), g, store_profile=False).lam for kp in (1, 5, 20, 80)]
        assert all(b >= a - 1e-12 for a, b in zip(lams, lams[1:]))

    def test_eigenprofile_periodic_and_positive(self):
        g = Grid.from_period(1, 100, x_max=3.0)
        k = square_kernel()
        r = floquet_eigen(k, g)
        assert r.eigenprofile.shape == (100, g.n_ages)
        assert np.all(r.eigenprofile >= 0)
        # one more period from the last stored slice lands on the first, scaled by exp(lam dx)
        nxt = step(r.profile_at(99), k, g, t=99 * g.dx)
        np.testing.assert_allclose(nxt.values * math.exp(-r.lam * g.dx), r.eigenprofile[0], rtol=1e-7, atol=1e-10)
        assert r.lam_history[-1] == pytest.approx(r.lam)

    def test_adjoint_matches_direct(self):
        g = Grid.from_period(1, 100, x_max=3.0)
        ad = adjoint_floquet(square_kernel(), g)
        assert ad.lambda_check == pytest.approx(ad.direct.lam, abs=1e-9)
        d = ad.duality()
        np.testing.assert_allclose(d, 1.0, atol=1e-6)
        assert np.all(ad.phi >= 0)

    def test_adjoint_is_constant_for_age_independent_rate(self):
        # K = c for all ages: phi(x) is age independent
        g = Grid.from_period(1, 50, x_max=30.0)
        k = DivisionKernel(2.0, Constant(1.0), One(), 0.0)
        ad = adjoint_floquet(k, g)
        phi = ad.phi[0][: g.n_ages // 2]
        assert np.ptp(phi) < 1e-6 * phi.mean()

    def test_nonconverged_carries_estimate(self):
        g = Grid.from_period(1, 100, x_max=3.0)
        with pytest.raises(NonConvergedError) as e:
            floquet_eigen(square_kernel(), g, tol=1e-15, max_iter=3)
        assert math.isfinite(e.value.lam)

    def test_degenerate_when_nothing_divides(self):
        g = Grid.from_period(1, 50, x_max=1.0)
        k = DivisionKernel(1.0, Constant(1.0), One(), 2.0)  # nobody reaches the majority age
        with pytest.raises((DegenerateError, ValueError)):
            floquet_eigen(k, g, max_iter=100)

    def test_bad_tol(self):
        with pytest.raises(ValueError):
            floquet_eigen(square_kernel(), Grid.from_period(1, 10, x_max=1.0), tol=0)

    def test_arnoldi_route_agrees_with_power(self):
        g = Grid.from_period(1, 100, x_max=3.0)
        k = square_kernel()
        p = floquet_eigen(k, g, method="power", store_profile=False)
        a = floquet_eigen(k, g, method="arnoldi", store_profile=False)
        assert a.lam == pytest.approx(p.lam, abs=1e-10)
        assert a.residual < 1e-10
        with pytest.raises(ValueError):
            floquet_eigen(k, g, method="qr")

    def test_fallback_on_nearly_synchronised_forcing(self):
        # majority age just above the period with strong forcing: slow power convergence
        g = Grid.from_period(1, 200, x_max=4.0)
        k = DivisionKernel(100.0, SquareWave(0.5), One(), 1.025)
        r = floquet_eigen(k, g, store_profile=False, max_iter=2000)
        p = floquet_eigen(k, g, store_profile=False, method="power", max_iter=20000)
        assert r.lam == pytest.approx(p.lam, abs=1e-9)
        assert r.iterations < p.iterations
