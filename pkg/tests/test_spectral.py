import numpy as np
import pytest

import model as model_core
import spectral


def test_two_state_effective(two_state):
    eff = spectral.effective_transport(two_state)
    assert eff.method is spectral.Method.SPECTRAL
    assert eff.v_eff == pytest.approx(0.5, rel=1e-12)
    assert eff.sigma_eff == pytest.approx(0.625, rel=1e-12)


def test_closed_form_random_two_state():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c, d, beta1, beta2 = np.exp(rng.uniform(-3, 3, 4))
        model = model_core.two_state(c, d, beta1, beta2)

        eff = spectral.effective_transport(model)
        v_eff, sigma_eff = spectral.two_state_closed_form(c, d, beta1, beta2)
        assert eff.v_eff == pytest.approx(v_eff, rel=1e-10)
        assert eff.sigma_eff == pytest.approx(sigma_eff, rel=1e-10)


def test_equal_rates_halve_speed():
    model = model_core.two_state(3.0, 0.2, 4.0, 4.0)
    assert spectral.effective_velocity(model) == pytest.approx(1.5)


def test_pure_diffusion():
    model = model_core.ModelSpec([0.0], [0.7], [[0.0]])
    eff = spectral.effective_transport(model)
    assert eff.v_eff == 0.0
    assert eff.sigma_eff == pytest.approx(0.7)


def test_rate_scaling():
    # Faster switching averages out the velocity fluctuations
    model = model_core.two_state(1.0, 0.5, 0.7, 1.3)
    base = spectral.effective_transport(model)
    fast = spectral.effective_transport(model.scaled(10.0))

    assert fast.v_eff == pytest.approx(base.v_eff)
    assert fast.sigma_eff < base.sigma_eff
    assert fast.sigma_eff == pytest.approx(0.5 * 0.7 / 2.0 +
                                           (base.sigma_eff - 0.5 * 0.7 / 2.0)
                                           / 10.0)


def test_diffusivity_nonnegative_random():
    rng = np.random.default_rng(1)
    for _ in range(200):
        model = model_core.random_model(int(rng.integers(2, 7)), rng)
        assert spectral.effective_diffusivity(model) >= 0


def test_constrained_solve_rejects_rhs_outside_range(two_state):
    with pytest.raises(spectral.SolverError):
        spectral.constrained_solve(two_state.rates, np.array([1.0, 1.0]))

    z = spectral.constrained_solve(two_state.rates, np.array([1.0, -1.0]))
    assert z.sum() == pytest.approx(0.0, abs=1e-14)
    assert two_state.rates @ z == pytest.approx([1.0, -1.0])


def test_dispersion_at_zero(two_state):
    point = spectral.dispersion_eigenvalue(two_state, 0.0)
    assert point.lam == pytest.approx(0.0, abs=1e-12)
    assert point.eigenvector == pytest.approx([0.5, 0.5])
    assert point.separation == pytest.approx(2.0)


def test_dispersion_coefficients_random():
    rng = np.random.default_rng(2)
    for _ in range(100):
        model = model_core.random_model(int(rng.integers(2, 7)), rng)
        eff = spectral.effective_transport(model)
        slope, curvature = spectral.dispersion_coefficients(model, 1e-3)

        scale = 1 + abs(eff.v_eff)
        assert abs(slope - eff.v_eff) < 1e-4 * scale
        assert curvature == pytest.approx(eff.sigma_eff, rel=1e-3, abs=1e-5)


def test_dispersion_convergence_order():
    model = model_core.two_state(1.0, 0.3, 0.8, 0.4)
    v_eff = spectral.effective_velocity(model)

    errors = [
        abs(spectral.dispersion_coefficients(model, h)[0] - v_eff)
        for h in (1e-2, 5e-3)
    ]
    # Halving h quarters the central difference error
    assert errors[0] / errors[1] == pytest.approx(4.0, rel=0.1)


def test_dispersion_curve(two_state):
    curve = spectral.dispersion_curve(two_state, np.linspace(-1, 1, 5))
    assert [point.nu for point in curve] == pytest.approx(
        [-1, -0.5, 0, 0.5, 1])
    assert all(np.isfinite(point.lam) for point in curve)


def test_gaussian_profile(two_state):
    eff = spectral.effective_transport(two_state)
    y = np.linspace(-40, 20, 6001)
    profile = spectral.gaussian_profile(eff, 10.0, y)

    dy = y[1] - y[0]
    mass = profile.sum() * dy
    mean = (profile * y).sum() * dy
    variance = (profile * (y - mean)**2).sum() * dy

    assert mass == pytest.approx(1.0, rel=1e-6)
    assert mean == pytest.approx(-5.0, rel=1e-6)
    assert variance == pytest.approx(2 * 0.625 * 10, rel=1e-4)


def test_gaussian_profile_rejects():
    with pytest.raises(ValueError):
        spectral.gaussian_profile(spectral.EffectiveTransport(1.0, 1.0), 0.0,
                                  0.0)
    with pytest.raises(ValueError):
        spectral.gaussian_profile(spectral.EffectiveTransport(1.0, 0.0), 1.0,
                                  0.0)


def test_effective_transport_rejects_negative_diffusivity():
    with pytest.raises(ValueError):
        spectral.EffectiveTransport(1.0, -0.1)
