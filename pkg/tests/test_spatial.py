import numpy as np
import pytest

import model as model_core
import spatial
import spectral


def test_trapezoid_weights():
    weights = spatial.trapezoid_weights(5)
    assert weights == pytest.approx([0.125, 0.25, 0.25, 0.25, 0.125])
    assert weights.sum() == pytest.approx(1.0)


def test_sample_rho():
    assert spatial.sample_rho(0.5, 3) == pytest.approx([0.5, 0.5, 0.5])
    assert spatial.sample_rho(lambda x: 1 + x, 3) == pytest.approx(
        [1.0, 1.5, 2.0])
    assert spatial.sample_rho((np.array([0.0, 1.0]), np.array([0.0, 2.0])),
                              5) == pytest.approx([0, 0.5, 1, 1.5, 2])

    with pytest.raises(ValueError):
        spatial.sample_rho(np.ones(4), 5)
    with pytest.raises(ValueError):
        spatial.sample_rho(0.0, 5)


def test_adjoint_null_vector(two_state):
    rho = lambda x: 0.5 + 0.4 * np.cos(3 * x)
    assert spatial.adjoint_residual(two_state, rho, 101) < 1e-10


def test_constant_density_reduces_to_homogeneous():
    rng = np.random.default_rng(4)
    for _ in range(5):
        model = model_core.random_model(int(rng.integers(2, 5)), rng)
        homogeneous = spectral.effective_transport(model)
        eff = spatial.spatial_effective_transport(model, 1.0, 51)

        assert eff.method is spectral.Method.SPATIAL
        assert eff.v_eff == pytest.approx(homogeneous.v_eff, rel=1e-8,
                                          abs=1e-10)
        assert eff.sigma_eff == pytest.approx(homogeneous.sigma_eff,
                                              rel=1e-8)


def test_constant_density_profiles(two_state):
    profile = spatial.solve_u0(two_state, 1.0, 21)
    assert profile.integral(profile.u0) == pytest.approx(1.0)
    assert profile.u0 == pytest.approx(np.tile([0.5, 0.5], (21, 1)))

    profile = spatial.solve_w0(two_state, profile)
    pi = model_core.stationary_distribution(two_state).pi
    z = spectral.constrained_solve(two_state.rates,
                                   (two_state.speeds - 0.5) * pi)
    assert profile.w0 == pytest.approx(np.tile(-z, (21, 1)), abs=1e-12)


def test_unbound_state_where_density_vanishes(two_state):
    rho = lambda x: np.where(x < 0.5, 0.0, 1.0)
    profile = spatial.solve_u0(two_state, rho, 101)

    # No binding where rho = 0, so the moving state is absent there
    assert profile.u0[:40, 0] == pytest.approx(np.zeros(40), abs=1e-6)
    assert np.all(profile.u0 >= 0)


def test_matches_mean_rate_velocity(two_state):
    rho = lambda x: 0.6 + 0.4 * np.sin(2 * np.pi * x)
    eff = spatial.spatial_effective_transport(two_state, rho, 201)
    comparator = spectral.effective_transport(
        spatial.mean_rate_model(two_state, rho, 201))

    # The free state is spatially uniform, so bound mass follows the
    # mean binding rate
    assert eff.v_eff == pytest.approx(comparator.v_eff, rel=1e-6)


@pytest.mark.parametrize("name", ["step", "sinusoid"])
def test_shipped_profiles_enhance_diffusivity(data_path, two_state, name):
    rho = spatial.load_rho(data_path("profiles", f"{name}.csv"))
    eff = spatial.spatial_effective_transport(two_state, rho)
    comparator = spectral.effective_transport(
        spatial.mean_rate_model(two_state, rho))

    assert eff.sigma_eff >= comparator.sigma_eff


def test_mean_rate_model(two_state):
    comparator = spatial.mean_rate_model(two_state, lambda x: x, 11)
    assert comparator.rates == pytest.approx(
        np.array([[-1.0, 0.5], [1.0, -0.5]]))


def test_load_rho_needs_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("position,density\n0,1\n1,1\n")
    with pytest.raises(ValueError):
        spatial.load_rho(str(path))


def test_no_transport_has_no_corrector():
    model = model_core.two_state(0.0, 1.0, 1.0, 1.0)
    rho = lambda x: 0.5 + 0.4 * np.cos(3 * x)

    profile = spatial.solve_w0(model, spatial.solve_u0(model, rho, 101))
    assert profile.w0 == pytest.approx(np.zeros((101, 2)), abs=1e-12)

    eff = spatial.spatial_effective_transport(model, rho, 101)
    assert eff.v_eff == 0.0


def test_second_order_refinement(two_state):
    rho = lambda x: 0.6 + 0.3 * np.cos(np.pi * x)
    sigmas = [
        spatial.spatial_effective_transport(two_state, rho, m).sigma_eff
        for m in (51, 101, 201)
    ]

    ratio = (sigmas[0] - sigmas[1]) / (sigmas[1] - sigmas[2])
    assert ratio == pytest.approx(4.0, rel=0.1)
