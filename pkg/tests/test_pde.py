import numpy as np
import pytest

import geometry
import model as model_core
import pde
import spatial
import spectral


def single_state(speed: float, diffusivity: float) -> model_core.ModelSpec:
    return model_core.ModelSpec([speed], [diffusivity], [[0.0]])


def grid_of(width: float, height: float, nx: int, ny: int) -> geometry.Grid:
    return geometry.Grid.covering(geometry.Rectangle(0, width, 0, height), nx,
                                  ny)


def test_stability_limit(two_state):
    grid = grid_of(1.0, 1.0, 10, 10)
    assert pde.stability_limit(two_state, grid) == pytest.approx(0.0025)

    config = pde.SolverConfig(t_end=1.0)
    assert pde.time_step(two_state, grid, config) == pytest.approx(0.00225)

    with pytest.raises(pde.CflError) as error:
        pde.time_step(two_state, grid, pde.SolverConfig(t_end=1.0, dt=0.01))
    assert error.value.admissible == pytest.approx(0.0025)

    # Advection limited: dx / c
    fast = single_state(50.0, 0.0)
    assert pde.stability_limit(fast, grid) == pytest.approx(0.002)


def test_stability_limit_on_oblong_cells():
    grid = grid_of(10.0, 20.0, 10, 10)
    assert (grid.dx, grid.dy) == (1.0, 2.0)

    model = single_state(0.0, 1.0)
    assert pde.stability_limit(model, grid) == pytest.approx(0.25)
    assert pde.time_step(model, grid,
                         pde.SolverConfig(t_end=1.0)) == pytest.approx(0.225)


def test_heat_kernel_variance_grows_as_2dt():
    model = single_state(0.0, 0.5)
    grid = grid_of(1.0, 20.0, 1, 200)
    initial = pde.parse_init("point:0.5,10.05", model, grid)
    result = pde.run(initial, model, pde.SolverConfig(t_end=2.0))

    _, var_slope = result.slopes()
    assert var_slope == pytest.approx(2 * 0.5, rel=1e-6)
    assert result.mean_y[-1] == pytest.approx(result.mean_y[0], abs=1e-9)


def test_snapshot_times_must_lie_within_run(two_state):
    grid = grid_of(2.0, 2.0, 10, 10)
    initial = pde.parse_init("point:1,1", two_state, grid)

    for times in ((0.5, ), (-0.1, 0.05)):
        with pytest.raises(ValueError):
            pde.run(initial, two_state,
                    pde.SolverConfig(t_end=0.1, snapshot_times=times))


def test_mass_and_positivity(two_state):
    grid = grid_of(4.0, 8.0, 20, 40)
    initial = pde.parse_init("gaussian:2,5,0.5", two_state, grid)
    result = pde.run(initial, two_state,
                     pde.SolverConfig(t_end=2.0, snapshot_times=(0.5, 1.0)))

    assert result.mass[0] == pytest.approx(1.0, rel=1e-12)
    assert np.abs(result.mass / result.mass[0] - 1).max() < 1e-12
    assert result.final.values.min() >= 0
    assert [snapshot.t for snapshot in result.snapshots] == [0.5, 1.0]
    assert result.final.t == 2.0


def test_strang_conserves_mass(two_state):
    grid = grid_of(4.0, 8.0, 20, 40)
    initial = pde.parse_init("band:4,5", two_state, grid)
    result = pde.run(initial, two_state,
                     pde.SolverConfig(t_end=1.0, strang=True))
    assert result.mass_drift() < 1e-10


def test_pure_advection_moves_mean_exactly():
    model = single_state(1.0, 0.0)
    grid = grid_of(1.0, 10.0, 1, 200)
    initial = pde.parse_init("band:6,7", model, grid)
    result = pde.run(initial, model, pde.SolverConfig(t_end=2.0))

    # Positive speed transports toward decreasing y
    assert result.mean_y[-1] == pytest.approx(result.mean_y[0] - 2.0,
                                              abs=1e-9)
    mean_slope, _ = result.slopes()
    assert mean_slope == pytest.approx(-1.0, rel=1e-9)


def test_pure_reaction_uses_exact_propagator():
    model = model_core.ModelSpec([0.0, 0.0], [0.0, 0.0],
                                 [[-1.0, 1.0], [1.0, -1.0]])
    grid = grid_of(1.0, 1.0, 2, 2)
    initial = pde.StateFields(
        pde.distribute(model, np.ones(grid.shape), state=0), grid)

    final = pde.step(initial, model, pde.SolverConfig(t_end=1.0))
    assert final.t == 1.0
    assert final.values[0] == pytest.approx(
        np.full(grid.shape, 0.5 + 0.5 * np.exp(-2.0)))


def test_explicit_step_checks_cfl(two_state):
    grid = grid_of(1.0, 1.0, 10, 10)
    initial = pde.parse_init("point:0.5,0.5", two_state, grid)
    with pytest.raises(pde.CflError):
        pde.step(initial, two_state, pde.SolverConfig(t_end=1.0), dt=1.0)


def test_snapshots_land_on_requested_times(two_state):
    grid = grid_of(2.0, 2.0, 10, 10)
    initial = pde.parse_init("point:1,1", two_state, grid)
    config = pde.SolverConfig(t_end=0.1,
                              snapshot_times=(0.0, 0.0123, 0.05, 0.1))
    result = pde.run(initial, two_state, config)

    assert [snapshot.t for snapshot in result.snapshots] == [
        0.0, 0.0123, 0.05, 0.1
    ]
    assert 0.0123 in result.times


def test_moments():
    grid = grid_of(1.0, 4.0, 1, 4)
    values = np.zeros((1, 4, 1))
    values[0, 1, 0] = values[0, 3, 0] = 1.0
    result = pde.moments(pde.StateFields(values, grid))

    assert result.mass == 2.0
    assert result.mean_y == 2.5
    assert result.var_y == 1.0

    with pytest.raises(pde.ZeroMassError):
        pde.moments(pde.StateFields(np.zeros((1, 4, 1)), grid))


def test_parse_init(two_state):
    grid = grid_of(2.0, 2.0, 4, 4)

    fields = pde.parse_init("point:0.6,1.4@1", two_state, grid)
    assert fields.values[0].sum() == 0
    assert fields.values[1, 2, 1] == pytest.approx(1 / grid.cell_area)

    fields = pde.parse_init("gaussian:1,1,0.5", two_state, grid)
    assert fields.values.sum(axis=(1, 2)) * grid.cell_area == pytest.approx(
        [0.5, 0.5])

    for text in ("point:1", "ring:1,1", "band:5,6"):
        with pytest.raises(ValueError):
            pde.parse_init(text, two_state, grid)


def test_fields_shape_is_checked(two_state):
    grid = grid_of(1.0, 1.0, 2, 3)
    with pytest.raises(ValueError):
        pde.StateFields(np.zeros((2, 2, 3)), grid)


def test_uniform_network_matches_constant_mode(two_state):
    grid = grid_of(2.0, 4.0, 10, 20)
    initial = pde.parse_init("gaussian:1,3,0.3", two_state, grid)

    constant = pde.run(initial, two_state, pde.SolverConfig(t_end=0.5))
    medium = pde.Medium.from_network(two_state,
                                     geometry.NetworkField.uniform(grid))
    network = pde.run(
        initial, medium,
        pde.SolverConfig(t_end=0.5, advection=pde.AdvectionMode.NETWORK))

    assert network.final.values == pytest.approx(constant.final.values,
                                                 rel=1e-10,
                                                 abs=1e-14)


def test_density_quantization(two_state):
    grid = grid_of(1.0, 1.0, 4, 1)
    medium = pde.Medium(two_state, np.array([[0.0, 0.2, 0.2001, 1.0]]))

    assert len(medium.distinct) == 3
    propagators = medium.propagators(0.1)
    assert propagators.shape == (3, 2, 2)
    assert propagators.sum(axis=1) == pytest.approx(np.ones((3, 2)))
    assert medium.propagators(0.1) is propagators

    with pytest.raises(ValueError):
        pde.Medium(two_state, np.array([[1.5]]))


def test_unbound_state_without_filaments_stays_unbound(two_state):
    grid = grid_of(1.0, 1.0, 2, 1)
    medium = pde.Medium(two_state, np.array([[0.0, 1.0]]))
    initial = pde.StateFields(
        pde.distribute(two_state, np.ones(grid.shape), state=1), grid)

    final = pde.run(initial, medium,
                    pde.SolverConfig(t_end=0.01, dt=0.001)).final
    assert final.values[0, 0, 0] < 1e-3
    assert final.values[0, 0, 1] > 1e-3


def test_schedule_switches_network():
    model = single_state(1.0, 0.0)
    grid = grid_of(1.0, 10.0, 1, 200)
    initial = pde.parse_init("band:4,5", model, grid)

    down = pde.Medium.from_network(
        model, geometry.NetworkField.uniform(grid, (0.0, -1.0)))
    up = pde.Medium.from_network(
        model, geometry.NetworkField.uniform(grid, (0.0, 1.0)))

    config = pde.SolverConfig(t_end=2.0,
                              snapshot_times=(1.0, ),
                              advection=pde.AdvectionMode.NETWORK)
    result = pde.run(initial, down, config, schedule=[(1.0, up)])

    start = result.mean_y[0]
    assert pde.moments(result.snapshots[0]).mean_y == pytest.approx(start - 1,
                                                                    abs=1e-9)
    assert result.mean_y[-1] == pytest.approx(start, abs=1e-9)


def test_ensemble_of_identical_media(two_state):
    grid = grid_of(2.0, 4.0, 8, 16)
    initial = pde.parse_init("gaussian:1,3,0.3", two_state, grid)
    config = pde.SolverConfig(t_end=0.2, snapshot_times=(0.1, ))

    single = pde.run(initial, two_state, config)
    ensemble = pde.ensemble_run(
        initial, [pde.Medium(two_state), pde.Medium(two_state)], config)

    assert ensemble.final.values == pytest.approx(single.final.values)
    assert ensemble.snapshots[0].t == 0.1
    assert ensemble.mean_y == pytest.approx(single.mean_y)


@pytest.mark.slow
def test_long_time_moments_match_spectral(two_state):
    grid = grid_of(8.0, 48.0, 8, 960)
    initial = pde.parse_init("band:35.9,36.1", two_state, grid)
    result = pde.run(initial, two_state,
                     pde.SolverConfig(t_end=16.0, record_every=10))

    eff = spectral.effective_transport(two_state)
    measured = result.effective()

    assert measured.method is spectral.Method.PDE_MOMENT
    assert measured.v_eff == pytest.approx(eff.v_eff, rel=0.03)
    assert measured.sigma_eff == pytest.approx(eff.sigma_eff, rel=0.05)
    assert result.mass_drift() < 1e-10


@pytest.mark.slow
def test_long_time_moments_match_spatial_profile(two_state, data_path):
    x, rho = spatial.load_rho(data_path("profiles", "step.csv"))
    grid = grid_of(1.0, 48.0, 20, 960)

    medium = pde.Medium(two_state,
                        np.repeat(np.interp(grid.x_centers, x, rho)[np.newaxis],
                                  grid.ny,
                                  axis=0))
    initial = pde.StateFields(
        pde.distribute(two_state, pde.band_profile(grid, 35.9, 36.1)), grid)
    result = pde.run(initial, medium,
                     pde.SolverConfig(t_end=16.0, record_every=10))

    expected = spatial.spatial_effective_transport(two_state, (x, rho))
    measured = result.effective()

    assert measured.v_eff == pytest.approx(expected.v_eff, rel=0.05)
    assert measured.sigma_eff == pytest.approx(expected.sigma_eff, rel=0.05)
    assert result.mass_drift() < 1e-10
