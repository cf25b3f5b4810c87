import numpy as np
import pytest

import sojourn


def test_exponential():
    law = sojourn.Exponential(2.0)
    assert law.mean == 0.5
    assert law.variance == 0.25

    samples = law.sample(np.random.default_rng(0), 200000)
    assert samples.mean() == pytest.approx(0.5, rel=0.01)
    assert np.all(samples > 0)


def test_gamma_keeps_mean():
    law = sojourn.from_exit_rate("gamma:4", 2.0)
    assert isinstance(law, sojourn.Gamma)
    assert law.mean == pytest.approx(0.5)
    assert law.variance == pytest.approx(0.25 / 4)

    samples = law.sample(np.random.default_rng(1), 200000)
    assert samples.mean() == pytest.approx(0.5, rel=0.01)
    assert samples.var() == pytest.approx(0.0625, rel=0.03)


def test_unit_shape_gamma_is_exponential():
    gamma = sojourn.from_exit_rate("gamma:1", 3.0)
    exponential = sojourn.from_exit_rate("exponential", 3.0)

    assert (gamma.mean, gamma.variance) == pytest.approx(
        (exponential.mean, exponential.variance))
    assert gamma.sample(np.random.default_rng(6), 1000) == pytest.approx(
        exponential.sample(np.random.default_rng(6), 1000), rel=1e-12)


def test_deterministic():
    law = sojourn.from_exit_rate("deterministic", 4.0)
    assert law.mean == 0.25
    assert law.variance == 0.0
    assert np.all(law.sample(np.random.default_rng(2), 10) == 0.25)


@pytest.mark.parametrize("kind", ["gamma", "uniform", "gamma:x"])
def test_invalid_kind(kind):
    with pytest.raises(ValueError):
        sojourn.from_exit_rate(kind, 1.0)


@pytest.mark.parametrize("factory", [
    lambda: sojourn.Exponential(0.0),
    lambda: sojourn.Gamma(-1.0, 1.0),
    lambda: sojourn.Deterministic(0.0),
])
def test_invalid_parameters(factory):
    with pytest.raises(ValueError):
        factory()


def test_interface_is_abstract():
    with pytest.raises(TypeError):
        sojourn.Sojourn()
