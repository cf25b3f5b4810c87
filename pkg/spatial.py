import dataclasses
import logging

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

import geometry
import model as model_core
import spectral

GRID_POINTS = 401

RESIDUAL_TOLERANCE = 1e-8
SOLVABILITY_TOLERANCE = 1e-10


class KernelDimensionError(ArithmeticError):
    pass


class SolvabilityError(ArithmeticError):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class SpatialProfile:
    x: np.ndarray
    weights: np.ndarray
    rho: np.ndarray
    u0: np.ndarray
    w0: np.ndarray | None = None

    def integral(self, values: np.ndarray) -> float:
        """Trapezoid integral over [0, 1] of the state sum of values."""
        return float(self.weights @ values.sum(axis=1))


def sample_rho(rho, m: int = GRID_POINTS) -> np.ndarray:
    """Density on the m-point grid of [0, 1] from a callable, an array of
    length m, or (x, rho) samples that get linearly interpolated."""
    x = np.linspace(0.0, 1.0, m)

    if callable(rho):
        values = np.asarray(rho(x), dtype=float) * np.ones(m)
    elif isinstance(rho, tuple):
        values = np.interp(x, *rho)
    else:
        values = np.asarray(rho, dtype=float)
        if values.ndim == 0:
            values = np.full(m, float(values))

    if values.shape != (m, ):
        raise ValueError(f"Density has shape {values.shape}, expected {m}")
    if np.any(values < 0) or not np.any(values):
        raise ValueError("Density must be non-negative and not all zero")
    return values


def trapezoid_weights(m: int) -> np.ndarray:
    weights = np.full(m, 1.0 / (m - 1))
    weights[[0, -1]] /= 2
    return weights


def operator(model: model_core.ModelSpec,
             rho: np.ndarray,
             binding_states=None) -> scipy.sparse.csc_matrix:
    """Discretized D d^2/dx^2 + A(x) with reflecting ends.

    Unknowns are ordered node-major: index i * n + l for node i, state l.
    """
    m = len(rho)
    h = 1.0 / (m - 1)

    main = np.full(m, -2.0)
    upper = np.ones(m - 1)
    lower = np.ones(m - 1)
    # Ghost-node reflection at both ends
    upper[0] = 2.0
    lower[-1] = 2.0
    laplacian = scipy.sparse.diags([lower, main, upper], [-1, 0, 1]) / h**2

    rates = geometry.spatial_rates(model, rho, binding_states)
    reaction = scipy.sparse.block_diag(list(rates))

    return scipy.sparse.csc_matrix(
        scipy.sparse.kron(laplacian, model.D) + reaction)


def _bordered(matrix, border: np.ndarray, rhs: np.ndarray,
              constraint: float) -> np.ndarray:
    system = scipy.sparse.bmat([[matrix, border[:, np.newaxis]],
                                [border[np.newaxis, :], None]],
                               format="csc")

    try:
        with np.errstate(all="ignore"):
            solution = scipy.sparse.linalg.spsolve(
                system, np.append(rhs, constraint))
    except RuntimeError as error:
        raise KernelDimensionError(f"Bordered system is singular: {error}")

    if not np.all(np.isfinite(solution)):
        raise KernelDimensionError("Bordered system is singular: the "
                                   "operator kernel is not one-dimensional")
    return solution[:-1]


def solve_u0(model: model_core.ModelSpec,
             rho,
             m: int = GRID_POINTS,
             binding_states=None) -> SpatialProfile:
    rho = sample_rho(rho, m)
    n = model.n_states

    matrix = operator(model, rho, binding_states)
    weights = trapezoid_weights(m)
    border = np.repeat(weights, n)

    u0 = _bordered(matrix, border, np.zeros(m * n), 1.0)

    residual = np.abs(matrix @ u0).max()
    if residual > RESIDUAL_TOLERANCE * max(1.0, np.abs(u0).max()):
        raise KernelDimensionError(f"Kernel residual too large: {residual}")

    if u0.min() < -1e-10 * np.abs(u0).max():
        raise KernelDimensionError(f"Kernel vector changes sign: "
                                   f"min {u0.min():g}")
    u0 = np.clip(u0, 0.0, None).reshape(m, n)
    u0 /= weights @ u0.sum(axis=1)

    return SpatialProfile(np.linspace(0.0, 1.0, m), weights, rho, u0)


def solve_w0(model: model_core.ModelSpec,
             profile: SpatialProfile,
             binding_states=None) -> SpatialProfile:
    m, n = profile.u0.shape
    matrix = operator(model, profile.rho, binding_states)
    border = np.repeat(profile.weights, n)

    v_eff = (profile.integral(profile.u0 * model.speeds) /
             profile.integral(profile.u0))
    forcing = (model.speeds - v_eff) * profile.u0

    solvability = profile.integral(forcing)
    if abs(solvability) > SOLVABILITY_TOLERANCE:
        raise SolvabilityError(f"Forcing outside the operator range: "
                               f"{solvability:g}")

    w0 = _bordered(matrix, border, -forcing.reshape(-1), 0.0)

    residual = np.abs(matrix @ w0 + forcing.reshape(-1)).max()
    if residual > RESIDUAL_TOLERANCE:
        logging.warning(f"w0 residual {residual:g} above "
                        f"{RESIDUAL_TOLERANCE:g}")

    return dataclasses.replace(profile, w0=w0.reshape(m, n))


def spatial_effective_transport(
        model: model_core.ModelSpec,
        rho,
        m: int = GRID_POINTS,
        binding_states=None) -> spectral.EffectiveTransport:
    model_core.check(model)

    profile = solve_u0(model, rho, m, binding_states)
    profile = solve_w0(model, profile, binding_states)

    mass = profile.integral(profile.u0)
    v_eff = profile.integral(profile.u0 * model.speeds) / mass
    sigma_eff = (profile.integral(profile.u0 * model.diffusivities) +
                 profile.integral(profile.w0 * model.speeds)) / mass

    return spectral.EffectiveTransport(v_eff, max(sigma_eff, 0.0),
                                       spectral.Method.SPATIAL)


def adjoint_residual(model: model_core.ModelSpec,
                     rho,
                     m: int = GRID_POINTS,
                     binding_states=None) -> float:
    """How far the quadrature-weighted ones vector is from annihilating
    the discrete operator from the left."""
    rho = sample_rho(rho, m)
    matrix = operator(model, rho, binding_states)
    border = np.repeat(trapezoid_weights(m), model.n_states)
    return float(np.abs(matrix.T @ border).max())


def mean_rate_model(model: model_core.ModelSpec,
                    rho,
                    m: int = GRID_POINTS,
                    binding_states=None) -> model_core.ModelSpec:
    """Homogeneous comparator with binding rates scaled by the mean
    density."""
    rho = sample_rho(rho, m)
    mean = float(trapezoid_weights(m) @ rho)
    return model.with_rates(
        geometry.spatial_rates(model, mean, binding_states))


def load_rho(path: str) -> tuple[np.ndarray, np.ndarray]:
    samples = np.genfromtxt(path, delimiter=",", names=True)
    if samples.dtype.names is None or not {"x", "rho"} <= set(
            samples.dtype.names):
        raise ValueError(f"Density file {path} needs columns x, rho")
    return np.atleast_1d(samples["x"]), np.atleast_1d(samples["rho"])
