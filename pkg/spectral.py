import dataclasses
import enum
import logging

import numpy as np
import scipy.linalg
import scipy.stats

import model as model_core

# Two leading eigenvalues closer than this are reported as a branch crossing
BRANCH_SEPARATION = 1e-8


class SolverError(ArithmeticError):
    pass


class Method(enum.Enum):
    SPECTRAL = "spectral"
    RENEWAL = "renewal"
    PDE_MOMENT = "pde_moment"
    SPATIAL = "spatial"


@dataclasses.dataclass(frozen=True)
class EffectiveTransport:
    v_eff: float
    sigma_eff: float
    method: Method = Method.SPECTRAL
    v_err: float | None = None
    sigma_err: float | None = None

    def __post_init__(self):
        if self.sigma_eff < 0:
            raise ValueError(f"Negative effective diffusivity: "
                             f"{self.sigma_eff}")


@dataclasses.dataclass(frozen=True, eq=False)
class DispersionPoint:
    nu: float
    lam: float
    eigenvector: np.ndarray
    separation: float


def effective_velocity(model: model_core.ModelSpec) -> float:
    pi = model_core.stationary_distribution(model).pi
    return float(model.speeds @ pi)


def constrained_solve(rates: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve A z = rhs on the range of A, selecting the z with sum(z) = 0."""
    n = len(rates)

    total = rhs.sum()
    if abs(total) > 1e-10 * max(1.0, np.abs(rhs).max()):
        raise SolverError(f"Right-hand side outside range(A): sum {total}")

    try:
        return model_core.bordered_solve(rates, np.ones(n), rhs, 0.0)
    except scipy.linalg.LinAlgError as error:
        raise SolverError(f"Singular bordered system: {error}")


def effective_diffusivity(model: model_core.ModelSpec) -> float:
    u0 = model_core.stationary_distribution(model).pi
    v_eff = float(model.speeds @ u0)

    r = (model.speeds - v_eff) * u0
    z = constrained_solve(model.rates, r)

    sigma = float(np.sum(model.diffusivities * u0 - model.speeds * z))
    if sigma < 0:
        # Only round-off can bring the quadratic form below zero
        logging.debug(f"Clipping effective diffusivity {sigma} to 0")
        sigma = 0.0
    return sigma


def effective_transport(model: model_core.ModelSpec) -> EffectiveTransport:
    return EffectiveTransport(effective_velocity(model),
                              effective_diffusivity(model))


def two_state_closed_form(c: float, d: float, beta1: float,
                          beta2: float) -> tuple[float, float]:
    total = beta1 + beta2
    v_eff = c * beta2 / total
    sigma_eff = d * beta1 / total + c**2 * beta1 * beta2 / total**3
    return v_eff, sigma_eff


def dispersion_eigenvalue(model: model_core.ModelSpec,
                          nu: float) -> DispersionPoint:
    operator = model.rates + nu * model.C + nu**2 * model.D
    eigenvalues, eigenvectors = scipy.linalg.eig(operator)

    order = np.argsort(-eigenvalues.real)
    leading = order[0]

    if len(order) > 1:
        separation = float(eigenvalues[leading].real -
                           eigenvalues[order[1]].real)
    else:
        separation = np.inf

    if separation < BRANCH_SEPARATION:
        logging.warning(f"Dispersion branch crossing at nu={nu}: "
                        f"separation {separation:.3g}")

    vector = eigenvectors[:, leading].real
    if vector.sum() != 0:
        vector = vector / vector.sum()

    return DispersionPoint(float(nu), float(eigenvalues[leading].real),
                           vector, separation)


def dispersion_curve(model: model_core.ModelSpec,
                     nus: np.ndarray) -> list[DispersionPoint]:
    return [dispersion_eigenvalue(model, nu) for nu in nus]


def dispersion_coefficients(model: model_core.ModelSpec,
                            h: float = 1e-4) -> tuple[float, float]:
    """Central finite differences of the leading branch at nu = 0.

    Returns (lambda'(0), lambda''(0) / 2), which approximate v_eff and
    sigma_eff to O(h^2).
    """
    plus = dispersion_eigenvalue(model, h).lam
    zero = dispersion_eigenvalue(model, 0.0).lam
    minus = dispersion_eigenvalue(model, -h).lam

    first = (plus - minus) / (2 * h)
    second = (plus - 2 * zero + minus) / h**2
    return first, second / 2


def gaussian_profile(eff: EffectiveTransport, t: float, y):
    if t <= 0:
        raise ValueError(f"Gaussian profile needs t > 0, got {t}")
    if eff.sigma_eff <= 0:
        raise ValueError("Gaussian profile needs a positive diffusivity")

    # Positive velocity moves mass toward decreasing y
    return scipy.stats.norm.pdf(y,
                                loc=-eff.v_eff * t,
                                scale=np.sqrt(2 * eff.sigma_eff * t))
