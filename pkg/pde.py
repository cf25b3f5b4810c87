import dataclasses
import enum
import logging
import multiprocessing

import numpy as np
import scipy.linalg

import geometry
import model as model_core
import spectral

SAFETY = 0.9

# Reaction propagators are cached per quantized filament density
RHO_LEVELS = 256

NEGATIVE_TOLERANCE = 1e-12


class CflError(ValueError):

    def __init__(self, dt: float, admissible: float):
        super().__init__(f"Time step {dt:g} violates CFL, "
                         f"admissible dt is {admissible:g}")
        self.dt = dt
        self.admissible = admissible


class NegativeMassError(ArithmeticError):
    pass


class ZeroMassError(ValueError):
    pass


class AdvectionMode(enum.Enum):
    CONSTANT = "constant"
    NETWORK = "network"


@dataclasses.dataclass(frozen=True, eq=False)
class StateFields:
    values: np.ndarray
    grid: geometry.Grid
    t: float = 0.0

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[1:] != self.grid.shape:
            raise ValueError(f"Fields {self.values.shape} do not match grid "
                             f"{self.grid.shape}")

    @property
    def total(self) -> np.ndarray:
        return self.values.sum(axis=0)


@dataclasses.dataclass(frozen=True)
class SolverConfig:
    t_end: float
    dt: float | None = None
    snapshot_times: tuple[float, ...] = ()
    advection: AdvectionMode = AdvectionMode.CONSTANT
    safety: float = SAFETY
    strang: bool = False
    record_every: int = 1


@dataclasses.dataclass(frozen=True)
class Moments:
    mass: float
    mean_y: float
    var_y: float


class Medium:
    """Rates and advection directions seen by the cargo on one grid.

    Without a density field the rates are homogeneous. With one, rates
    into bound states are scaled by the density, quantized to RHO_LEVELS.
    """

    def __init__(self,
                 model: model_core.ModelSpec,
                 rho: np.ndarray | None = None,
                 advection: np.ndarray | None = None,
                 binding_states=None):
        self.model = model
        self.rho = None if rho is None else np.asarray(rho, dtype=float)
        self.advection = advection
        self.binding_states = binding_states
        self._propagators: dict[float, np.ndarray] = {}

        if self.rho is not None:
            if np.any(self.rho < 0) or np.any(self.rho > 1):
                raise ValueError("Filament density outside [0, 1]")

            self.levels = np.rint(self.rho * (RHO_LEVELS - 1)).astype(int)
            self.distinct = np.unique(self.levels)
            self.masks = [self.levels == level for level in self.distinct]

    @classmethod
    def from_network(cls,
                     model: model_core.ModelSpec,
                     network: geometry.NetworkField,
                     binding_states=None):
        return cls(model, network.density, network.advection, binding_states)

    def propagators(self, dt: float) -> np.ndarray:
        if dt not in self._propagators:
            if self.rho is None:
                rates = self.model.rates[np.newaxis]
            else:
                rates = geometry.spatial_rates(
                    self.model, self.distinct / (RHO_LEVELS - 1),
                    self.binding_states)
            self._propagators[dt] = np.array(
                [scipy.linalg.expm(matrix * dt) for matrix in rates])
        return self._propagators[dt]

    def velocities(self, state: int, mode: AdvectionMode):
        speed = self.model.speeds[state]

        if mode is AdvectionMode.CONSTANT or self.advection is None:
            # Positive speed transports toward decreasing y
            return 0.0, -speed
        return speed * self.advection[..., 0], speed * self.advection[..., 1]


def as_medium(medium) -> Medium:
    if isinstance(medium, model_core.ModelSpec):
        return Medium(medium)
    return medium


def stability_limit(model: model_core.ModelSpec, grid: geometry.Grid) -> float:
    limits = [np.inf]

    d_max = model.diffusivities.max()
    if d_max > 0:
        # Narrowest cell side bounds the 5-point stencil
        limits.append(min(grid.dx, grid.dy)**2 / (4 * d_max))

    c_max = np.abs(model.speeds).max()
    if c_max > 0:
        limits.append(min(grid.dx, grid.dy) / c_max)

    return float(min(limits))


def time_step(model: model_core.ModelSpec, grid: geometry.Grid,
              config: SolverConfig) -> float:
    limit = stability_limit(model, grid)

    if config.dt is None:
        return config.safety * limit

    if config.dt > limit:
        raise CflError(config.dt, limit)
    return config.dt


def _advect(u: np.ndarray, velocity, dt: float, spacing: float,
            axis: int) -> np.ndarray:
    # Donor-cell fluxes through interior faces; boundary faces carry none
    head = [slice(None)] * u.ndim
    tail = [slice(None)] * u.ndim
    head[axis] = slice(None, -1)
    tail[axis] = slice(1, None)
    head, tail = tuple(head), tuple(tail)

    if np.isscalar(velocity):
        if velocity == 0:
            return u
        flux = max(velocity, 0.0) * u[head] + min(velocity, 0.0) * u[tail]
    else:
        flux = (np.maximum(velocity[head], 0.0) * u[head] +
                np.minimum(velocity[tail], 0.0) * u[tail])

    change = np.zeros_like(u)
    change[head] -= flux
    change[tail] += flux
    return u + dt / spacing * change


def _diffuse(u: np.ndarray, d: float, dt: float,
             grid: geometry.Grid) -> np.ndarray:
    if d == 0:
        return u

    flux_y = np.diff(u, axis=0) / grid.dy**2
    flux_x = np.diff(u, axis=1) / grid.dx**2

    laplacian = np.zeros_like(u)
    laplacian[:-1, :] += flux_y
    laplacian[1:, :] -= flux_y
    laplacian[:, :-1] += flux_x
    laplacian[:, 1:] -= flux_x
    return u + d * dt * laplacian


def _transport(values: np.ndarray, medium: Medium, dt: float,
               grid: geometry.Grid, mode: AdvectionMode) -> np.ndarray:
    values = values.copy()
    for state in range(medium.model.n_states):
        vx, vy = medium.velocities(state, mode)
        u = _advect(values[state], vx, dt, grid.dx, axis=1)
        values[state] = _advect(u, vy, dt, grid.dy, axis=0)
    return values


def _diffusion(values: np.ndarray, medium: Medium, dt: float,
               grid: geometry.Grid) -> np.ndarray:
    values = values.copy()
    for state, d in enumerate(medium.model.diffusivities):
        values[state] = _diffuse(values[state], d, dt, grid)
    return values


def _reaction(values: np.ndarray, medium: Medium, dt: float) -> np.ndarray:
    propagators = medium.propagators(dt)

    if medium.rho is None:
        return np.einsum("ij,jyx->iyx", propagators[0], values)

    values = values.copy()
    for propagator, mask in zip(propagators, medium.masks):
        values[:, mask] = propagator @ values[:, mask]
    return values


def _check_positive(values: np.ndarray) -> np.ndarray:
    lowest = values.min()
    if lowest >= 0:
        return values

    scale = max(1.0, float(np.abs(values).max()))
    if lowest < -NEGATIVE_TOLERANCE * scale:
        raise NegativeMassError(f"Negative concentration {lowest:g}")

    logging.debug(f"Clipping negative concentration {lowest:g}")
    return np.clip(values, 0.0, None)


def _advance(values: np.ndarray, medium: Medium, dt: float,
             grid: geometry.Grid, config: SolverConfig) -> np.ndarray:
    if config.strang:
        values = _transport(values, medium, dt / 2, grid, config.advection)
        values = _diffusion(values, medium, dt / 2, grid)
        values = _reaction(values, medium, dt)
        values = _diffusion(values, medium, dt / 2, grid)
        values = _transport(values, medium, dt / 2, grid, config.advection)
    else:
        values = _transport(values, medium, dt, grid, config.advection)
        values = _diffusion(values, medium, dt, grid)
        values = _reaction(values, medium, dt)

    return _check_positive(values)


def step(fields: StateFields,
         medium,
         config: SolverConfig,
         dt: float | None = None) -> StateFields:
    medium = as_medium(medium)
    if dt is None:
        dt = time_step(medium.model, fields.grid, config)
        if np.isinf(dt):
            # Pure reaction: the exact propagator takes any step
            dt = config.t_end - fields.t
    else:
        limit = stability_limit(medium.model, fields.grid)
        if dt > limit:
            raise CflError(dt, limit)

    values = _advance(fields.values, medium, dt, fields.grid, config)
    return StateFields(values, fields.grid, fields.t + dt)


def moments(fields: StateFields) -> Moments:
    grid = fields.grid
    profile = fields.total.sum(axis=1) * grid.cell_area

    mass = float(profile.sum())
    if not mass > 0:
        raise ZeroMassError("Fields carry no mass")

    y = grid.y_centers
    mean_y = float(profile @ y / mass)
    var_y = float(profile @ (y - mean_y)**2 / mass)
    return Moments(mass, mean_y, var_y)


@dataclasses.dataclass(frozen=True, eq=False)
class RunResult:
    snapshots: list[StateFields]
    final: StateFields
    times: np.ndarray
    mass: np.ndarray
    mean_y: np.ndarray
    var_y: np.ndarray

    def slopes(self, fraction: float = 0.5) -> tuple[float, float]:
        """Least-squares slopes of mean_y and var_y over the final part
        of the run."""
        start = self.times[-1] - fraction * (self.times[-1] - self.times[0])
        keep = self.times >= start

        mean_slope = np.polyfit(self.times[keep], self.mean_y[keep], 1)[0]
        var_slope = np.polyfit(self.times[keep], self.var_y[keep], 1)[0]
        return float(mean_slope), float(var_slope)

    def effective(self, fraction: float = 0.5) -> spectral.EffectiveTransport:
        mean_slope, var_slope = self.slopes(fraction)
        return spectral.EffectiveTransport(-mean_slope,
                                           max(var_slope / 2, 0.0),
                                           spectral.Method.PDE_MOMENT)

    def mass_drift(self) -> float:
        """Largest relative mass change per unit time."""
        duration = self.times[-1] - self.times[0]
        if duration == 0:
            return 0.0
        return float(
            np.abs(self.mass - self.mass[0]).max() / self.mass[0] / duration)


def _medium_at(schedule, t: float) -> Medium:
    current = schedule[0][1]
    for start, medium in schedule:
        if start <= t:
            current = medium
    return current


def run(initial: StateFields,
        medium,
        config: SolverConfig,
        schedule: list[tuple[float, Medium]] | None = None) -> RunResult:
    """Integrate to config.t_end, landing exactly on every snapshot time.

    schedule optionally lists (start_time, medium) epochs, e.g. networks
    regenerated while the run proceeds; it replaces medium from each start.
    """
    media = [(initial.t, as_medium(medium))]
    if schedule:
        media = sorted([(initial.t, as_medium(medium))] +
                       [(start, as_medium(m)) for start, m in schedule],
                       key=lambda epoch: epoch[0])

    grid = initial.grid
    model = media[0][1].model
    dt_max = time_step(model, grid, config)

    outside = [
        t for t in config.snapshot_times
        if not initial.t <= t <= config.t_end
    ]
    if outside:
        raise ValueError(f"Snapshot times {outside} outside "
                         f"[{initial.t:g}, {config.t_end:g}]")

    stops = sorted({t for t in config.snapshot_times if t > initial.t} |
                   {config.t_end})
    wanted = set(config.snapshot_times)

    values = initial.values.copy()
    t = initial.t
    first = moments(initial)
    times, mass, mean_y, var_y = [t], [first.mass], [first.mean_y], [
        first.var_y
    ]
    snapshots = []
    if initial.t in wanted:
        snapshots.append(initial)

    steps = 0
    for stop in stops:
        while t < stop:
            dt = min(dt_max, stop - t)
            if stop - t - dt <= 1e-12 * dt_max:
                dt = stop - t

            current = _medium_at(media, t)
            values = _advance(values, current, dt, grid, config)
            t = stop if dt == stop - t else t + dt
            steps += 1

            if steps % config.record_every == 0 or t == stop:
                current_moments = moments(StateFields(values, grid, t))
                times.append(t)
                mass.append(current_moments.mass)
                mean_y.append(current_moments.mean_y)
                var_y.append(current_moments.var_y)

        if stop in wanted:
            snapshots.append(StateFields(values.copy(), grid, stop))

    logging.debug(f"Run finished after {steps} steps, dt {dt_max:g}")

    return RunResult(snapshots, StateFields(values, grid, t), np.array(times),
                     np.array(mass), np.array(mean_y), np.array(var_y))


def _run_task(task) -> RunResult:
    return run(*task)


def ensemble_run(initial: StateFields,
                 media: list[Medium],
                 config: SolverConfig,
                 workers: int = 1) -> RunResult:
    """Average runs over several network realisations."""
    tasks = [(initial, medium, config) for medium in media]

    if workers > 1 and len(tasks) > 1:
        with multiprocessing.Pool(min(workers, len(tasks))) as pool:
            results = pool.map(_run_task, tasks)
    else:
        results = [_run_task(task) for task in tasks]

    def average(values):
        return np.mean(np.array(values), axis=0)

    snapshots = [
        StateFields(average([result.snapshots[k].values
                             for result in results]), initial.grid,
                    results[0].snapshots[k].t)
        for k in range(len(results[0].snapshots))
    ]
    final = StateFields(average([result.final.values for result in results]),
                        initial.grid, results[0].final.t)

    return RunResult(snapshots, final, results[0].times,
                     average([result.mass for result in results]),
                     average([result.mean_y for result in results]),
                     average([result.var_y for result in results]))


def distribute(model: model_core.ModelSpec, profile: np.ndarray,
               state: int | None = None) -> np.ndarray:
    """Split a (ny, nx) density over the states: in stationary proportions,
    or all into one state."""
    weights = np.zeros(model.n_states)
    if state is None:
        weights = model_core.stationary_distribution(model).pi
    else:
        weights[state] = 1.0
    return weights[:, np.newaxis, np.newaxis] * profile[np.newaxis]


def point_profile(grid: geometry.Grid, x: float, y: float) -> np.ndarray:
    column = min(int((x - grid.x0) // grid.dx), grid.nx - 1)
    row = min(int((y - grid.y0) // grid.dy), grid.ny - 1)

    profile = np.zeros(grid.shape)
    profile[row, column] = 1.0 / grid.cell_area
    return profile


def gaussian_profile(grid: geometry.Grid, x: float, y: float,
                     width: float) -> np.ndarray:
    xs, ys = np.meshgrid(grid.x_centers, grid.y_centers)
    profile = np.exp(-((xs - x)**2 + (ys - y)**2) / (2 * width**2))
    return profile / (profile.sum() * grid.cell_area)


def band_profile(grid: geometry.Grid, low: float, high: float) -> np.ndarray:
    ys = grid.y_centers
    inside = ((ys >= low) & (ys <= high)).astype(float)
    profile = np.repeat(inside[:, np.newaxis], grid.nx, axis=1)
    if not profile.any():
        raise ValueError(f"Band [{low}, {high}] misses every cell centre")
    return profile / (profile.sum() * grid.cell_area)


def parse_init(text: str, model: model_core.ModelSpec,
               grid: geometry.Grid) -> StateFields:
    """Initial condition from "point:x,y", "gaussian:x,y,width" or
    "band:y0,y1", optionally suffixed with "@state" to load one state."""
    shape, _, state = text.partition("@")
    kind, _, arguments = shape.partition(":")
    numbers = [float(value) for value in arguments.split(",") if value]

    if kind == "point" and len(numbers) == 2:
        profile = point_profile(grid, *numbers)
    elif kind == "gaussian" and len(numbers) == 3:
        profile = gaussian_profile(grid, *numbers)
    elif kind == "band" and len(numbers) == 2:
        profile = band_profile(grid, *numbers)
    else:
        raise ValueError(f"Invalid initial condition: {text}")

    state = int(state) if state else None
    return StateFields(distribute(model, profile, state), grid)
