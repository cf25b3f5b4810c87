import dataclasses
import itertools
import logging
import multiprocessing
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
import scipy.optimize

import geometry
import model as model_core
import pde
import spectral

BOUNDS = (1e-4, 1e4)
MAX_ITERATIONS = 500
# Simplex diameter, in log-parameter units, that ends a local search
SIMPLEX_TOLERANCE = 1e-4
SIMPLEX_STEP = 0.2
TOP_K = 5

# Sweep rows within this share of the objective range above the best
# one form the valley used by the identifiability diagnostic
VALLEY_FRACTION = 0.05
FLAT_SPAN = 0.5

# Local optima closer than this in log-parameter space are merged
DISTINCT_OPTIMA = 1e-2


class AllStartsFailedError(RuntimeError):

    def __init__(self, reasons: list[str]):
        super().__init__("All starts failed: " + "; ".join(reasons))
        self.reasons = reasons


@dataclasses.dataclass(frozen=True, eq=False)
class FrapProtocol:
    grid: geometry.Grid
    center: tuple[float, float]
    radius: float
    times: np.ndarray
    depth: float = 0.0
    # Postbleach (radius, intensity) samples relative to the prebleach level
    profile: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", times)

        domain = self.grid.domain
        x, y = self.center
        if not (self.radius > 0 and domain.x0 <= x - self.radius
                and x + self.radius <= domain.x1
                and domain.y0 <= y - self.radius
                and y + self.radius <= domain.y1):
            raise ValueError("Bleach spot must lie inside the domain")
        if not 0 <= self.depth < 1:
            raise ValueError(f"Bleach depth outside [0, 1): {self.depth}")
        if times.ndim != 1 or times.size == 0 or np.any(times < 0) or np.any(
                np.diff(times) <= 0):
            raise ValueError("Observation times must be strictly increasing")

    def radii(self) -> np.ndarray:
        xs, ys = np.meshgrid(self.grid.x_centers, self.grid.y_centers)
        return np.hypot(xs - self.center[0], ys - self.center[1])

    def spot_mask(self) -> np.ndarray:
        mask = self.radii() <= self.radius
        if not mask.any():
            raise ValueError("Bleach spot contains no cell centre")
        return mask

    def postbleach(self) -> np.ndarray:
        """Intensity right after bleaching, prebleach plateau = 1."""
        radii = self.radii()
        if self.profile is not None:
            radius, intensity = self.profile
            return np.interp(radii, radius, intensity, right=1.0)
        return np.where(radii <= self.radius, 1.0 - self.depth, 1.0)


@dataclasses.dataclass(frozen=True, eq=False)
class RecoveryCurve:
    times: np.ndarray
    intensities: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        intensities = np.asarray(self.intensities, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "intensities", intensities)

        if times.shape != intensities.shape:
            raise ValueError("Times and intensities differ in length")
        if np.any(intensities < 0):
            raise ValueError("Negative intensity in recovery curve")
        if self.weights is not None:
            weights = np.asarray(self.weights, dtype=float)
            if weights.shape != times.shape or np.any(weights < 0):
                raise ValueError("Invalid measurement weights")
            object.__setattr__(self, "weights", weights)


class Template:
    """A model with named free entries, each "speed:i", "diffusivity:i"
    or "rate:j>i" (the rate from state j to state i)."""

    def __init__(self, base: model_core.ModelSpec, entries: dict[str, str]):
        self.base = base
        self.entries = dict(entries)
        self.names = tuple(entries)

        for name, entry in self.entries.items():
            kind, _, index = entry.partition(":")
            if kind not in ("speed", "diffusivity", "rate") or not index:
                raise ValueError(f"Invalid template entry {name}={entry}")

            if kind == "rate":
                origin, _, target = index.partition(">")
                if not target or int(origin) == int(target):
                    # Diagonal is fixed by the off-diagonal rates
                    raise ValueError(f"Invalid template rate {name}={entry}")

    def build(self, values) -> model_core.ModelSpec:
        speeds = np.array(self.base.speeds)
        diffusivities = np.array(self.base.diffusivities)
        rates = np.array(self.base.rates)

        for name, value in zip(self.names, values):
            kind, _, index = self.entries[name].partition(":")
            if kind == "speed":
                speeds[int(index)] = value
            elif kind == "diffusivity":
                diffusivities[int(index)] = value
            else:
                origin, _, target = index.partition(">")
                rates[int(target), int(origin)] = value

        return dataclasses.replace(
            self.base,
            speeds=speeds,
            diffusivities=diffusivities,
            rates=model_core.conservative_rates(rates))

    def values(self, model: model_core.ModelSpec) -> np.ndarray:
        values = []
        for name in self.names:
            kind, _, index = self.entries[name].partition(":")
            if kind == "speed":
                values.append(model.speeds[int(index)])
            elif kind == "diffusivity":
                values.append(model.diffusivities[int(index)])
            else:
                origin, _, target = index.partition(">")
                values.append(model.rates[int(target), int(origin)])
        return np.array(values, dtype=float)


TWO_STATE = Template(
    model_core.two_state(1.0, 1.0, 1.0, 1.0), {
        "d": "diffusivity:1",
        "c": "speed:0",
        "beta1": "rate:0>1",
        "beta2": "rate:1>0",
    })

REACTION_DIFFUSION = Template(
    model_core.two_state(0.0, 1.0, 1.0, 1.0), {
        "d": "diffusivity:1",
        "beta1": "rate:0>1",
        "beta2": "rate:1>0",
    })


@dataclasses.dataclass(frozen=True, eq=False)
class SweepTable:
    names: tuple[str, ...]
    points: np.ndarray
    objectives: np.ndarray
    reasons: list[str]
    # Position of each ranked row in the original grid order
    index: np.ndarray

    def __len__(self):
        return len(self.objectives)

    def best(self, count: int) -> np.ndarray:
        finite = np.isfinite(self.objectives)
        return self.points[finite][:count]


@dataclasses.dataclass(frozen=True, eq=False)
class LocalOptimum:
    start: np.ndarray
    params: np.ndarray
    objective: float
    iterations: int
    converged: bool
    message: str
    history: list[float]


@dataclasses.dataclass(frozen=True)
class RunStatistics:
    state: int
    label: str
    run_time: float
    run_length: float


@dataclasses.dataclass(frozen=True)
class DerivedQuantities:
    runs: list[RunStatistics]
    effective: spectral.EffectiveTransport


@dataclasses.dataclass(frozen=True, eq=False)
class FitResult:
    names: tuple[str, ...]
    params: dict
    bounds: tuple[float, float]
    objective: float
    optima: list[LocalOptimum]
    table: SweepTable | None
    derived: DerivedQuantities
    flat: list[str]


def synthesize(model: model_core.ModelSpec,
               protocol: FrapProtocol,
               config: pde.SolverConfig | None = None,
               medium=None) -> RecoveryCurve:
    pi = model_core.stationary_distribution(model).pi
    postbleach = protocol.postbleach()
    initial = pde.StateFields(pi[:, np.newaxis, np.newaxis] * postbleach,
                              protocol.grid)

    times = tuple(float(t) for t in protocol.times)
    if config is None:
        config = pde.SolverConfig(t_end=times[-1], snapshot_times=times)
    else:
        config = dataclasses.replace(config,
                                     t_end=times[-1],
                                     snapshot_times=times)

    result = pde.run(initial, model if medium is None else medium, config)

    # Prebleach concentration is 1 everywhere, so its spot integral is
    # the number of spot cells
    mask = protocol.spot_mask()
    prebleach = mask.sum()
    intensities = [
        snapshot.total[mask].sum() / prebleach
        for snapshot in result.snapshots
    ]
    return RecoveryCurve(protocol.times, np.array(intensities))


def objective(curve: RecoveryCurve, data: RecoveryCurve) -> float:
    weights = np.ones_like(data.intensities)
    if data.weights is not None:
        weights = data.weights
    return float(np.sum(weights * (curve.intensities - data.intensities)**2))


def _evaluate(task) -> tuple[float, str]:
    values, data, protocol, template, config = task
    try:
        model = template.build(values)
        model_core.check(model)
        curve = synthesize(model, protocol, config)
        return objective(curve, data), ""

    except Exception as error:
        reason = f"{type(error).__name__}: {error}"
        logging.warning(f"Evaluation at {dict(zip(template.names, values))} "
                        f"failed: {reason}")
        return np.inf, reason


def _map(function, tasks, workers: int):
    if workers > 1 and len(tasks) > 1:
        with multiprocessing.Pool(min(workers, len(tasks))) as pool:
            return pool.map(function, tasks)
    return [function(task) for task in tasks]


def _matching(protocol: FrapProtocol, data: RecoveryCurve) -> FrapProtocol:
    return dataclasses.replace(protocol, times=data.times)


def parse_grid(text: str) -> dict[str, np.ndarray]:
    """Parse "d=1e-2:1e2:5,c=..." into log-spaced values per parameter."""
    grid = {}
    for item in text.split(","):
        name, _, spec = item.strip().partition("=")
        try:
            low, high, count = spec.split(":")
            low, high, count = float(low), float(high), int(count)
        except ValueError:
            raise ValueError(f"Invalid grid entry: {item}")

        if not (0 < low <= high) or count < 1:
            raise ValueError(f"Invalid grid range: {item}")
        grid[name] = np.logspace(np.log10(low), np.log10(high), count)
    return grid


def sweep(data: RecoveryCurve,
          protocol: FrapProtocol,
          template: Template,
          grid: dict[str, np.ndarray],
          config: pde.SolverConfig | None = None,
          workers: int = 1) -> SweepTable:
    missing = set(template.names) - set(grid)
    if missing:
        raise ValueError(f"Sweep grid lacks parameters {sorted(missing)}")

    protocol = _matching(protocol, data)
    axes = [np.asarray(grid[name], dtype=float) for name in template.names]
    points = np.array(list(itertools.product(*axes)))

    logging.info(f"Sweeping {len(points)} points over {template.names}")
    results = _map(_evaluate,
                   [(point, data, protocol, template, config)
                    for point in points], workers)

    objectives = np.array([result[0] for result in results])
    order = np.argsort(objectives, kind="stable")

    return SweepTable(template.names, points[order], objectives[order],
                      [results[k][1] for k in order], order)


def _local_fit(task) -> LocalOptimum:
    (start, data, protocol, template, bounds, max_iterations, tolerance,
     config) = task

    cache: dict[tuple, float] = {}

    def cost(log_values):
        key = tuple(log_values)
        if key not in cache:
            cache[key] = _evaluate(
                (np.exp(log_values), data, protocol, template, config))[0]
        return cache[key]

    history: list[float] = []

    def record(log_values):
        history.append(cost(log_values))

    low, high = np.log(bounds[0]), np.log(bounds[1])
    x0 = np.log(start)

    simplex = [x0]
    for k in range(len(x0)):
        vertex = x0.copy()
        vertex[k] += SIMPLEX_STEP if vertex[k] + SIMPLEX_STEP <= high else (
            -SIMPLEX_STEP)
        simplex.append(vertex)

    result = scipy.optimize.minimize(cost,
                                     x0,
                                     method="Nelder-Mead",
                                     bounds=[(low, high)] * len(x0),
                                     callback=record,
                                     options={
                                         "maxiter": max_iterations,
                                         "xatol": tolerance,
                                         "fatol": np.inf,
                                         "initial_simplex": np.array(simplex),
                                     })

    return LocalOptimum(np.asarray(start), np.exp(result.x), float(result.fun),
                        int(result.nit), bool(result.success),
                        str(result.message), history)


def derived_quantities(model: model_core.ModelSpec) -> DerivedQuantities:
    runs = []
    for state in model.bound_states:
        exit_rate = -model.rates[state, state]
        if exit_rate <= 0:
            raise model_core.ZeroExitRateError([state])

        runs.append(
            RunStatistics(state, model.label(state), 1 / exit_rate,
                          abs(model.speeds[state]) / exit_rate))

    return DerivedQuantities(runs, spectral.effective_transport(model))


def flat_valleys(table: SweepTable,
                 fraction: float = VALLEY_FRACTION,
                 span: float = FLAT_SPAN) -> list[str]:
    """Parameters along which near-optimal sweep points spread over at
    least span of the swept log range."""
    finite = np.isfinite(table.objectives)
    if finite.sum() < 2:
        return []

    objectives = table.objectives[finite]
    points = np.log10(table.points[finite])

    best = objectives[0]
    threshold = best + fraction * (np.median(objectives) - best)
    valley = points[objectives <= threshold]

    flat = []
    for k, name in enumerate(table.names):
        swept = np.ptp(points[:, k])
        if swept > 0 and np.ptp(valley[:, k]) >= span * swept:
            flat.append(name)

    if flat:
        logging.warning(f"Flat objective valley along {flat}: "
                        f"parameters not identifiable from this curve")
    return flat


def _distinct(optima: list[LocalOptimum]) -> list[LocalOptimum]:
    kept: list[LocalOptimum] = []
    for optimum in sorted(optima, key=lambda o: o.objective):
        if not np.isfinite(optimum.objective):
            continue
        if all(
                np.abs(np.log(optimum.params) - np.log(other.params)).max() >
                DISTINCT_OPTIMA for other in kept):
            kept.append(optimum)
    return kept


def fit(data: RecoveryCurve,
        protocol: FrapProtocol,
        template: Template,
        start=None,
        table: SweepTable | None = None,
        top_k: int = TOP_K,
        bounds: tuple[float, float] = BOUNDS,
        max_iterations: int = MAX_ITERATIONS,
        tolerance: float = SIMPLEX_TOLERANCE,
        config: pde.SolverConfig | None = None,
        workers: int = 1) -> FitResult:
    starts = []
    if start is not None:
        start = np.asarray(start, dtype=float)
        if np.any(start < bounds[0]) or np.any(start > bounds[1]):
            raise ValueError(f"Start {start} outside bounds {bounds}")
        starts.append(start)
    if table is not None:
        starts.extend(
            np.clip(point, *bounds) for point in table.best(top_k))
    if not starts:
        raise ValueError("Fit needs a start point or a sweep table")

    protocol = _matching(protocol, data)
    logging.info(f"Fitting {template.names} from {len(starts)} start(s)")

    optima = _map(_local_fit, [(point, data, protocol, template, bounds,
                                max_iterations, tolerance, config)
                               for point in starts], workers)

    distinct = _distinct(optima)
    if not distinct:
        raise AllStartsFailedError([
            f"start {dict(zip(template.names, o.start))}: {o.message}"
            for o in optima
        ])

    best = distinct[0]
    return FitResult(template.names, dict(zip(template.names, best.params)),
                     bounds, best.objective, distinct, table,
                     derived_quantities(template.build(best.params)),
                     flat_valleys(table) if table is not None else [])


def _times(document) -> np.ndarray:
    if isinstance(document, dict):
        return np.linspace(document["start"], document["stop"],
                           int(document["count"]))
    return np.asarray(document, dtype=float)


def load_profile(path: str) -> tuple[np.ndarray, np.ndarray]:
    samples = np.genfromtxt(path, delimiter=",", names=True)
    return (np.atleast_1d(samples["radius"]),
            np.atleast_1d(samples["intensity"]))


def load_protocol(path: str) -> FrapProtocol:
    with open(path, "rb") as protocol_file:
        document = tomllib.load(protocol_file)

    domain = document["domain"]
    grid = geometry.Grid.covering(
        geometry.Rectangle(0.0, float(domain["width"]), 0.0,
                           float(domain["height"])), int(domain["nx"]),
        int(domain["ny"]))

    spot = document["spot"]
    profile = None
    if "profile" in spot:
        profile_path = os.path.join(os.path.dirname(path), spot["profile"])
        profile = load_profile(profile_path)

    return FrapProtocol(grid,
                        tuple(map(float, spot["center"])),
                        float(spot["radius"]),
                        _times(document["times"]),
                        depth=float(spot.get("depth", 0.0)),
                        profile=profile)


def load_curve(path: str) -> RecoveryCurve:
    samples = np.genfromtxt(path, delimiter=",", names=True)
    names = samples.dtype.names or ()
    if not {"time_s", "intensity"} <= set(names):
        raise ValueError(f"FRAP data {path} needs columns time_s, intensity")

    weights = None
    if "weight" in names:
        weights = np.atleast_1d(samples["weight"])
    return RecoveryCurve(np.atleast_1d(samples["time_s"]),
                         np.atleast_1d(samples["intensity"]), weights)
