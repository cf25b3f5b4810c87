import dataclasses
import logging
import multiprocessing

import numpy as np

import model as model_core
import sojourn
import spectral

MAX_STEPS = 10**7

# Cycles per RNG stream. Streams are keyed by (seed, block index), so the
# sample stream does not depend on how blocks are spread over workers.
BLOCK_SIZE = 4096


class RunawayCycleError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class SojournModel:
    laws: tuple[sojourn.Sojourn, ...]
    jump_probs: np.ndarray
    base_state: int

    def __post_init__(self):
        jump_probs = np.array(self.jump_probs, dtype=float)
        n = len(self.laws)

        if jump_probs.shape != (n, n):
            raise model_core.ModelError(
                f"Jump probabilities {jump_probs.shape} do not match "
                f"{n} sojourn laws")
        if np.any(jump_probs < 0) or np.any(jump_probs > 1):
            raise model_core.ModelError("Jump probabilities outside [0, 1]")
        if np.abs(jump_probs.sum(axis=0) - 1).max() > 1e-12 * n:
            raise model_core.ModelError(
                "Jump probability columns do not sum to 1")
        if not 0 <= self.base_state < n:
            raise model_core.ModelError(
                f"Invalid base state: {self.base_state}")

        # Finite and irreducible, hence positive recurrent
        unreachable = model_core.unreachable_states(jump_probs)
        if unreachable:
            raise model_core.ReducibleError(
                f"Embedded chain not irreducible: states {unreachable}")

        jump_probs.setflags(write=False)
        object.__setattr__(self, "laws", tuple(self.laws))
        object.__setattr__(self, "jump_probs", jump_probs)
        object.__setattr__(self, "base_state", int(self.base_state))

    @property
    def n_states(self) -> int:
        return len(self.laws)

    @property
    def cumulative(self) -> np.ndarray:
        cumulative = np.cumsum(self.jump_probs, axis=0)
        return cumulative / cumulative[-1:, :]


@dataclasses.dataclass(frozen=True)
class CycleSample:
    delta_t: float
    delta_x: float
    n_steps: int


@dataclasses.dataclass(frozen=True, eq=False)
class CycleSamples:
    delta_t: np.ndarray
    delta_x: np.ndarray
    n_steps: np.ndarray

    @classmethod
    def from_samples(cls, samples):
        if isinstance(samples, CycleSamples):
            return samples

        samples = list(samples)
        return cls(np.array([sample.delta_t for sample in samples], float),
                   np.array([sample.delta_x for sample in samples], float),
                   np.array([sample.n_steps for sample in samples], int))

    def __len__(self):
        return len(self.delta_t)

    def __getitem__(self, index: int) -> CycleSample:
        return CycleSample(float(self.delta_t[index]),
                           float(self.delta_x[index]),
                           int(self.n_steps[index]))

    def __iter__(self):
        for index in range(len(self)):
            yield self[index]


@dataclasses.dataclass(frozen=True)
class RenewalEstimate:
    v_eff: float
    sigma_eff: float
    v_err: float
    sigma_err: float
    n_cycles: int
    moments: dict

    def effective(self) -> spectral.EffectiveTransport:
        return spectral.EffectiveTransport(self.v_eff,
                                           max(self.sigma_eff, 0.0),
                                           spectral.Method.RENEWAL,
                                           self.v_err, self.sigma_err)


@dataclasses.dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    positions: np.ndarray
    states: np.ndarray


def sojourn_from_model(model: model_core.ModelSpec,
                       base_state: int | None = None,
                       kind: str = "exponential") -> SojournModel:
    if model.n_states == 1:
        # A lone state never leaves: one sojourn spans the whole path
        return SojournModel((sojourn.Deterministic(np.inf), ), [[1.0]], 0)

    chain = model_core.embedded_chain(model)

    if base_state is None:
        pi = model_core.stationary_distribution(model).pi
        base_state = int(np.argmax(pi))

    laws = tuple(
        sojourn.from_exit_rate(kind, rate) for rate in chain.exit_rates)
    logging.debug(f"Sojourn laws {laws}, base state {base_state}")

    return SojournModel(laws, chain.jump_probs, base_state)


def _displacements(states: np.ndarray, taus: np.ndarray, speeds: np.ndarray,
                   diffusivities: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(len(states))
    return (speeds[states] * taus +
            np.sqrt(2 * diffusivities[states] * taus) * noise)


def _sojourns(laws, states: np.ndarray,
              rng: np.random.Generator) -> np.ndarray:
    taus = np.empty(len(states))
    for state in np.unique(states):
        mask = states == state
        taus[mask] = laws[state].sample(rng, int(mask.sum()))
    return taus


def _jumps(states: np.ndarray, cumulative: np.ndarray,
           rng: np.random.Generator) -> np.ndarray:
    draws = rng.random(len(states))
    return np.sum(draws[np.newaxis, :] >= cumulative[:, states], axis=0)


def step_displacement(state: int, tau: float, model: model_core.ModelSpec,
                      rng: np.random.Generator) -> float:
    if not tau > 0:
        raise ValueError(f"Sojourn must be positive, got {tau}")

    return float(
        _displacements(np.array([state]), np.array([float(tau)]),
                       model.speeds, model.diffusivities, rng)[0])


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed,
                                                counter=block << 128))


def _simulate_block(task) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    sojourn_model, speeds, diffusivities, seed, block, count, max_steps = task

    rng = block_rng(seed, block)
    base = sojourn_model.base_state
    cumulative = sojourn_model.cumulative

    state = np.full(count, base)
    delta_t = np.zeros(count)
    delta_x = np.zeros(count)
    n_steps = np.zeros(count, dtype=np.int64)

    # All cycles of a block start together, so active ones share a step count
    active = np.arange(count)
    steps = 0
    while active.size:
        steps += 1
        if steps > max_steps:
            raise RunawayCycleError(
                f"{active.size} cycle(s) exceeded {max_steps} steps "
                f"without returning to state {base}")

        current = state[active]
        taus = _sojourns(sojourn_model.laws, current, rng)
        xis = _displacements(current, taus, speeds, diffusivities, rng)

        delta_t[active] += taus
        delta_x[active] += xis
        n_steps[active] += 1

        following = _jumps(current, cumulative, rng)
        state[active] = following
        active = active[following != base]

    return delta_t, delta_x, n_steps


def simulate_cycles(sojourn_model: SojournModel,
                    model: model_core.ModelSpec,
                    n_cycles: int,
                    seed: int,
                    workers: int = 1,
                    max_steps: int = MAX_STEPS) -> CycleSamples:
    if n_cycles < 1:
        raise ValueError(f"Need at least one cycle, got {n_cycles}")
    if sojourn_model.n_states != model.n_states:
        raise model_core.ModelError("Sojourn model and model disagree "
                                    "on the number of states")

    tasks = []
    for block, start in enumerate(range(0, n_cycles, BLOCK_SIZE)):
        count = min(BLOCK_SIZE, n_cycles - start)
        tasks.append((sojourn_model, model.speeds, model.diffusivities, seed,
                      block, count, max_steps))

    logging.debug(f"Simulating {n_cycles} cycles in {len(tasks)} blocks "
                  f"on {workers} worker(s)")

    if workers > 1 and len(tasks) > 1:
        with multiprocessing.Pool(min(workers, len(tasks))) as pool:
            results = pool.map(_simulate_block, tasks)
    else:
        results = [_simulate_block(task) for task in tasks]

    return CycleSamples(np.concatenate([result[0] for result in results]),
                        np.concatenate([result[1] for result in results]),
                        np.concatenate([result[2] for result in results]))


def _moment_estimates(x: np.ndarray, t: np.ndarray) -> tuple[float, float]:
    mean_x, mean_t = x.mean(), t.mean()
    covariance = np.cov(x, t)

    v_eff = mean_x / mean_t
    sigma_eff = (covariance[0, 0] + v_eff**2 * covariance[1, 1] -
                 2 * v_eff * covariance[0, 1]) / (2 * mean_t)
    return float(v_eff), float(sigma_eff)


def _delta_method_errors(x: np.ndarray, t: np.ndarray) -> tuple[float, float]:
    # Influence functions of both estimators on the raw moment vector
    # (E X, E T, E X^2, E T^2, E XT)
    a, b = x.mean(), t.mean()
    var_t = np.mean(t * t) - b * b
    cov = np.mean(x * t) - a * b
    var_x = np.mean(x * x) - a * a

    v = a / b
    numerator = var_x + v**2 * var_t - 2 * v * cov
    d_numerator_dv = 2 * v * var_t - 2 * cov

    grad_v = np.array([1 / b, -a / b**2, 0.0, 0.0, 0.0])

    grad_n = np.array([
        -2 * a + d_numerator_dv / b + 2 * v * b,
        -2 * v**2 * b - d_numerator_dv * a / b**2 + 2 * v * a,
        1.0,
        v**2,
        -2 * v,
    ])
    grad_sigma = grad_n / (2 * b)
    grad_sigma[1] -= numerator / (2 * b**2)

    centred = np.column_stack([x, t, x * x, t * t, x * t])
    centred -= centred.mean(axis=0)

    n = len(x)
    v_err = np.std(centred @ grad_v, ddof=1) / np.sqrt(n)
    sigma_err = np.std(centred @ grad_sigma, ddof=1) / np.sqrt(n)
    return float(v_err), float(sigma_err)


def estimate_effective(samples,
                       bootstrap: int = 0,
                       seed: int = 0) -> RenewalEstimate:
    samples = CycleSamples.from_samples(samples)
    n = len(samples)
    if n < 2:
        raise ValueError(f"Need at least 2 cycles, got {n}")

    x, t = samples.delta_x, samples.delta_t
    covariance = np.cov(x, t)

    if covariance[1, 1] == 0:
        logging.warning("Cycle durations have zero variance "
                        "(deterministic sojourns)")

    v_eff, sigma_eff = _moment_estimates(x, t)

    if bootstrap > 0:
        rng = np.random.default_rng(seed)
        replicates = []
        for _ in range(bootstrap):
            index = rng.integers(0, n, n)
            replicates.append(_moment_estimates(x[index], t[index]))
        v_err, sigma_err = np.std(np.array(replicates), axis=0, ddof=1)
        v_err, sigma_err = float(v_err), float(sigma_err)
    else:
        v_err, sigma_err = _delta_method_errors(x, t)

    moments = {
        "mean_dt": float(t.mean()),
        "mean_dx": float(x.mean()),
        "var_dt": float(covariance[1, 1]),
        "var_dx": float(covariance[0, 0]),
        "cov_dx_dt": float(covariance[0, 1]),
        "mean_steps": float(samples.n_steps.mean()),
    }

    return RenewalEstimate(v_eff, sigma_eff, v_err, sigma_err, n, moments)


def simulate_path(sojourn_model: SojournModel,
                  model: model_core.ModelSpec,
                  t_max: float,
                  seed: int,
                  initial_state: int | None = None,
                  max_steps: int = MAX_STEPS) -> Trajectory:
    if not t_max > 0:
        raise ValueError(f"t_max must be positive, got {t_max}")

    rng = np.random.default_rng(seed)
    cumulative = sojourn_model.cumulative

    state = sojourn_model.base_state if initial_state is None else initial_state
    clock, position = 0.0, 0.0
    times, positions, states = [0.0], [0.0], [state]

    for _ in range(max_steps):
        tau = float(sojourn_model.laws[state].sample(rng, 1)[0])
        last = clock + tau >= t_max
        if last:
            tau = t_max - clock

        position += step_displacement(state, tau, model,
                                      rng) if tau > 0 else 0.0
        clock = t_max if last else clock + tau

        if not last:
            state = int(_jumps(np.array([state]), cumulative, rng)[0])

        times.append(clock)
        positions.append(position)
        states.append(state)

        if last:
            return Trajectory(np.array(times), np.array(positions),
                              np.array(states))

    raise RunawayCycleError(f"Path exceeded {max_steps} jumps before "
                            f"t_max={t_max}")


def occupancy(trajectory: Trajectory, n_states: int) -> np.ndarray:
    durations = np.diff(trajectory.times)
    totals = np.bincount(trajectory.states[:-1],
                         weights=durations,
                         minlength=n_states)
    return totals / durations.sum()


def ensemble_positions(sojourn_model: SojournModel,
                       model: model_core.ModelSpec,
                       times,
                       n_paths: int,
                       seed: int,
                       initial_state: int | None = None) -> np.ndarray:
    """Positions of n_paths independent particles at the given times.

    Sojourns that straddle an observation time are split there; the two
    Brownian pieces are independent, so the split is exact.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or np.any(times <= 0) or np.any(np.diff(times) <= 0):
        raise ValueError("Observation times must be positive and increasing")

    rng = np.random.default_rng(seed)
    laws = sojourn_model.laws
    cumulative = sojourn_model.cumulative
    speeds, diffusivities = model.speeds, model.diffusivities

    first = sojourn_model.base_state if initial_state is None else initial_state
    state = np.full(n_paths, first)
    clock = np.zeros(n_paths)
    position = np.zeros(n_paths)
    remaining = _sojourns(laws, state, rng)
    next_obs = np.zeros(n_paths, dtype=np.int64)
    observed = np.empty((n_paths, len(times)))

    active = np.arange(n_paths)
    while active.size:
        target = times[next_obs[active]]
        to_target = target - clock[active]
        observe = to_target <= remaining[active]
        segment = np.where(observe, to_target, remaining[active])

        position[active] += _displacements(state[active], segment, speeds,
                                           diffusivities, rng)
        clock[active] = np.where(observe, target, clock[active] + segment)
        remaining[active] -= segment

        recorded = active[observe]
        observed[recorded, next_obs[recorded]] = position[recorded]
        next_obs[recorded] += 1

        jumpers = active[~observe]
        if jumpers.size:
            state[jumpers] = _jumps(state[jumpers], cumulative, rng)
            remaining[jumpers] = _sojourns(laws, state[jumpers], rng)

        active = active[next_obs[active] < len(times)]

    return observed


@dataclasses.dataclass(frozen=True, eq=False)
class MsdCurve:
    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    msd: np.ndarray
    msd_err: np.ndarray


def msd(sojourn_model: SojournModel, model: model_core.ModelSpec, times,
        n_paths: int, seed: int) -> MsdCurve:
    positions = ensemble_positions(sojourn_model, model, times, n_paths, seed)
    squares = positions**2

    return MsdCurve(np.asarray(times, dtype=float), positions.mean(axis=0),
                    positions.var(axis=0, ddof=1), squares.mean(axis=0),
                    squares.std(axis=0, ddof=1) / np.sqrt(n_paths))
