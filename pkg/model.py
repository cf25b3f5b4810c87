import dataclasses
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.csgraph

# Relative tolerance on column sums, scaled by the largest rate.
CONSERVATION_TOLERANCE = 1e-12


class ModelError(ValueError):
    pass


class ReducibleError(ModelError):
    pass


class ZeroExitRateError(ModelError):

    def __init__(self, states: list[int]):
        super().__init__(f"Zero exit rate in state(s) {states}")
        self.states = states


@dataclasses.dataclass(frozen=True, eq=False)
class ModelSpec:
    speeds: np.ndarray
    diffusivities: np.ndarray
    rates: np.ndarray
    state_labels: tuple[str, ...] | None = None
    binding_states: tuple[int, ...] | None = None

    def __post_init__(self):
        speeds = np.array(self.speeds, dtype=float).reshape(-1)
        diffusivities = np.array(self.diffusivities,
                                 dtype=float).reshape(-1)
        rates = np.array(self.rates, dtype=float)

        n = speeds.size
        if n == 0:
            raise ModelError("Model needs at least one state")
        if diffusivities.size != n or rates.shape != (n, n):
            raise ModelError(
                f"Inconsistent shapes: {n} speeds, {diffusivities.size} "
                f"diffusivities, rates {rates.shape}")
        if self.state_labels is not None and len(self.state_labels) != n:
            raise ModelError("Wrong number of state labels")

        for array in (speeds, diffusivities, rates):
            array.setflags(write=False)

        object.__setattr__(self, "speeds", speeds)
        object.__setattr__(self, "diffusivities", diffusivities)
        object.__setattr__(self, "rates", rates)

        if self.state_labels is not None:
            object.__setattr__(self, "state_labels",
                               tuple(self.state_labels))
        if self.binding_states is not None:
            object.__setattr__(self, "binding_states",
                               tuple(sorted(set(self.binding_states))))

    @property
    def n_states(self) -> int:
        return self.speeds.size

    @property
    def C(self) -> np.ndarray:
        return np.diag(self.speeds)

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.diffusivities)

    @property
    def bound_states(self) -> tuple[int, ...]:
        # States reached by binding to a filament
        if self.binding_states is not None:
            return self.binding_states
        return tuple(int(j) for j in np.flatnonzero(self.speeds))

    def label(self, state: int) -> str:
        if self.state_labels is None:
            return str(state)
        return self.state_labels[state]

    def with_rates(self, rates: np.ndarray):
        return dataclasses.replace(self, rates=rates)

    def scaled(self, factor: float):
        return self.with_rates(self.rates * factor)


@dataclasses.dataclass(frozen=True)
class Violation:
    invariant: str
    indices: tuple
    message: str

    def __str__(self):
        return self.message


@dataclasses.dataclass(frozen=True, eq=False)
class StationaryDistribution:
    pi: np.ndarray


@dataclasses.dataclass(frozen=True, eq=False)
class EmbeddedChain:
    exit_rates: np.ndarray
    jump_probs: np.ndarray


def conservative_rates(rates: np.ndarray) -> np.ndarray:
    """Copy of rates with each diagonal entry reset to minus its column's
    off-diagonal sum."""
    rates = np.array(rates, dtype=float)
    np.fill_diagonal(rates, 0.0)
    np.fill_diagonal(rates, -rates.sum(axis=0))
    return rates


def unreachable_states(rates: np.ndarray) -> list[int]:
    graph = scipy.sparse.csr_matrix(
        ((np.abs(rates) > 0) & ~np.eye(len(rates), dtype=bool)).astype(float))

    # An edge j -> i exists when rates[i][j] > 0, so walk the transpose
    forward = scipy.sparse.csgraph.breadth_first_order(
        graph.T, 0, directed=True, return_predecessors=False)
    backward = scipy.sparse.csgraph.breadth_first_order(
        graph, 0, directed=True, return_predecessors=False)

    reached = set(forward.tolist()) & set(backward.tolist())
    return [j for j in range(len(rates)) if j not in reached]


def validate(model: ModelSpec) -> list[Violation]:
    violations: list[Violation] = []
    rates = model.rates
    n = model.n_states

    scale = max(1.0, float(np.abs(rates).max()))
    for j, total in enumerate(rates.sum(axis=0)):
        if abs(total) > CONSERVATION_TOLERANCE * scale * n:
            violations.append(
                Violation("conservative", (j, ),
                          f"column {j} not conservative (sum {total:.3g})"))

    off_diagonal = ~np.eye(n, dtype=bool)
    for i, j in zip(*np.nonzero((rates < 0) & off_diagonal)):
        violations.append(
            Violation("nonnegative_rates", (int(i), int(j)),
                      f"negative rate from state {j} to state {i}"))

    for j in np.flatnonzero(np.diag(rates) > 0):
        violations.append(
            Violation("nonpositive_diagonal", (int(j), ),
                      f"positive diagonal entry in state {j}"))

    for j in np.flatnonzero(model.diffusivities < 0):
        violations.append(
            Violation("nonnegative_diffusivity", (int(j), ),
                      f"negative diffusivity in state {j}"))

    if not np.any(model.speeds) and not np.any(model.diffusivities):
        violations.append(
            Violation("transport", (),
                      "all speeds and diffusivities are zero"))

    unreachable = unreachable_states(rates)
    if unreachable:
        violations.append(
            Violation("irreducible", tuple(unreachable),
                      f"not irreducible: states {unreachable} "
                      f"do not communicate with state 0"))

    return violations


def check(model: ModelSpec):
    violations = validate(model)
    if not violations:
        return

    logging.debug(f"Model violations: {[str(v) for v in violations]}")

    message = "; ".join(str(violation) for violation in violations)
    if all(violation.invariant == "irreducible" for violation in violations):
        raise ReducibleError(message)
    raise ModelError(message)


def bordered_solve(matrix: np.ndarray, border: np.ndarray, rhs: np.ndarray,
                   constraint: float) -> np.ndarray:
    """Solve [[M, b], [b^T, 0]] (x, mu) = (rhs, constraint) and return x.

    Inverts a rank-one-deficient M on its range: the border row fixes the
    component along the left null vector b.
    """
    n = len(matrix)
    system = np.zeros((n + 1, n + 1))
    system[:n, :n] = matrix
    system[:n, n] = border
    system[n, :n] = border

    solution = scipy.linalg.solve(system, np.append(rhs, constraint))
    return solution[:n]


def stationary_distribution(model: ModelSpec) -> StationaryDistribution:
    check(model)

    n = model.n_states
    try:
        pi = bordered_solve(model.rates, np.ones(n), np.zeros(n), 1.0)
    except (scipy.linalg.LinAlgError, ValueError) as error:
        raise ReducibleError(f"Null space of rates is not 1-D: {error}")

    if np.any(pi < -1e-10):
        raise ReducibleError(f"Null vector has negative entries: {pi}")

    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()

    residual = np.abs(model.rates @ pi).max()
    if residual > 1e-10 * max(1.0, np.abs(model.rates).max()):
        raise ReducibleError(f"Stationary residual too large: {residual}")

    pi.setflags(write=False)
    return StationaryDistribution(pi)


def embedded_chain(model: ModelSpec) -> EmbeddedChain:
    exit_rates = -np.diag(model.rates).copy()

    absorbing = [int(j) for j in np.flatnonzero(exit_rates <= 0)]
    if absorbing:
        raise ZeroExitRateError(absorbing)

    jump_probs = model.rates / exit_rates[np.newaxis, :]
    np.fill_diagonal(jump_probs, 0.0)

    return EmbeddedChain(exit_rates, jump_probs)


def reconstruct(chain: EmbeddedChain) -> np.ndarray:
    rates = chain.jump_probs * chain.exit_rates[np.newaxis, :]
    np.fill_diagonal(rates, -chain.exit_rates)
    return rates


def two_state(c: float, d: float, beta1: float, beta2: float) -> ModelSpec:
    """Moving state 0 (speed c) and diffusing state 1 (diffusivity d);
    beta1 unbinds, beta2 binds."""
    return ModelSpec(speeds=[c, 0.0],
                     diffusivities=[0.0, d],
                     rates=[[-beta1, beta2], [beta1, -beta2]],
                     state_labels=("moving", "diffusing"),
                     binding_states=(0, ))


def random_model(n_states: int,
                 rng: np.random.Generator,
                 low: float = 1e-1,
                 high: float = 1e1) -> ModelSpec:
    """Dense irreducible model with log-uniform rates, speeds and
    diffusivities; a third of the states are paused or pure transport."""
    rates = np.exp(rng.uniform(np.log(low), np.log(high), (n_states, ) * 2))
    rates = conservative_rates(rates)

    speeds = rng.uniform(-2.0, 2.0, n_states)
    diffusivities = np.exp(rng.uniform(np.log(low), np.log(high), n_states))

    kinds = rng.integers(0, 3, n_states)
    speeds[kinds == 1] = 0.0
    diffusivities[kinds == 2] = 0.0
    if not np.any(speeds) and not np.any(diffusivities):
        diffusivities[0] = 1.0

    return ModelSpec(speeds, diffusivities, rates)


def _state_index(reference, labels: list[str]) -> int:
    if isinstance(reference, int):
        if not 0 <= reference < len(labels):
            raise ModelError(f"State index out of range: {reference}")
        return reference

    if reference not in labels:
        raise ModelError(f"Unknown state: {reference}")
    return labels.index(reference)


def parse_model(document: dict) -> ModelSpec:
    states = document.get("states")
    if not states:
        raise ModelError("Model file has no states")

    labels = [str(state.get("label", j)) for j, state in enumerate(states)]
    if len(set(labels)) != len(labels):
        raise ModelError(f"Duplicate state labels: {labels}")

    n = len(states)
    rates = np.zeros((n, n))
    seen: set[tuple[int, int]] = set()

    for entry in document.get("rates", []):
        origin = _state_index(entry["from"], labels)
        target = _state_index(entry["to"], labels)
        rate = float(entry["rate"])

        if origin == target:
            raise ModelError(f"Self transition on state {labels[origin]}")
        if (origin, target) in seen:
            raise ModelError(f"Duplicate rate from {labels[origin]} "
                             f"to {labels[target]}")
        if rate < 0:
            raise ModelError(f"Negative rate from {labels[origin]} "
                             f"to {labels[target]}")

        seen.add((origin, target))
        rates[target, origin] = rate

    binding = document.get("binding")
    if binding is not None:
        binding = tuple(_state_index(state, labels) for state in binding)

    return ModelSpec(
        speeds=[float(state.get("speed", 0.0)) for state in states],
        diffusivities=[float(state.get("diffusivity", 0.0))
                       for state in states],
        rates=conservative_rates(rates),
        state_labels=tuple(labels),
        binding_states=binding)


def load_model(path: str) -> ModelSpec:
    with open(path, "rb") as model_file:
        document = tomllib.load(model_file)

    model = parse_model(document)
    logging.debug(f"Loaded {model.n_states}-state model from {path}")
    return model


def model_as_dict(model: ModelSpec) -> dict:
    labels = [model.label(j) for j in range(model.n_states)]

    document = {
        "states": [{
            "label": labels[j],
            "speed": float(model.speeds[j]),
            "diffusivity": float(model.diffusivities[j]),
        } for j in range(model.n_states)],
        "rates": [{
            "from": labels[j],
            "to": labels[i],
            "rate": float(model.rates[i, j]),
        } for j in range(model.n_states) for i in range(model.n_states)
                  if i != j and model.rates[i, j] != 0],
    }
    if model.binding_states is not None:
        document["binding"] = [labels[j] for j in model.binding_states]
    return document


def dump_model(model: ModelSpec) -> str:
    document = model_as_dict(model)
    text = ""

    if "binding" in document:
        binding = ", ".join(f'"{label}"' for label in document["binding"])
        text += f"binding = [{binding}]\n\n"

    for state in document["states"]:
        text += "[[states]]\n"
        text += f"label = \"{state['label']}\"\n"
        text += f"speed = {state['speed']!r}\n"
        text += f"diffusivity = {state['diffusivity']!r}\n\n"

    for rate in document["rates"]:
        text += "[[rates]]\n"
        text += f"from = \"{rate['from']}\"\n"
        text += f"to = \"{rate['to']}\"\n"
        text += f"rate = {rate['rate']!r}\n\n"

    return text
