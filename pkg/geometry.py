import dataclasses
import logging

import numpy as np

import model as model_core

# Net orientation below this fraction of the cell's filament length marks
# the cell as mixed polarity
MIXED_POLARITY = 1e-9

MAX_ATTEMPTS = 100


@dataclasses.dataclass(frozen=True)
class Rectangle:
    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"Empty rectangle: {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def contains(self, point) -> bool:
        x, y = point
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


@dataclasses.dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    dx: float
    dy: float
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or not (self.dx > 0 and self.dy > 0):
            raise ValueError(f"Invalid grid: {self}")

    @classmethod
    def covering(cls, domain: Rectangle, nx: int, ny: int):
        return cls(nx, ny, domain.width / nx, domain.height / ny, domain.x0,
                   domain.y0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.ny, self.nx

    @property
    def domain(self) -> Rectangle:
        return Rectangle(self.x0, self.x0 + self.nx * self.dx, self.y0,
                         self.y0 + self.ny * self.dy)

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def x_centers(self) -> np.ndarray:
        return self.x0 + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def y_centers(self) -> np.ndarray:
        return self.y0 + (np.arange(self.ny) + 0.5) * self.dy


@dataclasses.dataclass(frozen=True)
class FilamentSegment:
    """Straight filament from its minus end to its plus end."""
    minus_end: tuple[float, float]
    plus_end: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "minus_end", tuple(map(float,
                                                        self.minus_end)))
        object.__setattr__(self, "plus_end", tuple(map(float, self.plus_end)))
        if self.length == 0:
            raise ValueError(f"Zero-length segment at {self.minus_end}")

    @property
    def vector(self) -> np.ndarray:
        return np.subtract(self.plus_end, self.minus_end)

    @property
    def length(self) -> float:
        return float(np.hypot(*self.vector))

    @property
    def orientation(self) -> np.ndarray:
        return self.vector / self.length


@dataclasses.dataclass(frozen=True, eq=False)
class NetworkField:
    grid: Grid
    density: np.ndarray
    direction: np.ndarray
    advection: np.ndarray
    lengths: np.ndarray
    mixed: np.ndarray

    @classmethod
    def uniform(cls, grid: Grid, orientation=(0.0, -1.0)):
        orientation = np.asarray(orientation, dtype=float)
        orientation = orientation / np.hypot(*orientation)

        ones = np.ones(grid.shape)
        direction = np.broadcast_to(orientation, grid.shape + (2, )).copy()
        return cls(grid, ones, direction, direction.copy(), ones.copy(),
                   np.zeros(grid.shape, dtype=bool))


def clip_to_rectangle(start, end, domain: Rectangle):
    """Liang-Barsky clip; returns the clipped (start, end) or None."""
    start = np.asarray(start, dtype=float)
    delta = np.asarray(end, dtype=float) - start

    low, high = 0.0, 1.0
    for p, q in ((-delta[0], start[0] - domain.x0),
                 (delta[0], domain.x1 - start[0]),
                 (-delta[1], start[1] - domain.y0),
                 (delta[1], domain.y1 - start[1])):
        if p == 0:
            if q < 0:
                return None
            continue

        ratio = q / p
        if p < 0:
            low = max(low, ratio)
        else:
            high = min(high, ratio)

        if low > high:
            return None

    if low == high:
        return None
    return start + low * delta, start + high * delta


def _lengths(length_dist, rng: np.random.Generator, size: int) -> np.ndarray:
    if np.isscalar(length_dist):
        return np.full(size, float(length_dist))

    low, high = length_dist
    return rng.uniform(low, high, size)


def parallel_network(domain: Rectangle,
                     n_filaments: int,
                     orientation_bias: float,
                     length_dist,
                     seed: int) -> list[FilamentSegment]:
    """Vertical filaments at uniform x, plus end down with probability
    orientation_bias. length_dist is a fixed length or a (low, high) range.
    """
    if n_filaments < 0:
        raise ValueError(f"Negative filament count: {n_filaments}")
    if not 0 <= orientation_bias <= 1:
        raise ValueError(f"Orientation bias outside [0, 1]: "
                         f"{orientation_bias}")

    rng = np.random.default_rng(seed)
    xs = rng.uniform(domain.x0, domain.x1, n_filaments)
    centers = rng.uniform(domain.y0, domain.y1, n_filaments)
    lengths = np.minimum(_lengths(length_dist, rng, n_filaments),
                         domain.height)
    down = rng.random(n_filaments) < orientation_bias

    segments = []
    for x, center, length, plus_down in zip(xs, centers, lengths, down):
        top = min(center + length / 2, domain.y1)
        bottom = max(center - length / 2, domain.y0)
        if top <= bottom:
            continue

        if plus_down:
            segments.append(FilamentSegment((x, top), (x, bottom)))
        else:
            segments.append(FilamentSegment((x, bottom), (x, top)))

    logging.debug(f"Parallel network: {len(segments)} filaments, "
                  f"{int(down.sum())} plus end down")
    return segments


def radial_network(domain: Rectangle,
                   origin,
                   n_filaments: int,
                   kappa: float,
                   length_dist,
                   seed: int) -> list[FilamentSegment]:
    """Filaments pointing away from origin, with a von Mises angular
    deviation of concentration kappa (kappa = inf for no noise)."""
    if not domain.contains(origin):
        raise ValueError(f"Origin {origin} outside the domain")
    if n_filaments < 0:
        raise ValueError(f"Negative filament count: {n_filaments}")

    rng = np.random.default_rng(seed)
    origin = np.asarray(origin, dtype=float)

    segments: list[FilamentSegment] = []
    attempts = 0
    while len(segments) < n_filaments:
        attempts += 1
        if attempts > MAX_ATTEMPTS * max(n_filaments, 1):
            raise RuntimeError("Could not place radial filaments inside "
                               "the domain")

        start = np.array([
            rng.uniform(domain.x0, domain.x1),
            rng.uniform(domain.y0, domain.y1)
        ])
        offset = start - origin
        if not np.any(offset):
            continue

        angle = np.arctan2(offset[1], offset[0])
        if not np.isinf(kappa):
            angle += rng.vonmises(0.0, kappa)
        length = _lengths(length_dist, rng, 1)[0]

        end = start + length * np.array([np.cos(angle), np.sin(angle)])
        clipped = clip_to_rectangle(start, end, domain)
        if clipped is None or np.hypot(*(clipped[1] - clipped[0])) == 0:
            continue

        segments.append(FilamentSegment(tuple(clipped[0]), tuple(clipped[1])))

    return segments


def _segment_cells(segment: FilamentSegment, grid: Grid):
    """Yield (row, column, length) for every cell the segment crosses."""
    domain = grid.domain
    clipped = clip_to_rectangle(segment.minus_end, segment.plus_end, domain)
    if clipped is None:
        return

    start, end = clipped
    delta = end - start

    breaks = [0.0, 1.0]
    for axis, origin, spacing, count in ((0, grid.x0, grid.dx, grid.nx),
                                         (1, grid.y0, grid.dy, grid.ny)):
        if delta[axis] == 0:
            continue
        lines = origin + spacing * np.arange(count + 1)
        ratios = (lines - start[axis]) / delta[axis]
        breaks.extend(ratios[(ratios > 0) & (ratios < 1)])

    breaks = np.unique(breaks)
    total = np.hypot(*delta)

    for low, high in zip(breaks[:-1], breaks[1:]):
        middle = start + (low + high) / 2 * delta
        column = min(int((middle[0] - grid.x0) // grid.dx), grid.nx - 1)
        row = min(int((middle[1] - grid.y0) // grid.dy), grid.ny - 1)
        yield row, column, (high - low) * total


def rasterize(segments, grid: Grid) -> NetworkField:
    lengths = np.zeros(grid.shape)
    oriented = np.zeros(grid.shape + (2, ))

    for segment in segments:
        orientation = segment.orientation
        for row, column, length in _segment_cells(segment, grid):
            lengths[row, column] += length
            oriented[row, column] += length * orientation

    peak = lengths.max()
    density = lengths / peak if peak > 0 else np.zeros(grid.shape)

    occupied = lengths > 0
    net = np.hypot(oriented[..., 0], oriented[..., 1])

    advection = np.zeros_like(oriented)
    advection[occupied] = oriented[occupied] / lengths[occupied, np.newaxis]

    mixed = occupied & (net <= MIXED_POLARITY * lengths)
    polar = occupied & ~mixed

    direction = np.zeros_like(oriented)
    direction[polar] = oriented[polar] / net[polar, np.newaxis]
    advection[mixed] = 0.0

    if mixed.any():
        logging.warning(f"{int(mixed.sum())} mixed-polarity cell(s) have "
                        f"no net filament direction")

    return NetworkField(grid, density, direction, advection, lengths, mixed)


def spatial_rates(model: model_core.ModelSpec,
                  rho,
                  binding_states=None) -> np.ndarray:
    """Rate matrices A(x) with every rate into a bound state scaled by rho.

    rho may have any shape; the result has shape rho.shape + (n, n).
    """
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("Filament density must be non-negative")

    if binding_states is None:
        binding_states = model.bound_states
    bound = np.zeros(model.n_states, dtype=bool)
    bound[list(binding_states)] = True

    base = model.rates.copy()
    np.fill_diagonal(base, 0.0)

    # Only unbound -> bound transitions need a filament
    needs_filament = np.zeros(base.shape, dtype=bool)
    needs_filament[np.ix_(bound, ~bound)] = True
    binding = np.where(needs_filament, base, 0.0)
    fixed = np.where(needs_filament, 0.0, base)

    rates = fixed + rho[..., np.newaxis, np.newaxis] * binding
    diagonal = -rates.sum(axis=-2)
    index = np.arange(model.n_states)
    rates[..., index, index] = diagonal

    drift = np.abs(rates.sum(axis=-2)).max() if rates.size else 0.0
    assert drift <= 1e-12 * max(1.0, np.abs(model.rates).max()), drift

    return rates
