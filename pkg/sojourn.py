import abc

import numpy as np


class Sojourn(abc.ABC):

    @abc.abstractmethod
    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        ...

    @property
    @abc.abstractmethod
    def mean(self) -> float:
        ...

    @property
    @abc.abstractmethod
    def variance(self) -> float:
        ...


class Exponential(Sojourn):

    def __init__(self, rate: float):
        if not rate > 0:
            raise ValueError(f"Invalid exponential rate: {rate}")

        self.rate = float(rate)

    def sample(self, rng, size):
        return rng.exponential(1 / self.rate, size)

    @property
    def mean(self):
        return 1 / self.rate

    @property
    def variance(self):
        return 1 / self.rate**2

    def __repr__(self):
        return f"Exponential({self.rate:g})"


class Gamma(Sojourn):

    def __init__(self, shape: float, rate: float):
        if not shape > 0 or not rate > 0:
            raise ValueError(f"Invalid gamma parameters: {shape}, {rate}")

        self.shape = float(shape)
        self.rate = float(rate)

    def sample(self, rng, size):
        return rng.gamma(self.shape, 1 / self.rate, size)

    @property
    def mean(self):
        return self.shape / self.rate

    @property
    def variance(self):
        return self.shape / self.rate**2

    def __repr__(self):
        return f"Gamma({self.shape:g}, {self.rate:g})"


class Deterministic(Sojourn):

    def __init__(self, duration: float):
        if not duration > 0:
            raise ValueError(f"Invalid duration: {duration}")

        self.duration = float(duration)

    def sample(self, rng, size):
        return np.full(size, self.duration)

    @property
    def mean(self):
        return self.duration

    @property
    def variance(self):
        return 0.0

    def __repr__(self):
        return f"Deterministic({self.duration:g})"


def from_exit_rate(kind: str, exit_rate: float) -> Sojourn:
    """Build a sojourn law with mean 1 / exit_rate.

    kind is "exponential", "deterministic" or "gamma:<shape>"; the gamma
    rate is shape * exit_rate so the mean is unchanged.
    """
    name, _, argument = kind.partition(":")

    if name == "exponential":
        return Exponential(exit_rate)
    if name == "deterministic":
        return Deterministic(1 / exit_rate)
    if name == "gamma":
        if not argument:
            raise ValueError("Gamma sojourn needs a shape, e.g. gamma:2")
        shape = float(argument)
        return Gamma(shape, shape * exit_rate)

    raise ValueError(f"Unknown sojourn kind: {kind}")
