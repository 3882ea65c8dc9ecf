"""Seeded random streams, the normal CDF, and the samplers used by the simulations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special

from .errors import InvalidParameter

StreamKey = Union[int, tuple]


@dataclass(frozen=True)
class SeededStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    ``stream_id`` may be an int or a tuple of ints (e.g. ``(replication, k)``);
    distinct ids give statistically independent PCG64 streams.
    """

    seed: int
    stream_id: StreamKey = 0

    def generator(self) -> np.random.Generator:
        key = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        key = tuple(int(k) & 0xFFFFFFFFFFFFFFFF for k in key)
        ss = np.random.SeedSequence(int(self.seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *key: int) -> "SeededStream":
        base = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        return SeededStream(self.seed, base + key)


def _as_generator(stream) -> np.random.Generator:
    if isinstance(stream, SeededStream):
        return stream.generator()
    if isinstance(stream, np.random.Generator):
        return stream
    raise TypeError(f"expected SeededStream or numpy Generator, got {type(stream).__name__}")


def std_normal_cdf(x):
    return special.ndtr(x)


def log_std_normal_cdf(x):
    """log Phi(x), accurate far into the lower tail."""
    return special.log_ndtr(x)


def std_normal_logpdf(x):
    return -0.5 * np.square(x) - 0.5 * np.log(2 * np.pi)


def inverse_mills(x):
    """phi(x) / Phi(x), stable for large negative x."""
    return np.exp(std_normal_logpdf(x) - special.log_ndtr(x))


# --------------------------------------------------------------------------- distributions

def _positive(name, value):
    if not np.all(np.asarray(value) > 0):
        raise InvalidParameter(f"{name} must be > 0, got {value}")


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    var: float = 1.0

    def __post_init__(self):
        _positive("var", self.var)

    def draw(self, gen, size):
        return self.mean + np.sqrt(self.var) * gen.standard_normal(size)


@dataclass(frozen=True)
class BivariateNormal:
    """(V, U) with Var(V)=1, Var(U)=sigma_u**2 and Cov(V, U)=cov_uv."""

    cov_uv: float
    sigma_u: float = 1.0

    def __post_init__(self):
        _positive("sigma_u", self.sigma_u)
        if abs(self.cov_uv) > self.sigma_u:
            raise InvalidParameter("covariance matrix is not positive semidefinite")

    @property
    def rho(self) -> float:
        return self.cov_uv / self.sigma_u

    def draw(self, gen, size):
        n = 1 if size is None else size
        e = gen.standard_normal((2, n) if np.ndim(n) == 0 else (2, *n))
        v = e[0]
        u = self.sigma_u * (self.rho * e[0] + np.sqrt(1 - self.rho**2) * e[1])
        if size is None:
            return float(v[0]), float(u[0])
        return v, u


@dataclass(frozen=True)
class Uniform:
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if not self.a < self.b:
            raise InvalidParameter(f"need a < b, got ({self.a}, {self.b})")

    def draw(self, gen, size):
        return gen.uniform(self.a, self.b, size)


@dataclass(frozen=True)
class Gamma:
    """Gamma with shape/rate parametrisation (mean shape/rate). Shape may be an array."""

    shape: object
    rate: float = 1.0

    def __post_init__(self):
        _positive("shape", self.shape)
        _positive("rate", self.rate)

    def draw(self, gen, size):
        return gen.gamma(self.shape, 1.0 / self.rate, size)


@dataclass(frozen=True)
class Logistic:
    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        _positive("scale", self.scale)

    def draw(self, gen, size):
        return gen.logistic(self.loc, self.scale, size)


@dataclass(frozen=True)
class StudentT:
    """Location-shifted t with unit scale. ``location`` may be an array."""

    location: object = 0.0
    df: float = 4.0

    def __post_init__(self):
        _positive("df", self.df)

    def draw(self, gen, size):
        return self.location + gen.standard_t(self.df, size)


@dataclass(frozen=True)
class Exponential:
    """Exponential with rate parametrisation (mean 1/rate)."""

    rate: float = 1.0

    def __post_init__(self):
        _positive("rate", self.rate)

    def draw(self, gen, size):
        return gen.exponential(1.0 / self.rate, size)


def sample(dist, stream, size=None):
    """Draw from ``dist`` using a :class:`SeededStream` (fresh generator) or a live Generator."""
    return dist.draw(_as_generator(stream), size)
