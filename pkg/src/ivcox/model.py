"""Domain types, design matrices and input validation."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyData,
    IdentificationViolation,
    InvalidParameter,
    NonFiniteValue,
    TiedEventTimes,
)

RHO_CAP = 0.995

TIE_POLICIES = ("reject", "jitter")


def _frozen(a, dtype=float, ndim=1) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 0)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SubjectRecord:
    """One observation: observed time, event flag, treatment, covariates, instruments."""

    time: float
    event: bool
    treatment: bool
    covariates: tuple[float, ...] = ()
    instruments: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(float(v) for v in self.covariates))
        object.__setattr__(self, "instruments", tuple(float(v) for v in self.instruments))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented, validated collection of subjects.

    Instances should come from :func:`validate_dataset` or
    :meth:`Dataset.from_arrays`; arrays are read-only.
    """

    time: np.ndarray
    event: np.ndarray
    treatment: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.Z.shape[1]

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @property
    def records(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(float(t), bool(d), bool(w), tuple(x), tuple(z))
            for t, d, w, x, z in zip(self.time, self.event, self.treatment, self.X, self.Z)
        ]

    def take(self, index: Sequence[int]) -> "Dataset":
        """Rows ``index`` as a new (unvalidated) dataset; used for resampling."""
        index = np.asarray(index, dtype=int)
        return Dataset(
            _frozen(self.time[index]),
            _frozen(self.event[index], bool),
            _frozen(self.treatment[index], bool),
            _frozen(self.X[index], ndim=2),
            _frozen(self.Z[index], ndim=2),
        )

    @classmethod
    def from_arrays(cls, time, event, treatment, X=None, Z=None, *,
                    design: "DesignSpec | None" = None,
                    tie_policy: str = "reject", seed: int = 0) -> "Dataset":
        time = np.asarray(time, dtype=float)
        n = time.shape[0]
        X = np.zeros((n, 0)) if X is None else np.asarray(X, dtype=float)
        Z = np.zeros((n, 0)) if Z is None else np.asarray(Z, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if Z.ndim == 1:
            Z = Z.reshape(-1, 1)
        event = np.asarray(event)
        treatment = np.asarray(treatment)
        if n == 0:
            raise EmptyData("dataset has no records")
        for name, arr in (("event", event), ("treatment", treatment), ("X", X), ("Z", Z)):
            if arr.shape[0] != n:
                raise DimensionMismatch(f"{name} has {arr.shape[0]} rows, expected {n}")
        for name, arr in (("event", event), ("treatment", treatment)):
            if not np.isin(arr, (0, 1)).all():
                raise DimensionMismatch(f"{name} must be binary (0/1)")
        ds = cls(_frozen(time), _frozen(event, bool), _frozen(treatment, bool),
                 _frozen(X, ndim=2), _frozen(Z, ndim=2))
        return _check(ds, design, tie_policy, seed)


def validate_dataset(records: Iterable[SubjectRecord], design: "DesignSpec | None" = None,
                     tie_policy: str = "reject", seed: int = 0) -> Dataset:
    """Build a :class:`Dataset` from records, checking dimensions, domains and ties.

    With ``tie_policy="jitter"`` tied event times are separated by a
    deterministic perturbation (see :func:`jitter_ties`); otherwise they
    raise :class:`TiedEventTimes`.
    """
    records = list(records)
    if not records:
        raise EmptyData("dataset has no records")
    p, K = len(records[0].covariates), len(records[0].instruments)
    for i, r in enumerate(records):
        if len(r.covariates) != p or len(r.instruments) != K:
            raise DimensionMismatch(
                f"record {i} has p={len(r.covariates)}, K={len(r.instruments)}; expected p={p}, K={K}")
    n = len(records)
    return Dataset.from_arrays(
        [r.time for r in records],
        [bool(r.event) for r in records],
        [bool(r.treatment) for r in records],
        np.array([r.covariates for r in records], dtype=float).reshape(n, p),
        np.array([r.instruments for r in records], dtype=float).reshape(n, K),
        design=design, tie_policy=tie_policy, seed=seed,
    )


def _check(ds: Dataset, design, tie_policy, seed) -> Dataset:
    if tie_policy not in TIE_POLICIES:
        raise ValueError(f"unknown tie policy {tie_policy!r}")
    if not np.isfinite(ds.time).all() or (ds.time < 0).any():
        bad = int(np.flatnonzero(~np.isfinite(ds.time) | (ds.time < 0))[0])
        raise NonFiniteValue(f"record {bad}: time must be finite and >= 0, got {ds.time[bad]}")
    for name, arr in (("covariates", ds.X), ("instruments", ds.Z)):
        if not np.isfinite(arr).all():
            bad = int(np.flatnonzero(~np.isfinite(arr).all(axis=1))[0])
            raise NonFiniteValue(f"record {bad}: {name} contain non-finite values")
    if design is not None:
        design.check_dimensions(ds.p, ds.K)
    if has_tied_events(ds.time, ds.event):
        if tie_policy == "reject":
            raise TiedEventTimes("tied uncensored event times (tie_policy='reject')")
        ds = Dataset(_frozen(jitter_ties(ds.time, ds.event, seed)), ds.event, ds.treatment, ds.X, ds.Z)
    return ds


def has_tied_events(time, event) -> bool:
    """True if an uncensored time is shared with any other subject."""
    time = np.asarray(time)
    event = np.asarray(event, dtype=bool)
    if not event.any():
        return False
    vals, counts = np.unique(time, return_counts=True)
    dup = vals[counts > 1]
    return bool(np.isin(time[event], dup).any())


def jitter_ties(time, event, seed: int) -> np.ndarray:
    """Break ties among times by a deterministic, rank-preserving perturbation.

    Subjects sharing a time are spread over ``[t, t + eps)`` in an order drawn
    from ``seed``; ``eps`` is ``1e-9 * max(time)``, shrunk if needed so that no
    perturbed time reaches the next distinct value.
    """
    time = np.asarray(time, dtype=float)
    out = time.copy()
    vals, inverse, counts = np.unique(time, return_inverse=True, return_counts=True)
    if (counts == 1).all():
        return out
    scale = 1e-9 * (float(time.max()) or 1.0)
    gaps = np.diff(vals)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0x7E5,))))
    for g in np.flatnonzero(counts > 1):
        members = np.flatnonzero(inverse == g)
        eps = scale if g == len(vals) - 1 else min(scale, 0.5 * gaps[g])
        order = rng.permutation(len(members))
        out[members] = vals[g] + eps * order / len(members)
    return out


# --------------------------------------------------------------------------- designs

_TERM = re.compile(r"^(1|w|[xz]\d+|w:x\d+|x\d+:w)$")


def _parse_terms(terms) -> tuple[str, ...]:
    if isinstance(terms, str):
        terms = [t for t in re.split(r"\s*\+\s*", terms.strip()) if t]
    out = []
    for t in terms:
        t = t.strip().replace(" ", "")
        if t == "intercept":
            t = "1"
        if not _TERM.match(t):
            raise ValueError(f"unrecognised design term {t!r}")
        if t.endswith(":w"):
            t = "w:" + t.split(":")[0]
        out.append(t)
    return tuple(out)


@dataclass(frozen=True)
class DesignSpec:
    """Term lists for the treatment (probit) and hazard (Cox) linear predictors.

    Terms: ``"1"`` (intercept), ``"w"``, ``"xk"``, ``"zk"`` (1-based indices)
    and ``"w:xk"`` interactions. Either a list or a ``"z1 + x1"`` string.
    Interactions are only meaningful in the hazard design.
    """

    treatment_design: tuple[str, ...]
    hazard_design: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "treatment_design", _parse_terms(self.treatment_design))
        object.__setattr__(self, "hazard_design", _parse_terms(self.hazard_design))
        bad = [t for t in self.treatment_design if t == "w" or t.startswith("w:")]
        if bad:
            raise ValueError(f"treatment design cannot contain treatment terms: {bad}")
        bad = [t for t in self.hazard_design if t.startswith("z")]
        if bad:
            raise ValueError(f"hazard design cannot contain instruments: {bad}")
        if "w" not in self.hazard_design:
            raise ValueError("hazard design must contain the treatment term 'w'")

    @classmethod
    def default(cls, p: int, K: int) -> "DesignSpec":
        """All instruments and covariates in the treatment model; w and covariates in the hazard."""
        xs = [f"x{j + 1}" for j in range(p)]
        zs = [f"z{k + 1}" for k in range(K)]
        return cls(tuple(zs + xs), tuple(["w"] + xs))

    @property
    def treatment_has_intercept(self) -> bool:
        return "1" in self.treatment_design

    @property
    def hazard_has_intercept(self) -> bool:
        return "1" in self.hazard_design

    @property
    def treatment_index(self) -> int:
        """Column of ``w`` in the hazard design."""
        return self.hazard_design.index("w")

    def check_dimensions(self, p: int, K: int) -> None:
        for t in self.treatment_design + self.hazard_design:
            for kind, idx in re.findall(r"([xz])(\d+)", t):
                limit = p if kind == "x" else K
                if not 1 <= int(idx) <= limit:
                    raise DimensionMismatch(f"design term {t!r} refers to {kind}{idx}, but {kind} has {limit} columns")


def _column(term: str, ds: Dataset) -> np.ndarray:
    if term == "1":
        return np.ones(ds.n)
    if term == "w":
        return ds.treatment.astype(float)
    if term.startswith("w:"):
        return ds.treatment * ds.X[:, int(term[3:]) - 1]
    src = ds.X if term[0] == "x" else ds.Z
    return src[:, int(term[1:]) - 1]


def build_designs(dataset: Dataset, design: DesignSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Xw, Xt)``: the treatment-model and hazard-model design matrices."""
    design.check_dimensions(dataset.p, dataset.K)
    Xw = np.column_stack([_column(t, dataset) for t in design.treatment_design]) \
        if design.treatment_design else np.zeros((dataset.n, 0))
    Xt = np.column_stack([_column(t, dataset) for t in design.hazard_design])
    return Xw, Xt


def validate_identification(design: DesignSpec, config) -> None:
    """Raise :class:`IdentificationViolation` unless the parameters are identified.

    Requires a fixed frailty scale (or the explicit ``estimate_sigma_u``
    opt-in, which warns), no hazard intercept, and either no treatment
    intercept or a fixed correlation (``config.fixed_rho``).
    """
    if getattr(config, "estimate_sigma_u", False):
        warnings.warn(
            "estimate_sigma_u=True: the frailty scale is not identified with one subject "
            "per cluster; estimates of sigma_u and the baseline hazard are confounded",
            stacklevel=2,
        )
    if design.hazard_has_intercept:
        raise IdentificationViolation("2", "the hazard design must not contain an intercept")
    if design.treatment_has_intercept and getattr(config, "fixed_rho", None) is None:
        raise IdentificationViolation(
            "3", "the treatment design has an intercept, so rho must be fixed (fixed_rho)")


# --------------------------------------------------------------------------- parameters

@dataclass(frozen=True, eq=False)
class ParameterSet:
    alpha: np.ndarray
    beta: np.ndarray
    rho: float = 0.0
    sigma_u: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen(self.alpha))
        object.__setattr__(self, "beta", _frozen(self.beta))
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "sigma_u", float(self.sigma_u))
        if not abs(self.rho) <= RHO_CAP:
            raise InvalidParameter(f"|rho| must be <= {RHO_CAP}, got {self.rho}")
        if not self.sigma_u > 0:
            raise InvalidParameter(f"sigma_u must be > 0, got {self.sigma_u}")

    @property
    def xi(self) -> tuple[float, float]:
        return (self.sigma_u, self.rho)

    def vector(self, with_sigma: bool = False) -> np.ndarray:
        """Stacked (beta, alpha, rho[, sigma_u]) used for convergence checks."""
        parts = [self.beta, self.alpha, [self.rho]]
        if with_sigma:
            parts.append([self.sigma_u])
        return np.concatenate(parts)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "beta": self.beta.tolist(),
                "rho": self.rho, "sigma_u": self.sigma_u}


@dataclass(frozen=True, eq=False)
class BaselineHazard:
    """Step-function cumulative baseline hazard with jumps at event times."""

    event_times: np.ndarray
    jumps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "event_times", _frozen(self.event_times))
        object.__setattr__(self, "jumps", _frozen(self.jumps))
        if self.event_times.shape != self.jumps.shape:
            raise InvalidParameter("event_times and jumps differ in length")
        if (np.diff(self.event_times) <= 0).any():
            raise InvalidParameter("event times must be strictly increasing")
        if (self.jumps <= 0).any():
            raise InvalidParameter("baseline jumps must be positive")

    @property
    def n_s(self) -> int:
        return self.event_times.shape[0]

    def cumulative(self, t) -> np.ndarray | float:
        """Lambda(t) = sum of jumps at event times <= t (right-continuous)."""
        csum = np.concatenate([[0.0], np.cumsum(self.jumps)])
        out = csum[np.searchsorted(self.event_times, t, side="right")]
        return float(out) if np.ndim(t) == 0 else out

    def jump_at(self, t) -> np.ndarray | float:
        """Jump size Lambda{t}; zero where t is not an event time."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.searchsorted(self.event_times, t_arr, side="left")
        idx_c = np.minimum(idx, max(self.n_s - 1, 0))
        hit = (idx < self.n_s) & (self.event_times[idx_c] == t_arr) if self.n_s else np.zeros(t_arr.shape, bool)
        out = np.where(hit, self.jumps[idx_c] if self.n_s else 0.0, 0.0)
        return float(out[0]) if np.ndim(t) == 0 else out

    def to_dict(self) -> dict:
        return {"event_times": self.event_times.tolist(), "jumps": self.jumps.tolist()}


@dataclass(frozen=True, eq=False)
class FitResult:
    parameters: ParameterSet
    baseline: BaselineHazard
    iterations: int
    converged: bool
    final_observed_loglik: float
    trace: list = field(default_factory=list)
    design: DesignSpec | None = None
    draws: str = "frozen"

    @property
    def hazard_ratio(self) -> float:
        idx = self.design.treatment_index if self.design is not None else 0
        return float(np.exp(self.parameters.beta[idx]))

    def to_dict(self) -> dict:
        d = {
            "hazard_ratio": self.hazard_ratio,
            **self.parameters.to_dict(),
            "iterations": self.iterations,
            "converged": self.converged,
            "final_observed_loglik": self.final_observed_loglik,
            "draws": self.draws,
            "baseline": self.baseline.to_dict(),
        }
        if self.design is not None:
            d["treatment_design"] = list(self.design.treatment_design)
            d["hazard_design"] = list(self.design.hazard_design)
        return d


@dataclass(frozen=True, eq=False)
class ModelMatrices:
    """Dataset arrays plus built design matrices, shared by the fitting code."""

    time: np.ndarray
    event: np.ndarray
    treatment: np.ndarray
    Xw: np.ndarray
    Xt: np.ndarray

    @classmethod
    def build(cls, dataset: Dataset, design: DesignSpec) -> "ModelMatrices":
        Xw, Xt = build_designs(dataset, design)
        return cls(dataset.time, dataset.event, dataset.treatment, _frozen(Xw, ndim=2), _frozen(Xt, ndim=2))

    @property
    def n(self) -> int:
        return self.time.shape[0]
