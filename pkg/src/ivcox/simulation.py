"""Data-generating scenarios, the replication driver and result tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .cox import fit_cox
from .em import EMConfig, run_em
from .errors import EmptyEstimates, FitError, InvalidSpec
from .model import Dataset, DesignSpec
from .rng import (
    BivariateNormal,
    Exponential,
    Gamma,
    Logistic,
    Normal,
    SeededStream,
    StudentT,
    Uniform,
)

log = logging.getLogger(__name__)

TRUE_BETA_W = 0.5
TRUE_BETA_X = 0.2
TRUE_HR = float(np.exp(TRUE_BETA_W))

ESTIMATORS = ("Proposed", "Ordinary", "Ordinary-infeasible")
PROPOSED_PARAMETERS = ("beta_w", "beta_x", "alpha", "sigma_u", "rho")

SIM_DESIGN = DesignSpec(("z1",), ("w", "x1"))

TREATMENT_FAMILIES = ("probit", "logistic")
FRAILTY_FAMILIES = ("bivariate-normal", "centered-gamma", "student-t")


@dataclass(frozen=True)
class ScenarioSpec:
    """Data-generating configuration for one simulation scenario.

    ``sigma_uv_factor`` gives Cov(V, U) as a multiple of ``sigma_u``; only the
    bivariate-normal family uses ``sigma_u2`` and ``sigma_uv_factor``.
    """

    id: int
    n: int = 500
    sigma_u2: float = 1.0
    sigma_uv_factor: float = 0.4
    alpha_wz: float = 1.0
    treatment_family: str = "probit"
    frailty_family: str = "bivariate-normal"
    censor_rate: float = 0.5
    beta_w: float = TRUE_BETA_W
    beta_x: float = TRUE_BETA_X

    def __post_init__(self):
        if self.n < 2:
            raise InvalidSpec("n must be >= 2")
        if self.treatment_family not in TREATMENT_FAMILIES:
            raise InvalidSpec(f"unknown treatment family {self.treatment_family!r}")
        if self.frailty_family not in FRAILTY_FAMILIES:
            raise InvalidSpec(f"unknown frailty family {self.frailty_family!r}")
        if not (self.sigma_u2 > 0 and self.censor_rate > 0):
            raise InvalidSpec("sigma_u2 and censor_rate must be positive")
        if abs(self.sigma_uv_factor) > 1:
            raise InvalidSpec("|sigma_uv_factor| must be <= 1")

    @property
    def sigma_u(self) -> float:
        return float(np.sqrt(self.sigma_u2))

    @property
    def sigma_uv(self) -> float:
        return self.sigma_uv_factor * self.sigma_u

    def truth(self) -> dict:
        """True values for the proposed estimator's parameters (model-based where defined)."""
        return {"hazard_ratio": float(np.exp(self.beta_w)), "beta_w": self.beta_w, "beta_x": self.beta_x,
                "alpha": self.alpha_wz, "sigma_u": self.sigma_u, "rho": self.sigma_uv_factor}


_BASE = {
    1: {},
    2: {"sigma_u2": 0.1},
    3: {"sigma_uv_factor": 0.1},
    4: {"alpha_wz": 0.1},
    5: {"treatment_family": "logistic"},
    6: {"frailty_family": "centered-gamma"},
    7: {"frailty_family": "student-t"},
}

SCENARIO_DESCRIPTIONS = {
    1: "high variance, strong correlation, strong IV",
    2: "low variance, strong correlation, strong IV",
    3: "high variance, weak correlation, strong IV",
    4: "high variance, strong correlation, weak IV",
    5: "logistic treatment model",
    6: "asymmetric (centred gamma) unmeasured covariate",
    7: "heavy-tailed (t, df 4) unmeasured covariate",
}


def scenario(id: int, n: int = 500, **overrides) -> ScenarioSpec:
    if id not in _BASE:
        raise InvalidSpec(f"scenario must be one of 1..7, got {id}")
    return ScenarioSpec(id=id, n=n, **{**_BASE[id], **overrides})


@dataclass(frozen=True, eq=False)
class GeneratedData:
    dataset: Dataset
    U: np.ndarray
    V: np.ndarray
    censoring_fraction: float


def generate(spec: ScenarioSpec, stream) -> GeneratedData:
    """Simulate one dataset.

    Event times use a constant baseline hazard of 1, so
    ``T = -log(Unif) / exp(beta_w W + beta_x X + U)``; censoring is
    exponential with rate ``spec.censor_rate``.
    """
    gen = stream.generator() if isinstance(stream, SeededStream) else stream
    n = spec.n
    X = Uniform(-1, 1).draw(gen, n)
    Z = Gamma(2.0, 2.0).draw(gen, n)
    if spec.treatment_family == "logistic":
        V = Logistic().draw(gen, n)
        U = 0.45 * V + Normal().draw(gen, n)
    elif spec.frailty_family == "bivariate-normal":
        V, U = BivariateNormal(spec.sigma_uv, spec.sigma_u).draw(gen, n)
    else:
        V = Normal().draw(gen, n)
        if spec.frailty_family == "centered-gamma":
            U_raw = Gamma(0.15 * np.exp(V), 1.0).draw(gen, n)
            U = U_raw - U_raw.mean()
        else:
            U = StudentT(0.5 * V, 4.0).draw(gen, n)
    W = spec.alpha_wz * Z + V >= 0
    hazard = np.exp(spec.beta_w * W + spec.beta_x * X + U)
    T_event = -np.log(gen.uniform(size=n)) / hazard
    C = Exponential(spec.censor_rate).draw(gen, n)
    time = np.minimum(T_event, C)
    event = T_event <= C
    ds = Dataset.from_arrays(time, event, W, X[:, None], Z[:, None], tie_policy="jitter",
                             seed=int(gen.integers(2**31)))
    return GeneratedData(ds, U, V, float(1.0 - event.mean()))


# --------------------------------------------------------------------------- summaries

@dataclass(frozen=True)
class ReplicationSummary:
    estimator: str
    parameter: str
    n_ok: int
    mean: float
    sd: float
    median: float
    min: float
    max: float
    rmse: float
    cv: float
    n_failed: int = 0
    sd_defined: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(estimates, truth: float, estimator: str = "", parameter: str = "hazard_ratio",
              n_failed: int = 0) -> ReplicationSummary:
    """Mean, sample SD, median, range, RMSE against ``truth`` and CV = SD/mean."""
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise EmptyEstimates("no successful estimates to summarise")
    mean = float(est.mean())
    sd_defined = est.size > 1
    sd = float(est.std(ddof=1)) if sd_defined else 0.0
    rmse = float(np.sqrt(np.mean((est - truth) ** 2)))
    cv = sd / mean if mean != 0 else float("nan")
    return ReplicationSummary(estimator, parameter, int(est.size), mean, sd, float(np.median(est)),
                              float(est.min()), float(est.max()), rmse, cv, n_failed, sd_defined)


# --------------------------------------------------------------------------- replications

def _em_seed(seed: int, rep: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(rep, 0xE3))
    return int(ss.generate_state(1, np.uint32)[0])


def replicate(spec: ScenarioSpec, rep: int, config: EMConfig, seed: int,
              estimators=ESTIMATORS) -> dict:
    """Generate replication ``rep`` and fit each estimator; failures are recorded, not raised."""
    data = generate(spec, SeededStream(seed, (rep,)))
    ds = data.dataset
    W = ds.treatment.astype(float)
    out = {"rep": rep, "censoring_fraction": data.censoring_fraction, "estimates": {}, "failures": {}}
    if "Proposed" in estimators:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fit = run_em(ds, SIM_DESIGN, replace(config, seed=_em_seed(seed, rep)))
            if not fit.converged:
                out["failures"]["Proposed"] = f"no convergence in {fit.iterations} iterations"
            else:
                p = fit.parameters
                out["estimates"]["Proposed"] = {
                    "hazard_ratio": fit.hazard_ratio, "beta_w": float(p.beta[0]), "beta_x": float(p.beta[1]),
                    "alpha": float(p.alpha[0]), "sigma_u": p.sigma_u, "rho": p.rho,
                    "iterations": fit.iterations}
        except FitError as exc:
            out["failures"]["Proposed"] = f"{type(exc).__name__}: {exc}"
    for label, Xt in (("Ordinary", np.column_stack([W, ds.X[:, 0]])),
                      ("Ordinary-infeasible", np.column_stack([W, ds.X[:, 0], data.U]))):
        if label not in estimators:
            continue
        try:
            fit = fit_cox(Xt, ds.time, ds.event)
            out["estimates"][label] = {"hazard_ratio": float(np.exp(fit.coef[0])),
                                       "beta_w": float(fit.coef[0]), "beta_x": float(fit.coef[1])}
        except FitError as exc:
            out["failures"][label] = f"{type(exc).__name__}: {exc}"
    return out


def _replicate_star(args):
    return replicate(*args)


@dataclass(frozen=True, eq=False)
class SimulationResult:
    spec: ScenarioSpec
    config: EMConfig
    seed: int
    replications: list = field(default_factory=list)

    def estimates(self, estimator: str, parameter: str = "hazard_ratio") -> np.ndarray:
        return np.array([r["estimates"][estimator][parameter] for r in self.replications
                         if estimator in r["estimates"]])

    def n_failed(self, estimator: str) -> int:
        return sum(estimator in r["failures"] for r in self.replications)

    def summaries(self, parameters: bool = False) -> list[ReplicationSummary]:
        """Hazard-ratio rows for each estimator; with ``parameters`` also the proposed estimator's parameters."""
        truth = self.spec.truth()
        rows = []
        labels = [lab for lab in ESTIMATORS
                  if any(lab in r["estimates"] or lab in r["failures"] for r in self.replications)]
        for lab in labels:
            est = self.estimates(lab)
            if est.size:
                rows.append(summarize(est, truth["hazard_ratio"], lab, "hazard_ratio", self.n_failed(lab)))
        if parameters and "Proposed" in labels and self.estimates("Proposed").size:
            for par in PROPOSED_PARAMETERS:
                rows.append(summarize(self.estimates("Proposed", par), truth[par], "Proposed", par,
                                      self.n_failed("Proposed")))
        return rows


def run_replications(spec: ScenarioSpec, reps: int, config: EMConfig | None = None, seed: int = 0,
                     jobs: int = 1, estimators=ESTIMATORS) -> SimulationResult:
    """Run ``reps`` independent replications; replication ``r`` uses stream ``(seed, r)``."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    config = config or EMConfig()
    tasks = [(spec, r, config, seed, tuple(estimators)) for r in range(reps)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replicate_star, tasks))
    else:
        results = [replicate(*t) for t in tasks]
    return SimulationResult(spec, config, seed, results)


# --------------------------------------------------------------------------- output

TABLE_COLUMNS = ("scenario", "estimator", "parameter", "n_ok", "mean", "sd", "median", "min", "max",
                 "rmse", "cv", "n_failed", "sd_defined")


def table_rows(result: SimulationResult, parameters: bool = False) -> list[dict]:
    return [{"scenario": result.spec.id, **s.to_dict()} for s in result.summaries(parameters)]


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in TABLE_COLUMNS})
    return buf.getvalue()


def to_json(result: SimulationResult, rows: list[dict]) -> str:
    doc = {
        "scenario": asdict(result.spec),
        "description": SCENARIO_DESCRIPTIONS[result.spec.id],
        "seed": result.seed,
        "reps": len(result.replications),
        "em": asdict(result.config),
        "mean_censoring_fraction": float(np.mean([r["censoring_fraction"] for r in result.replications])),
        "rows": rows,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def format_table(result: SimulationResult, parameters: bool = False) -> str:
    """Plain-text summary table, one row per estimator and parameter."""
    rows = result.summaries(parameters)
    head = f"{'Scenario':<9} {'Method':<20} {'Parameter':<13} {'Mean(SD)':<16} {'Median(Range)':<22} {'RMSE':>7} {'CV':>7} {'Failed':>6}"
    lines = [head, "-" * len(head)]
    for s in rows:
        lines.append(
            f"#{result.spec.id:<8} {s.estimator:<20} {s.parameter:<13} "
            f"{f'{s.mean:.3f}({s.sd:.3f})':<16} {f'{s.median:.3f}({s.min:.2f}-{s.max:.2f})':<22} "
            f"{s.rmse:>7.3f} {s.cv:>7.3f} {s.n_failed:>6}")
    return "\n".join(lines) + "\n"
