"""Synthetic knee cohorts with planted effects and a controllable ICC.

Each patient contributes two knee rows. Predictors are built from Gaussian
latents mixing a shared patient factor, a patient-level term and (for
knee-level variables) a knee-level term; they are then cut into categories
or scaled to numeric units. The severity latent is

    s = sum_j effect_j * score_j + u_patient + e_knee

where ``score_j`` is the standardized value for numeric columns and the
category code for coded ones, so a linear model on dummy-coded predictors
is correctly specified. The observed KL grade cuts ``s`` at thresholds
that reproduce the target level distribution.

The ICC target applies either to the latent noise (``icc_scale="latent"``)
or to the variance decomposition a random-intercept model recovers from the
observed grades (``icc_scale="response"``, the default). The latter is
calibrated by bisection on a large fixed-seed pilot cohort, because
discretisation attenuates the within-patient correlation.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtri

from .dataset import ColumnSpec, Cohort, cohort_from_records

TABLE1_DIST = (0.424, 0.176, 0.248, 0.125, 0.027)


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class PredictorBlueprint:
    name: str
    kind: str
    level: str = "knee"
    effect: float = 0.0
    categories: tuple | None = None
    probs: tuple | None = None
    mean: float = 0.0
    sd: float = 1.0
    loading: float = 0.0
    knee_corr: float = 0.5
    missing_rate: float = 0.0
    decimals: int = 1

    def __post_init__(self):
        if self.kind in ("binary", "categorical"):
            if self.categories is None or self.probs is None or len(self.categories) != len(self.probs):
                raise InfeasibleSpec(f"{self.name}: coded predictors need matching categories/probs")
            if abs(sum(self.probs) - 1.0) > 1e-9:
                raise InfeasibleSpec(f"{self.name}: category probabilities must sum to 1")
        if self.level not in ("knee", "patient"):
            raise InfeasibleSpec(f"{self.name}: level must be knee or patient")
        if not -1.0 < self.loading < 1.0 or not 0.0 <= self.knee_corr <= 1.0:
            raise InfeasibleSpec(f"{self.name}: loading/knee_corr out of range")


def default_blueprint() -> tuple[PredictorBlueprint, ...]:
    B = PredictorBlueprint
    return (
        B("age", "numeric", "patient", 0.35, mean=60.5, sd=9.1, loading=0.2, missing_rate=0.01),
        B("sex", "binary", "patient", 0.10, ("male", "female"), (0.447, 0.553), missing_rate=0.0),
        B("height_mm", "numeric", "patient", -0.05, mean=1685.8, sd=93.0, missing_rate=0.01, decimals=0),
        B("weight_kg", "numeric", "patient", 0.30, mean=80.6, sd=16.1, loading=0.2, missing_rate=0.01),
        B("systolic", "numeric", "patient", 0.0, mean=123.3, sd=16.1, missing_rate=0.02, decimals=0),
        B("diastolic", "numeric", "patient", 0.0, mean=75.5, sd=9.8, missing_rate=0.02, decimals=0),
        B("knee_pain", "categorical", "knee", 0.45, ("none", "mild", "moderate", "severe"),
          (0.45, 0.30, 0.17, 0.08), loading=0.6, knee_corr=0.6, missing_rate=0.02),
        B("stairs_difficulty", "categorical", "knee", 0.25, ("none", "mild", "moderate", "severe", "extreme"),
          (0.45, 0.25, 0.15, 0.09, 0.06), loading=0.6, knee_corr=0.6, missing_rate=0.02),
        B("knee_stiffness", "binary", "knee", 0.20, ("no", "yes"), (0.7, 0.3), loading=0.5, missing_rate=0.01),
        B("knee_swelling", "binary", "knee", 0.15, ("no", "yes"), (0.8, 0.2), loading=0.5, missing_rate=0.01),
        B("knee_surgery", "binary", "knee", 0.50, ("no", "yes"), (0.92, 0.08), knee_corr=0.2, missing_rate=0.01),
        B("pain_medication", "binary", "patient", 0.20, ("no", "yes"), (0.75, 0.25), loading=0.5, missing_rate=0.01),
        B("other_doctor_visit", "binary", "patient", 0.0, ("no", "yes"), (0.6, 0.4), loading=0.3, missing_rate=0.01),
        B("rheumatoid_arthritis", "binary", "patient", 0.30, ("no", "yes"), (0.97, 0.03), missing_rate=0.01),
        B("occupation", "categorical", "patient", 0.0, ("office", "manual", "retired", "other"),
          (0.3, 0.25, 0.3, 0.15), missing_rate=0.31),
        B("noise_score", "numeric", "knee", 0.0, mean=0.0, sd=1.0, missing_rate=0.01, decimals=3),
    )


@dataclass(frozen=True)
class SynthSpec:
    n_patients: int = 1500
    severity_dist: tuple = TABLE1_DIST
    icc: float = 0.265
    icc_scale: str = "response"
    blueprint: tuple = field(default_factory=default_blueprint)
    noise_var: float = 1.0
    seed: int = 0
    pilot_patients: int = 20_000
    pilot_seed: int = 20_190_101

    def __post_init__(self):
        if self.n_patients < 1:
            raise InfeasibleSpec("n_patients must be >= 1")
        d = np.asarray(self.severity_dist, dtype=float)
        if len(d) != 5 or np.any(d <= 0) or abs(d.sum() - 1.0) > 1e-9:
            raise InfeasibleSpec("severity_dist must be 5 positive values summing to 1")
        if not 0.0 <= self.icc < 1.0:
            raise InfeasibleSpec(f"icc {self.icc} outside [0, 1)")
        if self.icc_scale not in ("response", "latent"):
            raise InfeasibleSpec("icc_scale must be 'response' or 'latent'")
        if self.noise_var <= 0:
            raise InfeasibleSpec("noise_var must be positive")
        names = [b.name for b in self.blueprint]
        if len(set(names)) != len(names):
            raise InfeasibleSpec("duplicate predictor names")


@dataclass
class _Draws:
    values: dict          # name -> float array (numeric) or int codes
    scores: np.ndarray    # n_rows x n_predictors
    signal: np.ndarray
    u: np.ndarray         # standard normal per row (patient-shared)
    e: np.ndarray         # standard normal per row
    patient: np.ndarray


def _draw(spec: SynthSpec, n_patients: int, rng) -> _Draws:
    n = 2 * n_patients
    patient = np.repeat(np.arange(n_patients), 2)
    factor = rng.standard_normal(n_patients)[patient]
    values, scores = {}, []
    for b in spec.blueprint:
        ep = rng.standard_normal(n_patients)[patient]
        if b.level == "knee":
            ek = rng.standard_normal(n)
            own = np.sqrt(b.knee_corr) * ep + np.sqrt(1 - b.knee_corr) * ek
        else:
            own = ep
        z = b.loading * factor + np.sqrt(1 - b.loading**2) * own
        if b.kind == "numeric":
            v = np.round(b.mean + b.sd * z, b.decimals)
            values[b.name] = v
            scores.append((v - b.mean) / b.sd)
        else:
            cuts = ndtri(np.cumsum(b.probs)[:-1])
            codes = np.searchsorted(cuts, z).astype(np.int64)
            values[b.name] = codes
            scores.append(codes.astype(float))
    scores = np.column_stack(scores) if scores else np.zeros((n, 0))
    effects = np.array([b.effect for b in spec.blueprint])
    u = rng.standard_normal(n_patients)[patient]
    e = rng.standard_normal(n)
    return _Draws(values, scores, scores @ effects, u, e, patient)


def _latent(draws: _Draws, latent_icc: float, noise_var: float) -> np.ndarray:
    return (draws.signal + np.sqrt(latent_icc * noise_var) * draws.u
            + np.sqrt((1 - latent_icc) * noise_var) * draws.e)


def _cut_points(s, dist) -> np.ndarray:
    return np.quantile(s, np.cumsum(dist)[:-1])


def discretize(s, thresholds) -> np.ndarray:
    return np.searchsorted(np.asarray(thresholds), s, side="right").astype(float)


def true_design(spec: SynthSpec, values: dict) -> tuple[list[str], np.ndarray]:
    """Dummy-coded columns for the generated predictors (first category reference)."""
    names, cols = [], []
    for b in spec.blueprint:
        v = values[b.name]
        if b.kind == "numeric":
            names.append(b.name)
            cols.append(v.astype(float))
        else:
            for k, cat in enumerate(b.categories[1:], 1):
                names.append(f"{b.name}={cat}")
                cols.append((v == k).astype(float))
    return names, np.column_stack(cols)


def true_coefficients(spec: SynthSpec) -> dict:
    """Planted effect of each design column on the latent severity scale."""
    out = {}
    for b in spec.blueprint:
        if b.kind == "numeric":
            out[b.name] = b.effect / b.sd
        else:
            for k, cat in enumerate(b.categories[1:], 1):
                out[f"{b.name}={cat}"] = b.effect * k
    return out


def _response_icc(draws, spec, latent_icc) -> tuple[float, np.ndarray]:
    from . import lmm

    s = _latent(draws, latent_icc, spec.noise_var)
    cuts = _cut_points(s, spec.severity_dist)
    y = discretize(s, cuts)
    _, X = true_design(spec, draws.values)
    X = np.column_stack([np.ones(len(y)), X])
    keep = np.linalg.matrix_rank(X) == X.shape[1]
    if not keep:
        raise InfeasibleSpec("generated design is rank deficient; check category probabilities")
    f = lmm.fit_reml(lmm.LmmDesign(X, draws.patient, y))
    return f.icc, cuts


_CAL_TOL = 0.002
_MAX_LATENT_ICC = 0.99


@functools.lru_cache(maxsize=16)
def _calibrate(cal_spec: SynthSpec) -> tuple[float, float, tuple]:
    """(latent icc, pilot response icc, thresholds) for a seed-free spec."""
    draws = _draw(cal_spec, cal_spec.pilot_patients, np.random.default_rng(cal_spec.pilot_seed))
    target = cal_spec.icc
    if cal_spec.icc_scale == "latent":
        achieved, cuts = _response_icc(draws, cal_spec, target)
        return target, achieved, tuple(cuts)
    lo, hi = 0.0, _MAX_LATENT_ICC
    f_lo, cuts_lo = _response_icc(draws, cal_spec, lo)
    if f_lo >= target:
        if f_lo - target > 0.02:
            raise InfeasibleSpec(
                f"icc target {target} below the {f_lo:.3f} implied by discretisation alone")
        return lo, f_lo, tuple(cuts_lo)
    f_hi, cuts_hi = _response_icc(draws, cal_spec, hi)
    if f_hi < target:
        raise InfeasibleSpec(
            f"icc target {target} unreachable: at latent icc {hi} the response icc is {f_hi:.3f}")
    best = (hi, f_hi, cuts_hi)
    for _ in range(40):
        mid = (lo + hi) / 2
        f_mid, cuts = _response_icc(draws, cal_spec, mid)
        best = (mid, f_mid, cuts)
        if abs(f_mid - target) < _CAL_TOL / 4:
            break
        if f_mid < target:
            lo = mid
        else:
            hi = mid
    return best[0], best[1], tuple(best[2])


def calibrate(spec: SynthSpec) -> tuple[float, float, tuple]:
    """Latent ICC, the pilot's recovered response ICC and the grade thresholds."""
    return _calibrate(replace(spec, seed=0, n_patients=1))


def generate_cohort(spec: SynthSpec) -> tuple[Cohort, dict]:
    latent_icc, pilot_icc, cuts = calibrate(spec)
    rng = np.random.default_rng(spec.seed)
    draws = _draw(spec, spec.n_patients, rng)
    s = _latent(draws, latent_icc, spec.noise_var)
    y = discretize(s, cuts)

    n = len(y)
    pids = [f"P{i + 1:05d}" for i in range(spec.n_patients)]
    records = {
        "patient_id": [pids[i] for i in draws.patient],
        "knee_side": ["left", "right"] * spec.n_patients,
        "kl_grade": list(y),
    }
    schema = [
        ColumnSpec("patient_id", "categorical", "patient_id"),
        ColumnSpec("knee_side", "categorical", "knee_side"),
        ColumnSpec("kl_grade", "numeric", "response"),
    ]
    miss_rng = np.random.default_rng([spec.seed, 1])
    for b in spec.blueprint:
        v = draws.values[b.name]
        miss = miss_rng.random(n) < b.missing_rate
        if b.kind == "numeric":
            records[b.name] = [None if m else float(x) for x, m in zip(v, miss)]
        else:
            records[b.name] = [None if m else int(x) for x, m in zip(v, miss)]
        schema.append(ColumnSpec(b.name, b.kind, "predictor", b.categories))
    cohort = cohort_from_records(schema, records)
    truth = {
        "seed": spec.seed,
        "n_patients": spec.n_patients,
        "icc_target": spec.icc,
        "icc_scale": spec.icc_scale,
        "latent_icc": latent_icc,
        "pilot_response_icc": pilot_icc,
        "sigma_u2": latent_icc * spec.noise_var,
        "sigma_e2": (1 - latent_icc) * spec.noise_var,
        "thresholds": list(cuts),
        "severity_dist": list(spec.severity_dist),
        "beta": true_coefficients(spec),
        "latent_signal_var": float(np.var(draws.signal)),
    }
    return cohort, truth


def latent_components(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row (patient effect, knee noise, patient index) as drawn for ``spec``."""
    latent_icc, _, _ = calibrate(spec)
    draws = _draw(spec, spec.n_patients, np.random.default_rng(spec.seed))
    return (np.sqrt(latent_icc * spec.noise_var) * draws.u,
            np.sqrt((1 - latent_icc) * spec.noise_var) * draws.e, draws.patient)


def truth_items(truth: dict) -> list[tuple[str, object]]:
    items = [(k, v) for k, v in truth.items() if k != "beta"]
    items += [(f"beta[{k}]", v) for k, v in truth["beta"].items()]
    return items
