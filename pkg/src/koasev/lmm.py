"""Random-intercept linear mixed model fitted by profiled (RE)ML.

Model: y = X beta + Z gamma + eps with one intercept per cluster (patient),
gamma ~ N(0, s_u2 I), eps ~ N(0, s_e2 I). Writing phi = s_u2 / s_e2, the
marginal covariance is s_e2 * H with H = I + phi Z Z'. H^-1 is block
diagonal, so every quantity reduces to per-cluster sums:

    H^-1 a = a - phi / (1 + phi n_c) * (cluster sum of a),  log|H| = sum_c log(1 + phi n_c)

Given phi, beta (GLS) and s_e2 have closed forms. The profile criterion is
maximised over log(phi) by a grid scan and bounded Brent refinement, with
phi = 0 allowed as a boundary solution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

LOG_PHI_RANGE = (-16.0, 10.0)
N_GRID = 53
XATOL = 1e-10


class LmmError(ValueError):
    pass


@dataclass
class LmmDesign:
    X: np.ndarray
    cluster: np.ndarray
    y: np.ndarray
    codes: np.ndarray = field(init=False, repr=False)
    labels: np.ndarray = field(init=False, repr=False)
    sizes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.cluster = np.asarray(self.cluster)
        if self.X.ndim != 2 or self.X.shape[0] != len(self.y) or len(self.cluster) != len(self.y):
            raise LmmError("X, y and cluster must have matching rows")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise LmmError("non-finite values in X or y")
        self.labels, self.codes = np.unique(self.cluster, return_inverse=True)
        self.sizes = np.bincount(self.codes).astype(float)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return len(self.labels)


class _Profile:
    """Sufficient statistics for fast evaluation of the profile criteria."""

    def __init__(self, d: LmmDesign):
        self.d = d
        m = d.m
        self.XtX = d.X.T @ d.X
        self.Xty = d.X.T @ d.y
        self.yty = float(d.y @ d.y)
        self.SX = np.zeros((m, d.p))
        np.add.at(self.SX, d.codes, d.X)
        self.Sy = np.bincount(d.codes, weights=d.y, minlength=m)

    def gls(self, phi):
        w = phi / (1.0 + phi * self.d.sizes)
        A = self.XtX - (self.SX * w[:, None]).T @ self.SX
        b = self.Xty - self.SX.T @ (w * self.Sy)
        yHy = self.yty - float(w @ self.Sy**2)
        beta = np.linalg.solve(A, b)
        Q = max(yHy - float(b @ beta), 0.0)
        logdet_H = float(np.sum(np.log1p(phi * self.d.sizes)))
        return beta, Q, logdet_H, A

    def loglik(self, phi, reml=True):
        d = self.d
        beta, Q, logdet_H, A = self.gls(phi)
        if Q <= 0:
            return -np.inf
        if reml:
            dof = d.n - d.p
            s2 = Q / dof
            _, logdet_A = np.linalg.slogdet(A)
            return -0.5 * (dof * np.log(2 * np.pi * s2) + dof + logdet_H + logdet_A)
        s2 = Q / d.n
        return -0.5 * (d.n * np.log(2 * np.pi * s2) + d.n + logdet_H)


@dataclass
class LmmFit:
    beta: np.ndarray
    sigma_u2: float
    sigma_e2: float
    loglik: float
    reml: bool
    phi: float
    blups: np.ndarray
    cluster_labels: np.ndarray
    cluster_sizes: np.ndarray = field(repr=False)
    cov_beta: np.ndarray = field(repr=False)
    boundary: bool = False
    converged: bool = True

    @property
    def icc(self) -> float:
        return icc(self)

    def blup_map(self) -> dict:
        return dict(zip(self.cluster_labels.tolist(), self.blups.tolist()))


def icc(f) -> float:
    """s_u2 / (s_u2 + s_e2)."""
    return float(f.sigma_u2 / (f.sigma_u2 + f.sigma_e2))


def _check_design(d: LmmDesign):
    if np.all(d.sizes == 1):
        # phi is fixed at 0, so only the OLS requirement p < n applies
        if d.p >= d.n:
            raise LmmError(f"need p < n (p={d.p}, n={d.n})")
    elif d.p >= d.n - d.m + 1:
        raise LmmError(f"need p < n - m + 1 (p={d.p}, n={d.n}, m={d.m})")
    if d.p and np.linalg.matrix_rank(d.X) < d.p:
        raise LmmError("X is rank deficient")


def _maximise(prof: _Profile, reml: bool):
    """Return (phi, loglik, boundary, converged)."""
    d = prof.d
    f0 = prof.loglik(0.0, reml)
    if np.all(d.sizes == 1):
        # phi not identifiable: the profile is flat
        return 0.0, f0, True, True
    ts = np.linspace(*LOG_PHI_RANGE, N_GRID)
    vals = np.array([prof.loglik(np.exp(t), reml) for t in ts])
    if not np.all(np.isfinite(vals)) or not np.isfinite(f0):
        raise LmmError("non-finite likelihood")
    i = int(np.argmax(vals))
    if i == 0 or f0 >= vals[i]:
        return 0.0, f0, True, True
    lo, hi = ts[i - 1], ts[min(i + 1, N_GRID - 1)]
    res = optimize.minimize_scalar(
        lambda t: -prof.loglik(np.exp(t), reml), bounds=(lo, hi), method="bounded",
        options={"xatol": XATOL, "maxiter": 500},
    )
    t, ll = (res.x, -res.fun) if -res.fun >= vals[i] else (ts[i], vals[i])
    at_upper = i == N_GRID - 1
    return float(np.exp(t)), float(ll), False, bool(res.success and not at_upper)


def _finish(prof: _Profile, phi, ll, reml, boundary, converged) -> LmmFit:
    d = prof.d
    beta, Q, _, A = prof.gls(phi)
    s2 = Q / ((d.n - d.p) if reml else d.n)
    resid = d.y - d.X @ beta
    rbar = np.bincount(d.codes, weights=resid, minlength=d.m) / d.sizes
    shrink = phi * d.sizes / (1.0 + phi * d.sizes)
    return LmmFit(
        beta=beta, sigma_u2=float(phi * s2), sigma_e2=float(s2), loglik=float(ll), reml=reml,
        phi=float(phi), blups=shrink * rbar, cluster_labels=d.labels, cluster_sizes=d.sizes,
        cov_beta=s2 * np.linalg.inv(A), boundary=boundary, converged=converged,
    )


def fit(d: LmmDesign, reml: bool = True) -> LmmFit:
    _check_design(d)
    prof = _Profile(d)
    phi, ll, boundary, converged = _maximise(prof, reml)
    return _finish(prof, phi, ll, reml, boundary, converged)


def fit_reml(d: LmmDesign) -> LmmFit:
    return fit(d, reml=True)


def fit_ml(d: LmmDesign) -> LmmFit:
    return fit(d, reml=False)


def profile_loglik(d: LmmDesign, phi: float, reml: bool = True) -> float:
    """Profiled criterion at a given variance ratio (for checks and plots)."""
    return float(_Profile(d).loglik(phi, reml))


def fit_ols_ml(d: LmmDesign) -> float:
    """ML log-likelihood of the fixed-effects-only model."""
    _check_design(d)
    return float(_Profile(d).loglik(0.0, reml=False))


@dataclass(frozen=True)
class LrtResult:
    stat: float
    p_value: float
    loglik_null: float
    loglik_alt: float


def lrt_random_effect(d: LmmDesign) -> LrtResult:
    """ML likelihood-ratio test of s_u2 = 0 against a 50:50 chi2_0 / chi2_1 mixture."""
    ll0 = fit_ols_ml(d)
    ll1 = fit_ml(d).loglik
    stat = max(2.0 * (ll1 - ll0), 0.0)
    p = 1.0 if stat == 0.0 else 0.5 * float(stats.chi2.sf(stat, 1))
    return LrtResult(stat, p, ll0, ll1)


def predict(f: LmmFit, X_new, cluster_new=None, return_se: bool = False):
    """Xb plus the BLUP of each known cluster; unknown clusters get Xb only.

    Standard errors combine Var(x'b) with s_e2 and, for unknown clusters,
    s_u2; known clusters use the conditional variance s_u2 / (1 + phi n_c)
    of their random effect in place of s_u2.
    """
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim != 2 or X_new.shape[1] != len(f.beta):
        raise ValueError(f"dimension mismatch: expected {len(f.beta)} columns")
    pred = X_new @ f.beta
    re_var = np.full(len(pred), f.sigma_u2)
    if cluster_new is not None:
        lookup = {c: i for i, c in enumerate(f.cluster_labels.tolist())}
        idx = np.array([lookup.get(c, -1) for c in np.asarray(cluster_new).tolist()])
        known = idx >= 0
        pred[known] += f.blups[idx[known]]
        re_var[known] = f.sigma_u2 / (1.0 + f.phi * f.cluster_sizes[idx[known]])
    if not return_se:
        return pred
    fixed_var = np.einsum("ij,jk,ik->i", X_new, f.cov_beta, X_new)
    return pred, np.sqrt(fixed_var + re_var + f.sigma_e2)
