"""Elastic net regression by cyclic coordinate descent.

The objective is taken literally, without 1/2 or 1/n factors::

    sum_i (y_i - yhat_i)^2 + lam * ((1 - alpha) * sum_j theta_j^2 + alpha * sum_j |theta_j|)

with an unpenalised intercept. With ``standardize`` the penalty applies to
coefficients of columns scaled to unit population variance; reported
coefficients are always on the original column scale.

Relation to the glmnet / scikit-learn convention
``(1/2n) RSS + lam_g * ((1 - a_g)/2 ||b||^2 + a_g ||b||_1)``: see
:func:`to_glmnet`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def soft_threshold(z: float, gamma: float) -> float:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return float(np.sign(z) * max(abs(z) - gamma, 0.0))


def to_glmnet(lam: float, alpha: float, n: int) -> tuple[float, float]:
    """Map (lam, alpha) here to glmnet's (lambda, alpha) for ``n`` rows."""
    lam_g = lam * (2.0 - alpha) / (2.0 * n)
    return lam_g, alpha / (2.0 - alpha)


@dataclass
class EnConfig:
    alpha: float = 0.5
    lambda_grid: np.ndarray | None = None
    n_lambda: int = 100
    lambda_min_ratio: float = 1e-4
    standardize: bool = True
    tol: float = 1e-10
    max_iter: int = 100_000

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.lambda_grid is not None:
            g = np.asarray(self.lambda_grid, dtype=float)
            if np.any(g <= 0) or np.any(np.diff(g) >= 0):
                raise ValueError("lambda_grid must be positive and strictly descending")
            self.lambda_grid = g


@dataclass
class ElasticNetFit:
    intercept: float
    theta: np.ndarray
    lam: float
    alpha: float
    lambdas: np.ndarray = field(repr=False)
    path: np.ndarray = field(repr=False)
    intercepts: np.ndarray = field(repr=False)
    n_nonzero: np.ndarray = field(repr=False)
    converged: bool = True
    n_sweeps: int = 0

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.theta):
            raise ValueError(f"expected {len(self.theta)} columns")
        return self.intercept + X @ self.theta


@dataclass
class _Prepared:
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    G: np.ndarray
    c: np.ndarray
    yy: float
    n: int


def _prepare(X, y, standardize) -> _Prepared:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(y) != X.shape[0]:
        raise ValueError("X must be n x p with len(y) == n")
    n, p = X.shape
    if n < 2 or p < 1:
        raise ValueError("need n >= 2 and p >= 1")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in X or y")
    x_mean = X.mean(0)
    Xc = X - x_mean
    scale = np.ones(p)
    if standardize:
        sd = Xc.std(0)
        scale = np.where(sd > 0, sd, 1.0)
    Xs = Xc / scale
    yc = y - y.mean()
    return _Prepared(x_mean, scale, float(y.mean()), Xs.T @ Xs, Xs.T @ yc, float(yc @ yc), n)


def lambda_max(X, y, alpha: float = 0.5, standardize: bool = True) -> float:
    """Smallest lambda with an all-zero solution: (2/alpha) max_j |x_j'(y - ybar)|."""
    prep = _prepare(X, y, standardize)
    return _lambda_max(prep, alpha)


def _lambda_max(prep, alpha):
    # alpha = 0 has no finite lambda_max; use glmnet's floor for the grid
    return 2.0 * float(np.max(np.abs(prep.c))) / max(alpha, 1e-3)


def lambda_grid(X, y, cfg: EnConfig) -> np.ndarray:
    if cfg.lambda_grid is not None:
        return cfg.lambda_grid
    return _auto_grid(_prepare(X, y, cfg.standardize), cfg)


def _auto_grid(prep, cfg):
    lmax = _lambda_max(prep, cfg.alpha)
    if lmax == 0:
        lmax = 1.0
    return np.geomspace(lmax, lmax * cfg.lambda_min_ratio, cfg.n_lambda)


def objective(X, y, intercept, theta, lam, alpha) -> float:
    """Penalised SSE on the scale the coefficients are given in."""
    r = y - intercept - X @ theta
    return float(r @ r + lam * ((1 - alpha) * theta @ theta + alpha * np.abs(theta).sum()))


def _cd(prep: _Prepared, lam, alpha, theta, tol, max_iter, trace=None):
    """Coordinate descent on the standardized problem, covariance updates.

    ``grad`` holds x_j'r. Sweeps alternate between a full pass and passes
    over the active set until the full pass moves nothing more than ``tol``.
    """
    G, c = prep.G, prep.c
    diag = np.diag(G)
    l1 = lam * alpha / 2.0
    denom = diag + lam * (1.0 - alpha)
    grad = c - G @ theta
    p = len(theta)
    sweeps = 0
    full = np.arange(p)
    idx = full
    while sweeps < max_iter:
        max_delta = 0.0
        for j in idx:
            if denom[j] == 0.0:
                continue
            old = theta[j]
            z = grad[j] + diag[j] * old
            new = np.sign(z) * max(abs(z) - l1, 0.0) / denom[j]
            if new != old:
                delta = new - old
                theta[j] = new
                grad -= G[:, j] * delta
                max_delta = max(max_delta, abs(delta))
        sweeps += 1
        if trace is not None:
            trace.append(theta.copy())
        if max_delta < tol:
            if idx is full:
                return theta, True, sweeps
            idx = full
        else:
            active = np.flatnonzero(theta)
            idx = active if (idx is full and len(active) < p) else idx
    return theta, False, sweeps


def _unscale(prep, theta_s):
    theta = theta_s / prep.x_scale
    return prep.y_mean - prep.x_mean @ theta, theta


def path(X, y, cfg: EnConfig, lambdas=None, prep=None) -> ElasticNetFit:
    """Warm-started solutions along a descending lambda sequence.

    The returned fit carries the last lambda's solution as its coefficients.
    """
    prep = prep or _prepare(X, y, cfg.standardize)
    lambdas = np.asarray(lambdas if lambdas is not None else (
        cfg.lambda_grid if cfg.lambda_grid is not None else _auto_grid(prep, cfg)), dtype=float)
    p = len(prep.c)
    theta = np.zeros(p)
    coefs = np.empty((len(lambdas), p))
    ints = np.empty(len(lambdas))
    converged, total = True, 0
    for i, lam in enumerate(lambdas):
        theta, ok, sweeps = _cd(prep, lam, cfg.alpha, theta, cfg.tol, cfg.max_iter)
        converged &= ok
        total += sweeps
        ints[i], coefs[i] = _unscale(prep, theta)
    return ElasticNetFit(
        intercept=float(ints[-1]), theta=coefs[-1].copy(), lam=float(lambdas[-1]),
        alpha=cfg.alpha, lambdas=lambdas, path=coefs, intercepts=ints,
        n_nonzero=np.count_nonzero(coefs, axis=1), converged=bool(converged), n_sweeps=total,
    )


def fit(X, y, cfg: EnConfig | None = None, lam: float | None = None) -> ElasticNetFit:
    """Fit at a single ``lam``, warm-started through the grid values above it."""
    cfg = cfg or EnConfig()
    prep = _prepare(X, y, cfg.standardize)
    grid = cfg.lambda_grid if cfg.lambda_grid is not None else _auto_grid(prep, cfg)
    if lam is None:
        lam = float(grid[-1])
    if lam <= 0:
        raise ValueError("lambda must be positive")
    seq = np.append(grid[grid > lam], lam)
    return path(X, y, cfg, seq, prep)


def cd_trace(X, y, cfg: EnConfig, lam: float) -> list[np.ndarray]:
    """Original-scale coefficient vectors after each sweep, from a zero start."""
    prep = _prepare(X, y, cfg.standardize)
    trace = []
    _cd(prep, lam, cfg.alpha, np.zeros(len(prep.c)), cfg.tol, cfg.max_iter, trace)
    return [_unscale(prep, t) for t in trace]


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class CvResult:
    lambdas: np.ndarray
    mean_rmse: np.ndarray
    se_rmse: np.ndarray
    n_nonzero: np.ndarray
    folds: int
    repeats: int
    seed: int
    chosen_lambda: float
    fold_rmse: np.ndarray = field(repr=False)

    @property
    def chosen_index(self) -> int:
        return int(np.flatnonzero(self.lambdas == self.chosen_lambda)[0])

    def curve_rows(self) -> list[dict]:
        return [
            dict(**{"lambda": l}, mean_rmse=m, se=s, n_nonzero=int(k))
            for l, m, s, k in zip(self.lambdas, self.mean_rmse, self.se_rmse, self.n_nonzero)
        ]


CV_CURVE_COLUMNS = ("lambda", "mean_rmse", "se", "n_nonzero")


def group_folds(groups, k: int, rng) -> list[np.ndarray]:
    """Row-index folds that partition the distinct ``groups``."""
    groups = np.asarray(groups)
    uniq, inv = np.unique(groups, return_inverse=True)
    if k < 2:
        raise ValueError("need k >= 2 folds")
    if k > len(uniq):
        raise ValueError(f"{k} folds but only {len(uniq)} groups: a fold would have zero rows")
    perm = rng.permutation(len(uniq))
    fold_of_group = np.empty(len(uniq), dtype=int)
    for f, chunk in enumerate(np.array_split(perm, k)):
        fold_of_group[chunk] = f
    fold = fold_of_group[inv]
    return [np.flatnonzero(fold == f) for f in range(k)]


def cross_validate(X, y, groups=None, cfg: EnConfig | None = None, k: int = 10,
                   repeats: int = 5, seed: int = 0) -> CvResult:
    """Repeated grouped k-fold CV over the lambda grid.

    Without ``groups`` every row is its own group. The grid is built once on
    the full data. The chosen lambda minimises mean validation RMSE, ties
    going to the larger lambda.
    """
    cfg = cfg or EnConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    groups = np.arange(len(y)) if groups is None else np.asarray(groups)
    grid = lambda_grid(X, y, cfg)
    rng = np.random.default_rng(seed)
    scores = np.empty((repeats * k, len(grid)))
    row = 0
    for _ in range(repeats):
        for test in group_folds(groups, k, rng):
            train = np.ones(len(y), dtype=bool)
            train[test] = False
            f = path(X[train], y[train], cfg, grid)
            pred = f.intercepts[:, None] + f.path @ X[test].T
            scores[row] = np.sqrt(np.mean((pred - y[test]) ** 2, axis=1))
            row += 1
    mean = scores.mean(0)
    se = scores.std(0, ddof=1) / np.sqrt(len(scores)) if len(scores) > 1 else np.zeros(len(grid))
    full = path(X, y, cfg, grid)
    chosen = float(grid[int(np.argmin(mean))])
    return CvResult(grid, mean, se, full.n_nonzero, k, repeats, seed, chosen, scores)


def contributions(f: ElasticNetFit, names) -> list[tuple[str, float]]:
    """Nonzero coefficients sorted by decreasing magnitude, sign kept."""
    names = list(names)
    if len(names) != len(f.theta):
        raise ValueError("names and coefficients differ in length")
    nz = [(names[j], float(f.theta[j])) for j in np.flatnonzero(f.theta)]
    return sorted(nz, key=lambda t: -abs(t[1]))


# --------------------------------------------------------------------------
# model file

MODEL_FORMAT = "koasev-elastic-net"
MODEL_VERSION = 1


def save_model(f: ElasticNetFit, names, path_):
    from .textio import write_kv

    write_kv(path_, {
        "format": MODEL_FORMAT, "version": MODEL_VERSION, "alpha": f.alpha,
        "lambda": f.lam, "intercept": f.intercept, "converged": f.converged,
        "features": list(names), "theta": f.theta,
    }, header="elastic net model; objective SSE + lambda*((1-alpha)*|theta|^2 + alpha*|theta|_1)")


def load_model(path_) -> tuple[ElasticNetFit, list[str]]:
    from .textio import parse_floats, read_kv

    kv = read_kv(path_)
    if kv.get("format") != MODEL_FORMAT or int(kv.get("version", 0)) != MODEL_VERSION:
        raise ValueError(f"{path_}: not a version {MODEL_VERSION} elastic net model")
    theta = parse_floats(kv["theta"])
    names = kv["features"].split(",") if kv["features"] else []
    lam = float(kv["lambda"])
    fit_ = ElasticNetFit(
        float(kv["intercept"]), theta, lam, float(kv["alpha"]), np.array([lam]), theta[None, :],
        np.array([float(kv["intercept"])]), np.array([np.count_nonzero(theta)]),
        kv["converged"] == "true",
    )
    return fit_, names
