"""Mixed-type latent correlations: Pearson, polyserial and polychoric.

Ordinal variables (binary ones included) are modelled as a standard normal
latent cut at thresholds. Estimation is two-step: thresholds come from the
marginal proportions, then the correlation maximises the likelihood over
rho in (-0.999, 0.999) by a coarse grid scan followed by golden-section
refinement.

The bivariate normal CDF follows Genz's adaptation of the
Drezner-Wesolowsky method (20-point Gauss-Legendre on the arcsine
integral for |rho| < 0.925, Taylor-corrected integral near +-1). Its
absolute error is below 1e-14 in tests against adaptive quadrature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .dataset import Cohort

RHO_BOUND = 0.999
GOLDEN_TOL = 1e-6
GOLDEN_MAX_ITER = 200

_GL_T, _GL_W = np.polynomial.legendre.leggauss(20)
_GL_X = 1.0 + _GL_T  # nodes on [0, 2]
_TWO_PI = 2.0 * np.pi


class CorrelationError(ValueError):
    pass


def _bvnu(h, k, r):
    """P(X > h, Y > k) for finite arrays ``h``, ``k`` and scalar ``r``."""
    hk = h * k
    if abs(r) < 0.925:
        hs = (h * h + k * k) / 2.0
        asr = np.arcsin(r) / 2.0
        sn = np.sin(asr * _GL_X)  # (20,)
        e = np.exp((sn * hk[..., None] - hs[..., None]) / (1.0 - sn * sn))
        return e @ _GL_W * asr / _TWO_PI + ndtr(-h) * ndtr(-k)
    if r < 0:
        k = -k
        hk = -hk
    bvn = np.zeros_like(h)
    if abs(r) < 1.0:
        a_s = 1.0 - r * r
        a = np.sqrt(a_s)
        bs = (h - k) ** 2
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 80.0
        asr = -(bs / a_s + hk) / 2.0
        with np.errstate(under="ignore", over="ignore"):
            bvn = np.where(
                asr > -100, a * np.exp(asr) * (1 - c * (bs - a_s) * (1 - d * bs) / 3 + c * d * a_s**2), 0.0
            )
            b = np.sqrt(bs)
            sp = np.sqrt(_TWO_PI) * ndtr(-b / a)
            bvn = np.where(hk > -100, bvn - np.exp(-hk / 2) * sp * b * (1 - c * bs * (1 - d * bs) / 3), bvn)
            a2 = a / 2.0
            xs = (a2 * _GL_X) ** 2  # (20,)
            asr2 = -(bs[..., None] / xs + hk[..., None]) / 2.0
            sp2 = 1.0 + c[..., None] * xs * (1.0 + 5.0 * d[..., None] * xs)
            rs = np.sqrt(1.0 - xs)
            ep = np.exp(-(hk[..., None] / 2.0) * xs / (1.0 + rs) ** 2) / rs
            terms = np.where(asr2 > -100, np.exp(asr2) * (sp2 - ep), 0.0)
            bvn = (a2 * (terms @ _GL_W) - bvn) / _TWO_PI
    if r > 0:
        return bvn + ndtr(-np.maximum(h, k))
    # r < 0; k was negated above
    lower = np.where(h < 0, ndtr(k) - ndtr(h), ndtr(-h) - ndtr(-k))
    return np.where(h >= k, -bvn, lower - bvn)


def bvn_cdf(x, y, rho: float):
    """Bivariate standard normal CDF P(X <= x, Y <= y) with correlation ``rho``.

    ``x`` and ``y`` broadcast against each other and may contain +-inf.
    """
    if not -1.0 <= rho <= 1.0:
        raise CorrelationError(f"rho {rho} outside [-1, 1]")
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    out = np.empty(x.shape)
    lo = (x == -np.inf) | (y == -np.inf)
    xinf = x == np.inf
    yinf = y == np.inf
    out[lo] = 0.0
    m = ~lo & xinf
    out[m] = ndtr(y[m])
    m = ~lo & ~xinf & yinf
    out[m] = ndtr(x[m])
    fin = ~lo & ~xinf & ~yinf
    if fin.any():
        h, k = -x[fin], -y[fin]
        if rho == 0.0:
            vals = ndtr(x[fin]) * ndtr(y[fin])
        else:
            vals = _bvnu(h, k, float(rho))
        out[fin] = np.clip(vals, 0.0, 1.0)
    return out if out.ndim else float(out)


# --------------------------------------------------------------------------
# scalar estimators


@dataclass(frozen=True)
class CorrEstimate:
    rho: float
    method: str
    converged: bool
    boundary: bool = False
    loglik: float = float("nan")
    n: int = 0
    note: str = ""


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise CorrelationError("x and y differ in length")
    ok = ~(np.isnan(x) | np.isnan(y))
    x, y = x[ok], y[ok]
    if len(x) < 3:
        raise CorrelationError("need at least 3 complete pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0 or syy == 0:
        raise CorrelationError("undefined correlation: constant input")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def estimate_thresholds(counts) -> np.ndarray:
    """Latent cut points Phi^-1 of cumulative proportions (length c-1)."""
    counts = np.asarray(counts, dtype=float)
    if len(counts) < 2:
        raise CorrelationError("need at least 2 categories")
    if np.any(counts <= 0):
        raise CorrelationError("empty category: threshold is degenerate")
    cum = np.cumsum(counts)[:-1] / counts.sum()
    return ndtri(cum)


def golden_max(f, lo: float, hi: float, tol: float = GOLDEN_TOL, max_iter: int = GOLDEN_MAX_ITER):
    """Golden-section maximisation of a unimodal ``f`` on [lo, hi].

    Returns (argmax, fmax, converged).
    """
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    it = 0
    while b - a > tol and it < max_iter:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
        it += 1
    x = (a + b) / 2.0
    fx = f(x)
    # keep the best evaluated point; the midpoint is not always it
    best = max(((fx, x), (fc, c), (fd, d)))
    return best[1], best[0], b - a <= tol


def _bracket_max(loglik, n_grid: int = 41):
    grid = np.linspace(-RHO_BOUND, RHO_BOUND, n_grid)
    vals = np.array([loglik(r) for r in grid])
    i = int(np.argmax(vals))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, n_grid - 1)]
    rho, ll, conv = golden_max(loglik, lo, hi)
    if vals[i] > ll:
        rho, ll = grid[i], vals[i]
    boundary = abs(rho) >= RHO_BOUND - 2 * GOLDEN_TOL
    return float(rho), float(ll), bool(conv and not boundary), bool(boundary)


def polychoric_loglik(rho: float, table, row_cuts, col_cuts) -> float:
    table = np.asarray(table, dtype=float)
    a = np.concatenate(([-np.inf], row_cuts, [np.inf]))
    b = np.concatenate(([-np.inf], col_cuts, [np.inf]))
    F = bvn_cdf(a[:, None], b[None, :], rho)
    P = F[1:, 1:] - F[:-1, 1:] - F[1:, :-1] + F[:-1, :-1]
    P = np.maximum(P, 1e-300)
    nz = table > 0
    return float(np.sum(table[nz] * np.log(P[nz])))


def polychoric(table) -> CorrEstimate:
    """Two-step polychoric correlation of a contingency table."""
    table = np.asarray(table, dtype=float)
    if table.ndim != 2 or min(table.shape) < 2:
        raise CorrelationError("need at least a 2x2 table")
    if np.any(table < 0):
        raise CorrelationError("negative counts")
    if np.any(table.sum(1) == 0) or np.any(table.sum(0) == 0):
        raise CorrelationError("table has an all-zero row or column")
    rc = estimate_thresholds(table.sum(1))
    cc = estimate_thresholds(table.sum(0))
    rho, ll, conv, bnd = _bracket_max(lambda r: polychoric_loglik(r, table, rc, cc))
    return CorrEstimate(rho, "polychoric", conv, bnd, ll, int(table.sum()))


def polyserial_loglik(rho: float, z, codes, cuts) -> float:
    """Conditional log-likelihood of ordinal ``codes`` given standardized ``z``."""
    s = np.sqrt(1.0 - rho * rho)
    tau = np.concatenate(([-np.inf], cuts, [np.inf]))
    upper = (tau[codes + 1] - rho * z) / s
    lower = (tau[codes] - rho * z) / s
    p = ndtr(upper) - ndtr(lower)
    return float(np.sum(np.log(np.maximum(p, 1e-300))))


def _compact_codes(codes):
    """Map observed codes onto 0..k-1 preserving order."""
    levels, inv = np.unique(codes, return_inverse=True)
    return inv, len(levels)


def polyserial(x, codes) -> CorrEstimate:
    """Two-step polyserial correlation of numeric ``x`` with ordinal ``codes``.

    Missing entries (nan in ``x``, negative codes) are dropped pairwise.
    Unobserved categories are collapsed, so only order matters.
    """
    x = np.asarray(x, dtype=float)
    codes = np.asarray(codes)
    ok = ~np.isnan(x) & (codes >= 0)
    x, codes = x[ok], codes[ok]
    if len(x) < 10:
        raise CorrelationError("need at least 10 complete pairs")
    sd = x.std()
    if sd == 0:
        raise CorrelationError("undefined correlation: constant numeric input")
    codes, k = _compact_codes(codes)
    if k < 2:
        raise CorrelationError("ordinal variable has fewer than 2 observed categories")
    z = (x - x.mean()) / sd
    cuts = estimate_thresholds(np.bincount(codes, minlength=k))
    rho, ll, conv, bnd = _bracket_max(lambda r: polyserial_loglik(r, z, codes, cuts))
    return CorrEstimate(rho, "polyserial", conv, bnd, ll, len(x))


def contingency(a, b) -> np.ndarray:
    """Pairwise-complete table of two code vectors with unobserved levels removed."""
    a = np.asarray(a)
    b = np.asarray(b)
    ok = (a >= 0) & (b >= 0)
    a, ka = _compact_codes(a[ok])
    b, kb = _compact_codes(b[ok])
    table = np.zeros((ka, kb))
    np.add.at(table, (a, b), 1.0)
    return table


def polychoric_codes(a, b) -> CorrEstimate:
    table = contingency(a, b)
    if min(table.shape) < 2:
        raise CorrelationError("a variable has fewer than 2 observed categories")
    return polychoric(table)


# --------------------------------------------------------------------------
# correlation matrix


@dataclass(frozen=True)
class CorrelationMatrix:
    names: list
    R: np.ndarray
    method: np.ndarray
    converged: np.ndarray
    notes: dict

    def long_table(self) -> list[dict]:
        rows = []
        p = len(self.names)
        for i in range(p):
            for j in range(p):
                rows.append(dict(
                    var1=self.names[i], var2=self.names[j], correlation=self.R[i, j],
                    method=self.method[i, j], converged=bool(self.converged[i, j]),
                ))
        return rows


HEATMAP_COLUMNS = ("var1", "var2", "correlation", "method", "converged")


def pair_method(kind_a: str, kind_b: str) -> str:
    num_a, num_b = kind_a == "numeric", kind_b == "numeric"
    if num_a and num_b:
        return "pearson"
    if num_a or num_b:
        return "polyserial"
    return "polychoric"


def pair_correlation(cohort: Cohort, a: str, b: str) -> CorrEstimate:
    ka, kb = cohort.spec(a).kind, cohort.spec(b).kind
    method = pair_method(ka, kb)
    xa, xb = cohort.data[a], cohort.data[b]
    if method == "pearson":
        r = pearson(xa, xb)
        return CorrEstimate(r, method, True)
    if method == "polyserial":
        return polyserial(xa, xb) if ka == "numeric" else polyserial(xb, xa)
    return polychoric_codes(xa, xb)


def correlation_matrix(cohort: Cohort, names=None) -> CorrelationMatrix:
    """Correlation matrix over the cohort's predictors (pairwise-complete).

    Failed pairs are stored as nan with ``converged`` false and the reason
    in ``notes[(a, b)]``.
    """
    names = list(cohort.predictors if names is None else names)
    if len(names) < 2:
        raise CorrelationError("need at least 2 predictor columns")
    p = len(names)
    R = np.eye(p)
    method = np.empty((p, p), dtype=object)
    conv = np.ones((p, p), dtype=bool)
    notes = {}
    for i in range(p):
        ki = cohort.spec(names[i]).kind
        method[i, i] = pair_method(ki, ki)
        for j in range(i + 1, p):
            kj = cohort.spec(names[j]).kind
            m = pair_method(ki, kj)
            try:
                est = pair_correlation(cohort, names[i], names[j])
                r, c = est.rho, est.converged
                if est.boundary:
                    notes[(names[i], names[j])] = "boundary estimate"
            except CorrelationError as exc:
                r, c = float("nan"), False
                notes[(names[i], names[j])] = str(exc)
            R[i, j] = R[j, i] = r
            method[i, j] = method[j, i] = m
            conv[i, j] = conv[j, i] = c
    return CorrelationMatrix(names, R, method, conv, notes)
