import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from koasev import mixedcorr as mc
from koasev.dataset import ColumnSpec, cohort_from_records


def _quad_bvn(x, y, rho):
    # independent oracle: P(X<=x, Y<=y) = int_{-inf}^{x} phi(s) Phi((y - rho s)/sqrt(1-rho^2)) ds
    s = np.sqrt(1 - rho * rho)
    val, _ = integrate.quad(lambda t: stats.norm.pdf(t) * stats.norm.cdf((y - rho * t) / s),
                            -np.inf, x, epsabs=1e-13, epsrel=1e-13)
    return val


def test_bvn_identities():
    assert mc.bvn_cdf(np.inf, np.inf, 0.3) == 1.0
    assert mc.bvn_cdf(0.0, 0.0, 0.0) == pytest.approx(0.25, abs=1e-10)
    assert mc.bvn_cdf(-np.inf, 1.0, 0.7) == 0.0
    x = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(mc.bvn_cdf(x[:, None], x[None, :], 0.0),
                               np.outer(stats.norm.cdf(x), stats.norm.cdf(x)), atol=1e-10)
    # orthant probability 1/4 + arcsin(rho)/(2 pi)
    for r in (-0.9, -0.3, 0.5, 0.95):
        assert mc.bvn_cdf(0.0, 0.0, r) == pytest.approx(0.25 + np.arcsin(r) / (2 * np.pi), abs=1e-12)


@given(st.floats(-4, 4), st.floats(-4, 4), st.floats(-0.99, 0.99))
def test_bvn_matches_quadrature(x, y, rho):
    assert mc.bvn_cdf(x, y, rho) == pytest.approx(_quad_bvn(x, y, rho), abs=1e-7)


def test_bvn_matches_scipy_mvn():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.uniform(-2.5, 2.5, 2)
        r = rng.uniform(-0.95, 0.95)
        ref = stats.multivariate_normal([0, 0], [[1, r], [r, 1]]).cdf([x, y])
        assert mc.bvn_cdf(x, y, r) == pytest.approx(ref, abs=1e-5)


def test_pearson():
    x = np.arange(10.0)
    assert mc.pearson(x, 2 * x + 1) == pytest.approx(1.0)
    assert mc.pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    rng = np.random.default_rng(1)
    assert abs(mc.pearson(rng.standard_normal(10_000), rng.standard_normal(10_000))) < 0.05
    with pytest.raises(mc.CorrelationError, match="constant"):
        mc.pearson([1, 1, 1, 1], [1, 2, 3, 4])


def test_thresholds():
    np.testing.assert_allclose(mc.estimate_thresholds([50, 50]), [0.0], atol=1e-15)
    np.testing.assert_allclose(mc.estimate_thresholds([25, 25, 50]),
                               [stats.norm.ppf(0.25), 0.0], atol=1e-12)
    with pytest.raises(mc.CorrelationError, match="empty category"):
        mc.estimate_thresholds([100, 0])


def _dichotomized(rho, n, seed):
    rng = np.random.default_rng(seed)
    z = rng.multivariate_normal([0, 0], [[1, rho], [rho, 1]], size=n)
    return (z[:, 0] > 0).astype(int), (z[:, 1] > 0).astype(int)


@pytest.mark.parametrize("rho", [-0.5, 0.0, 0.5])
def test_tetrachoric_recovery(rho):
    a, b = _dichotomized(rho, 200_000, seed=11)
    est = mc.polychoric(mc.contingency(a, b))
    assert est.converged and not est.boundary
    assert est.rho == pytest.approx(rho, abs=0.02)


def test_polychoric_independence_table():
    r, c = np.array([30.0, 50.0, 20.0]), np.array([0.4, 0.6])
    est = mc.polychoric(np.outer(r, c) * 10)
    assert abs(est.rho) < 0.01


def test_polychoric_concordant_is_boundary():
    est = mc.polychoric([[50, 0], [0, 50]])
    assert est.boundary and not est.converged and est.rho > 0.99


def test_polychoric_order_preserving_relabel():
    rng = np.random.default_rng(5)
    z = rng.multivariate_normal([0, 0], [[1, 0.4], [0.4, 1]], size=3000)
    a = np.digitize(z[:, 0], [-0.5, 0.6])
    b = np.digitize(z[:, 1], [0.0, 1.0])
    base = mc.polychoric_codes(a, b).rho
    # unused code values between observed levels must not matter
    assert mc.polychoric_codes(a * 3 + 1, b * 2).rho == pytest.approx(base, abs=1e-12)
    # reversing one variable's order flips the sign
    assert mc.polychoric_codes(2 - a, b).rho == pytest.approx(-base, abs=1e-4)


def test_polychoric_local_max():
    a, b = _dichotomized(0.3, 5000, seed=2)
    t = mc.contingency(a, b)
    est = mc.polychoric(t)
    rc, cc = mc.estimate_thresholds(t.sum(1)), mc.estimate_thresholds(t.sum(0))
    for d in (-0.05, 0.05):
        assert est.loglik >= mc.polychoric_loglik(est.rho + d, t, rc, cc)


def test_polyserial_perfect_latent():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(2000)
    est = mc.polyserial(x, np.digitize(x, [-0.5, 0.3, 1.0]))
    assert est.rho >= 0.99


def test_polyserial_independent():
    rng = np.random.default_rng(4)
    est = mc.polyserial(rng.standard_normal(10_000), rng.integers(0, 3, 10_000))
    assert abs(est.rho) < 0.05


def test_polyserial_likelihood_at_truth():
    rng = np.random.default_rng(6)
    rho = 0.5
    z = rng.multivariate_normal([0, 0], [[1, rho], [rho, 1]], size=4000)
    codes = (z[:, 1] > 0).astype(int)
    x = (z[:, 0] - z[:, 0].mean()) / z[:, 0].std()
    cuts = mc.estimate_thresholds(np.bincount(codes))
    ll = mc.polyserial_loglik(rho, x, codes, cuts)
    assert ll >= mc.polyserial_loglik(rho + 0.2, x, codes, cuts)
    assert ll >= mc.polyserial_loglik(rho - 0.2, x, codes, cuts)
    assert mc.polyserial(z[:, 0], codes).rho == pytest.approx(rho, abs=0.05)


def test_polyserial_errors():
    with pytest.raises(mc.CorrelationError):
        mc.polyserial(np.arange(5.0), np.array([0, 1, 0, 1, 0]))
    with pytest.raises(mc.CorrelationError, match="fewer than 2"):
        mc.polyserial(np.arange(20.0), np.zeros(20, dtype=int))


def _mixed_cohort(n=300, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.multivariate_normal(np.zeros(4), 0.5 * np.eye(4) + 0.5, size=n)
    schema = [ColumnSpec("pid", "categorical", "patient_id"),
              ColumnSpec("side", "categorical", "knee_side"),
              ColumnSpec("kl", "numeric", "response"),
              ColumnSpec("a", "numeric", "predictor"),
              ColumnSpec("b", "numeric", "predictor"),
              ColumnSpec("c", "binary", "predictor", ("no", "yes")),
              ColumnSpec("d", "categorical", "predictor", ("lo", "mid", "hi"))]
    rec = dict(pid=[f"P{i}" for i in range(n)], side=["left"] * n, kl=[0.0] * n,
               a=list(z[:, 0]), b=[None if i % 17 == 0 else v for i, v in enumerate(z[:, 1])],
               c=list((z[:, 2] > 0.3).astype(int)), d=list(np.digitize(z[:, 3], [-0.4, 0.5])))
    return cohort_from_records(schema, rec)


def test_matrix_dispatch_and_symmetry():
    c = _mixed_cohort()
    cm = mc.correlation_matrix(c)
    np.testing.assert_array_equal(cm.R, cm.R.T)
    assert np.all(np.diag(cm.R) == 1.0)
    assert np.all(np.abs(cm.R) <= 1.0)
    assert cm.method[0, 1] == "pearson" and cm.method[0, 2] == "polyserial"
    assert cm.method[2, 3] == "polychoric" and cm.method[3, 1] == "polyserial"
    assert len(cm.long_table()) == 16


def test_matrix_matches_pairwise_calls():
    c = _mixed_cohort(seed=1)
    cm = mc.correlation_matrix(c, ["a", "c", "d"])
    assert cm.R[0, 1] == mc.pair_correlation(c, "a", "c").rho
    assert cm.R[1, 2] == mc.pair_correlation(c, "c", "d").rho
    assert cm.R[0, 2] == mc.pair_correlation(c, "a", "d").rho


def test_all_numeric_is_pearson():
    c = _mixed_cohort().select_columns(["a", "b"])
    cm = mc.correlation_matrix(c)
    assert set(cm.method.ravel()) == {"pearson"}


def test_failed_pair_is_flagged():
    c = _mixed_cohort(40)
    c.data["a"][:] = 1.0
    cm = mc.correlation_matrix(c)
    assert np.isnan(cm.R[0, 1]) and not cm.converged[0, 1]
    assert ("a", "b") in cm.notes
