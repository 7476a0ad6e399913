import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

import oracles
from countshrink.ebfit import BoundaryWarning, FitConfig, fit, shrink
from countshrink.estimators import (
    NPMLESolution,
    TwoGroupsParams,
    fit_gamma_poisson,
    fit_zip,
    global_gamma,
    horseshoe,
    kw_npmle,
    kw_posterior_mean,
    kw_weight,
    npmle_grid,
    robbins,
    two_groups_inclusion,
    two_groups_weight,
    zip_bayes,
)
from countshrink.gh import GHParams, shrinkage


def point_mass(c, extra=()):
    support = np.sort(np.r_[[c], extra])
    mass = (support == c).astype(float)
    return NPMLESolution(support=support, mass=mass, loglik=0.0, iters=0, loglik_trace=np.zeros(1))


def two_atom(atoms, masses):
    return NPMLESolution(
        support=np.asarray(atoms, float), mass=np.asarray(masses, float), loglik=0.0, iters=0, loglik_trace=np.zeros(1)
    )


# ---------------------------------------------------------------------------
# Robbins


def test_robbins_examples():
    assert robbins([0, 0, 1]).tolist() == [0.5, 0.5, 0.0]
    assert robbins([5, 5, 5, 5]).tolist() == [0.0] * 4
    assert robbins([0, 1, 1, 2]).tolist() == [2.0, 1.0, 1.0, 0.0]


def test_robbins_is_bayes_ratio_with_empirical_marginal():
    # the Bayes rule written through the marginal, (y+1) P(y+1)/P(y), with P
    # the empirical frequencies, is Robbins' estimator
    y = np.array([0, 0, 0, 1, 1, 2, 4, 4, 5])
    freq = {v: np.mean(y == v) for v in range(7)}
    expected = [(v + 1) * freq[v + 1] / freq[v] for v in y]
    assert np.allclose(robbins(y), expected, rtol=1e-15, atol=0)


# ---------------------------------------------------------------------------
# Kiefer-Wolfowitz


def test_npmle_grid_shape():
    g = npmle_grid(0)
    assert g.size == 400 and g[0] == pytest.approx(1e-3) and g[-1] == pytest.approx(1.0)
    g = npmle_grid(100, 50)
    assert g.size == 50 and np.all(np.diff(g) > 0) and g[-1] == pytest.approx(130.0)


def test_kw_point_mass_for_identical_counts():
    sol = kw_npmle(np.full(50, 3))
    near = np.argsort(np.abs(sol.support - 3.0))[:2]
    assert sol.mass[near].sum() >= 0.99
    assert sol.mass.sum() == pytest.approx(1.0, abs=1e-10)


def test_kw_matches_two_atom_brute_force():
    y = np.array([0, 0, 0, 8, 8])
    grid = np.linspace(0.01, 12, 300)
    sol = kw_npmle(y, grid=grid, tol=1e-15, max_iters=10000)
    ref = oracles.brute_two_atom_loglik(y, grid)
    assert sol.loglik == pytest.approx(ref, abs=1e-6)
    assert sol.loglik <= ref + 1e-9


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=2, max_size=200), st.integers(20, 120))
def test_kw_loglik_nondecreasing_and_valid(y, grid_size):
    sol = kw_npmle(y, grid_size=grid_size)
    # ascent up to rounding of the log-likelihood sum
    slack = 1e-12 * np.maximum(1.0, np.abs(sol.loglik_trace[:-1]))
    assert np.all(np.diff(sol.loglik_trace) >= -slack)
    assert sol.loglik == sol.loglik_trace[-1]
    assert np.all(sol.mass >= 0) and sol.mass.sum() == pytest.approx(1.0, abs=1e-10)
    assert np.all(np.diff(sol.support) > 0)
    direct = float(np.sum(sol.log_marginal(np.asarray(y))))
    assert sol.loglik == pytest.approx(direct, rel=1e-10, abs=1e-9)


def test_kw_nonconvergence_is_flagged():
    rng = np.random.default_rng(0)
    sol = kw_npmle(rng.poisson(rng.gamma(1, 3, 300)), max_iters=3, tol=1e-15)
    assert sol.iters == 3 and not sol.converged


def test_kw_rejects_bad_arguments():
    with pytest.raises(ValueError):
        kw_npmle([1, 2], grid_size=1)
    with pytest.raises(ValueError):
        kw_npmle([1, 2], tol=0)
    with pytest.raises(ValueError):
        kw_npmle([1, 2], grid=[2.0, 1.0])


def test_kw_posterior_mean_examples():
    sol = point_mass(2.5, extra=[0.5, 7.0])
    assert np.allclose(kw_posterior_mean(sol, [0, 3, 9]), 2.5, rtol=1e-14)
    sol = two_atom([0.01, 8.0], [0.6, 0.4])
    y = 8
    f = [m * math.exp(-t) * t**y / math.factorial(y) for t, m in zip(sol.support, sol.mass)]
    expected = (0.01 * f[0] + 8.0 * f[1]) / (f[0] + f[1])
    assert kw_posterior_mean(sol, y)[0] == pytest.approx(expected, rel=1e-13)


def test_kw_posterior_mean_underflow_flag():
    sol = point_mass(0.01, extra=[0.02])
    est, flag = kw_posterior_mean(sol, [0, 5000], return_flag=True)
    assert flag.tolist() == [False, True] and est[1] == 0.0


def test_kw_posterior_mean_monotone():
    rng = np.random.default_rng(4)
    sol = kw_npmle(rng.poisson(np.where(rng.random(400) < 0.2, 5.0, 0.1)))
    est = kw_posterior_mean(sol, np.arange(40))
    assert np.all(np.diff(est) >= -1e-12)


def test_kw_weight_examples_and_bayes_identity():
    sol = point_mass(3.0, extra=[1.0])
    y = np.arange(6)
    assert np.allclose(kw_weight(sol, y), 3.0 / (y + 1), rtol=1e-13)
    assert kw_weight(point_mass(0.01, extra=[1.0]), 0)[0] == pytest.approx(0.01, rel=1e-13)
    sol = two_atom([0.01, 8.0], [0.6, 0.4])
    for v in range(12):
        pg = [sum(m * stats.poisson.pmf(k, t) for t, m in zip(sol.support, sol.mass)) for k in (v, v + 1)]
        assert kw_weight(sol, v)[0] == pytest.approx(pg[1] / pg[0], rel=1e-12)
        # the Bayes mean is the same ratio times (y + 1)
        assert kw_posterior_mean(sol, v)[0] == pytest.approx((v + 1) * pg[1] / pg[0], rel=1e-12)


# ---------------------------------------------------------------------------
# global gamma


def test_global_gamma_equidispersed_fallback():
    y = np.array([1, 3] * 50)  # mean 2, variance 1
    est, g = global_gamma(y, return_fit=True)
    assert g.fallback
    assert np.all(np.abs(est - 2.0) < np.abs(y - 2.0))
    y = np.array([0, 2, 4] * 40)  # mean 2, variance 8/3
    assert not global_gamma(y, return_fit=True)[1].fallback
    y = np.r_[np.zeros(100), np.full(100, 4)].astype(int)
    assert not fit_gamma_poisson(y).fallback


def test_global_gamma_recovers_shape():
    shapes = []
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        y = rng.poisson(rng.gamma(1.0, 1.0, 5000))
        shapes.append(global_gamma(y, return_fit=True)[1].shape)
    assert abs(np.median(shapes) - 1.0) <= 0.2


def test_global_gamma_is_profile_maximum():
    rng = np.random.default_rng(2)
    y = rng.poisson(rng.gamma(0.7, 3.0, 800))
    g = fit_gamma_poisson(y)

    def ll(a, b):
        return stats.nbinom.logpmf(y, a, b / (1 + b)).sum()

    best = ll(g.shape, g.rate)
    for da in (0.97, 1.03):
        for db in (0.97, 1.03):
            assert best >= ll(g.shape * da, g.rate * db)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=2, max_size=100).filter(lambda v: len(set(v)) > 1))
def test_global_gamma_convex_combination(y):
    est, g = global_gamma(y, return_fit=True)
    assert np.all(np.isfinite(est)) and np.all(est >= 0)
    assert np.all(est > min(y)) and np.all(est < max(y) + g.shape)


# ---------------------------------------------------------------------------
# zero-inflated gamma-Poisson


def test_zip_all_zero():
    est, z = zip_bayes(np.zeros(30, dtype=int), return_fit=True)
    assert np.all(est == 0) and z.flagged and z.pi == pytest.approx(1.0, abs=1e-5)


def test_zip_recovers_structural_zero_fraction():
    pis = []
    for seed in range(20):
        rng = np.random.default_rng(900 + seed)
        y = np.where(rng.random(2000) < 0.5, 0, rng.poisson(4.0, 2000))
        pis.append(fit_zip(y).pi)
    assert abs(np.median(pis) - 0.5) <= 0.05


def test_zip_zero_estimates_discounted():
    rng = np.random.default_rng(3)
    y = np.where(rng.random(600) < 0.4, 0, rng.poisson(rng.gamma(2, 1.5, 600)))
    est, z = zip_bayes(y, return_fit=True)
    assert np.all(est[y == 0] < z.gamma.shape / (1 + z.gamma.rate))
    assert np.all(est[y > 0] == (y[y > 0] + z.gamma.shape) / (1 + z.gamma.rate))


def test_zip_equals_global_without_zeros():
    rng = np.random.default_rng(6)
    y = 1 + rng.poisson(rng.gamma(2.0, 2.0, 500))
    est, z = zip_bayes(y, return_fit=True)
    assert z.flagged and z.pi == 1e-6
    assert np.allclose(est, global_gamma(y), rtol=0, atol=1e-6)


def test_zip_likelihood_is_maximal():
    # local perturbations of the EM optimum do not improve the ZIP likelihood
    rng = np.random.default_rng(8)
    y = np.where(rng.random(500) < 0.3, 0, rng.poisson(rng.gamma(1.5, 2.0, 500)))
    z = fit_zip(y)

    def ll(pi, a, b):
        nb = stats.nbinom.pmf(y, a, b / (1 + b))
        return np.sum(np.log(np.where(y == 0, pi + (1 - pi) * nb, (1 - pi) * nb)))

    best = ll(z.pi, z.gamma.shape, z.gamma.rate)
    for d in ([0.01, 0, 0], [-0.01, 0, 0], [0, 1.02, 1], [0, 0.98, 1], [0, 1, 1.02], [0, 1, 0.98]):
        pi = z.pi + d[0]
        assert best >= ll(pi, z.gamma.shape * (d[1] or 1), z.gamma.rate * (d[2] or 1)) - 1e-9


# ---------------------------------------------------------------------------
# horseshoe


def test_horseshoe_is_gh_with_unit_gamma():
    rng = np.random.default_rng(12)
    y = rng.poisson(np.where(rng.random(200) < 0.1, 6.0, 0.0))
    hs = horseshoe(y)
    ref = shrink(y, fit(y, FitConfig(gamma_range=(1.0, 1.0))).params)
    assert hs.params.gamma == 1.0
    assert np.array_equal(hs.theta_mean, ref.theta_mean)


def test_horseshoe_matches_gh_formula_and_hierarchy():
    y = np.array([0, 0, 0, 12])
    hs = horseshoe(y)
    gh = shrinkage(y, GHParams(0.5, 1.0, hs.params.tau))
    assert hs.theta_mean[3] == pytest.approx(gh.theta_mean[3], rel=0.05)
    tau = 0.3
    got = shrinkage([2], GHParams(0.5, 1.0, tau)).theta_mean[0]
    assert got == pytest.approx(oracles.horseshoe_theta_mean(2, tau), rel=1e-6)


# ---------------------------------------------------------------------------
# two groups


def test_two_groups_degenerate_cases():
    tg = TwoGroupsParams(omega_prior=0.3, alpha0=1.0, beta0=0.1, delta=0.0)
    assert np.allclose(two_groups_weight(np.arange(20), tg), 0.1 / 1.1, rtol=1e-14)
    tg = TwoGroupsParams(omega_prior=1e-300, alpha0=1.0, beta0=0.1, delta=10.0)
    assert two_groups_weight(3, tg) == pytest.approx(0.1 / 1.1, rel=1e-12)
    with pytest.raises(ValueError):
        TwoGroupsParams(omega_prior=1.0)
    with pytest.raises(ValueError):
        TwoGroupsParams(beta0=0.0)


def mixture_posterior_mean(y, tg):
    """E(theta | y) by quadrature over the gamma mixture prior."""
    def prior(t):
        return (1 - tg.omega_prior) * stats.gamma.pdf(t, tg.alpha0, scale=tg.beta0) + tg.omega_prior * stats.gamma.pdf(
            t, tg.alpha0, scale=tg.beta0 + tg.delta
        )

    def f(t, k):
        return t**k * stats.poisson.pmf(y, t) * prior(t)

    opts = dict(epsabs=0, epsrel=1e-12, limit=400, points=[tg.beta0, y, y + 10])
    hi = 20 * (y + tg.alpha0) * (1 + tg.beta0 + tg.delta)
    num, _ = integrate.quad(f, 0, hi, args=(1,), **opts)
    den, _ = integrate.quad(f, 0, hi, args=(0,), **opts)
    return num / den


@pytest.mark.parametrize("y", [0, 1, 6, 15])
def test_two_groups_weight_against_quadrature(y):
    tg = TwoGroupsParams(omega_prior=0.1, alpha0=1.0, beta0=0.1, delta=10.0)
    w = two_groups_weight(y, tg)
    assert 0 < w < 1
    assert w * (y + tg.alpha0) == pytest.approx(mixture_posterior_mean(y, tg), rel=1e-9)


def test_two_groups_inclusion_increasing():
    tg = TwoGroupsParams()
    inc = two_groups_inclusion(np.arange(30), tg)
    # saturates at 1.0 in double precision for large counts
    assert np.all(np.diff(inc) >= 0) and np.all(np.diff(inc[:8]) > 0)
    assert np.all((inc > 0) & (inc <= 1))


# ---------------------------------------------------------------------------
# shared output contract


@pytest.mark.parametrize("seed", range(4))
def test_all_estimators_nonnegative_finite(seed):
    rng = np.random.default_rng(seed)
    y = rng.poisson(np.where(rng.random(150) < 0.15, np.abs(rng.standard_t(3, 150)) * 3, 0.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryWarning)
        outs = [robbins(y), global_gamma(y), zip_bayes(y), horseshoe(y).theta_mean]
    sol = kw_npmle(y)
    outs += [kw_posterior_mean(sol, y), kw_weight(sol, y)]
    for o in outs:
        assert o.shape == y.shape and np.all(np.isfinite(o)) and np.all(o >= 0)
