"""Comparator estimators for sparse Poisson means.

Robbins' frequency ratio, the Kiefer-Wolfowitz NPMLE (EM on a fixed grid),
a global conjugate gamma prior fitted by negative-binomial marginal
likelihood, a zero-inflated gamma-Poisson fitted by EM, the horseshoe
(GH with gamma = 1) and the two-groups gamma-mixture oracle weight.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import optimize, special

from .data import as_dataset
from .ebfit import FitConfig, fit, shrink
from .gh import ShrinkageResult

# ---------------------------------------------------------------------------
# Robbins


def robbins(counts) -> np.ndarray:
    """delta(y) = (y + 1) #{y_j = y + 1} / #{y_j = y}, zero when no y + 1 occurs."""
    y = as_dataset(counts).y
    freq = np.bincount(y, minlength=int(y.max()) + 2).astype(float)
    return (y + 1) * freq[y + 1] / freq[y]


# ---------------------------------------------------------------------------
# Kiefer-Wolfowitz NPMLE


@dataclass(frozen=True)
class NPMLESolution:
    """Discrete mixing distribution on a fixed grid of Poisson means."""

    support: np.ndarray
    mass: np.ndarray
    loglik: float
    iters: int
    loglik_trace: np.ndarray = field(repr=False)
    converged: bool = True

    def log_marginal(self, y):
        """log P_G(y) for integer y >= 0, vectorized."""
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            lp = _pois_logpmf(y.reshape(-1), self.support) + np.log(self.mass)[None, :]
        return special.logsumexp(lp, axis=1).reshape(y.shape)


def _pois_logpmf(y, theta):
    """Matrix of log Poi(y_j | theta_g)."""
    y = np.asarray(y, dtype=float)[:, None]
    return special.xlogy(y, theta[None, :]) - theta[None, :] - special.gammaln(y + 1)


def npmle_grid(ymax: int, grid_size: int = 400, lo: float = 1e-3) -> np.ndarray:
    """Half geometric, half linear atoms on [lo, ymax + 3 sqrt(ymax)]."""
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    hi = max(ymax + 3.0 * math.sqrt(ymax), 1.0)
    n_geo = grid_size // 2
    geo = np.geomspace(lo, hi, n_geo)
    lin = np.linspace(lo, hi, grid_size - n_geo + 2)[1:-1]
    grid = np.unique(np.concatenate([geo, lin]))
    # unique() can drop coincident atoms; top up with linear midpoints
    while grid.size < grid_size:
        gaps = np.argsort(np.diff(grid))[::-1][: grid_size - grid.size]
        grid = np.unique(np.concatenate([grid, 0.5 * (grid[gaps] + grid[gaps + 1])]))
    return grid


def kw_npmle(counts, grid_size: int = 400, tol: float = 1e-9, max_iters: int = 5000, grid=None) -> NPMLESolution:
    """EM for the nonparametric MLE of the mixing distribution on a fixed grid.

    The EM map is accelerated by SQUAREM; an iteration is one accelerated
    cycle and never lowers the likelihood.  Stops when the relative log-likelihood change drops below ``tol`` or after
    ``max_iters`` iterations.  Every step is checked for ascent.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    ds = as_dataset(counts)
    values, w = ds.histogram()
    w = w.astype(float)
    n = w.sum()
    theta = npmle_grid(int(values.max()), grid_size) if grid is None else np.asarray(grid, dtype=float)
    if theta.size < 2 or np.any(theta < 0) or np.any(np.diff(theta) <= 0):
        raise ValueError("grid must be increasing, nonnegative, with at least 2 atoms")

    logL = _pois_logpmf(values, theta)
    shift = logL.max(axis=1)
    L = np.exp(logL - shift[:, None])
    const = float(np.dot(w, shift))

    mass0 = np.full(theta.size, 1.0 / theta.size)
    mass, trace, it, done, bad = _squarem_em(L, w, mass0, float(tol), int(max_iters))
    trace = trace[: it + 1] + const
    if bad:
        raise AssertionError(f"EM log-likelihood decreased at iteration {bad}")
    ll = float(trace[-1])
    return NPMLESolution(support=theta, mass=mass, loglik=ll, iters=it, loglik_trace=trace, converged=bool(done))


# reassociation lets the reductions vectorize; NaN/inf semantics are kept
_FAST = {"reassoc", "contract", "arcp"}


@njit(cache=True, fastmath=_FAST)
def _em_step(L, w, n, m, f, out_m, out_f):
    k, G = L.shape
    for g in range(G):
        out_m[g] = 0.0
    for i in range(k):
        c = w[i] / f[i]
        for g in range(G):
            out_m[g] += L[i, g] * c
    s = 0.0
    for g in range(G):
        out_m[g] *= m[g] / n
        s += out_m[g]
    for g in range(G):
        out_m[g] /= s
    for i in range(k):
        acc = 0.0
        for g in range(G):
            acc += L[i, g] * out_m[g]
        out_f[i] = acc


@njit(cache=True, fastmath=_FAST)
def _loglik(w, f):
    s = 0.0
    for i in range(w.size):
        s += w[i] * np.log(f[i])
    return s


@njit(cache=True, fastmath=_FAST)
def _squarem_em(L, w, mass, tol, max_iters):
    """SQUAREM-accelerated EM cycles; returns (mass, trace, iters, done, bad).

    ``bad`` is the first iteration whose likelihood fell, or 0.
    """
    k, G = L.shape
    n = w.sum()
    f = L @ mass
    m1 = np.empty(G)
    m2 = np.empty(G)
    m3 = np.empty(G)
    m4 = np.empty(G)
    f1 = np.empty(k)
    f2 = np.empty(k)
    f3 = np.empty(k)
    f4 = np.empty(k)
    trace = np.empty(max_iters + 1)
    ll = _loglik(w, f)
    trace[0] = ll
    it = 0
    done = False
    bad = 0
    while it < max_iters:
        # two EM steps, squared extrapolation, one stabilizing EM step; the
        # plain EM point is kept if the extrapolated one is not better
        _em_step(L, w, n, mass, f, m1, f1)
        _em_step(L, w, n, m1, f1, m2, f2)
        new = _loglik(w, f2)
        rr = 0.0
        vv = 0.0
        for g in range(G):
            r = m1[g] - mass[g]
            v = m2[g] - 2.0 * m1[g] + mass[g]
            rr += r * r
            vv += v * v
        use3 = False
        if vv > 0.0:
            step = min(-np.sqrt(rr) / np.sqrt(vv), -1.0)
            s = 0.0
            for g in range(G):
                r = m1[g] - mass[g]
                v = m2[g] - 2.0 * m1[g] + mass[g]
                m3[g] = max(mass[g] - 2.0 * step * r + step * step * v, 0.0)
                s += m3[g]
            if s > 0.0:
                for g in range(G):
                    m3[g] /= s
                for i in range(k):
                    acc = 0.0
                    for g in range(G):
                        acc += L[i, g] * m3[g]
                    f3[i] = acc
                if np.all(f3 > 0.0):
                    _em_step(L, w, n, m3, f3, m4, f4)
                    ll4 = _loglik(w, f4)
                    if ll4 > new:
                        new = ll4
                        use3 = True
        if use3:
            mass[:] = m4
            f[:] = f4
        else:
            mass[:] = m2
            f[:] = f2
        it += 1
        trace[it] = new
        # EM never decreases the likelihood; allow rounding noise only
        if new < ll - 1e-12 * max(1.0, abs(ll)) and bad == 0:
            bad = it
        done = abs(new - ll) <= tol * abs(ll)
        ll = new
        if done:
            break
    return mass, trace, it, done, bad


_LOG_TINY = math.log(np.finfo(float).tiny)


def kw_posterior_mean(sol: NPMLESolution, y, return_flag: bool = False):
    """sum_g theta_g Poi(y | theta_g) m_g / sum_g Poi(y | theta_g) m_g.

    Returns 0 (and sets the flag) where P_G(y) underflows.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    with np.errstate(divide="ignore"):
        lp = _pois_logpmf(y, sol.support) + np.log(sol.mass)[None, :]
    den = special.logsumexp(lp, axis=1)
    num = special.logsumexp(lp, b=sol.support[None, :], axis=1)
    flag = den < _LOG_TINY
    out = np.where(flag, 0.0, np.exp(num - np.where(flag, 0.0, den)))
    return (out, flag) if return_flag else out


def kw_weight(sol: NPMLESolution, y, return_flag: bool = False):
    """P_G(y + 1) / P_G(y), the ratio thresholded by the KW testing rule.

    This omits the (y + 1) factor of the Bayes-mean ratio on purpose.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    lo = sol.log_marginal(y)
    hi = sol.log_marginal(y + 1)
    flag = lo < _LOG_TINY
    out = np.where(flag, 0.0, np.exp(hi - np.where(flag, 0.0, lo)))
    return (out, flag) if return_flag else out


# ---------------------------------------------------------------------------
# gamma-Poisson (negative binomial) fits

SHAPE_RANGE = (1e-3, 1e4)
DISPERSION_FLOOR = 0.01


@dataclass(frozen=True)
class GammaFit:
    """theta ~ Gamma(shape, rate); ``fallback`` marks the moment fallback."""

    shape: float
    rate: float
    fallback: bool = False

    def posterior_mean(self, y):
        return (np.asarray(y, dtype=float) + self.shape) / (1.0 + self.rate)


def _nb_profile(log_a, values, w, mean):
    # the NB likelihood is maximized over the mean by the (weighted) sample
    # mean, leaving a 1-d problem in the shape
    a = math.exp(log_a)
    b = a / mean
    return -float(
        np.dot(w, special.gammaln(values + a) - special.gammaln(a) + a * math.log(b / (1 + b)) - values * math.log1p(b))
    )


def fit_gamma_poisson(values, weights=None) -> GammaFit:
    """ML fit of a Gamma(shape, rate) mixing prior from (weighted) counts.

    Grid search on log shape followed by bounded Brent refinement.  Counts
    without overdispersion have no finite ML shape; they fall back to moments
    with the excess variance floored at ``DISPERSION_FLOOR * mean``.
    """
    values = np.asarray(values, dtype=float)
    w = np.ones_like(values) if weights is None else np.asarray(weights, dtype=float)
    tot = w.sum()
    mean = float(np.dot(w, values) / tot)
    if mean <= 0:
        return GammaFit(shape=SHAPE_RANGE[0], rate=math.inf, fallback=True)
    var = float(np.dot(w, (values - mean) ** 2) / tot)
    if var <= mean * (1 + DISPERSION_FLOOR):
        excess = DISPERSION_FLOOR * mean
        return GammaFit(shape=mean * mean / excess, rate=mean / excess, fallback=True)
    lo, hi = map(math.log, SHAPE_RANGE)
    grid = np.linspace(lo, hi, 41)
    obj = [_nb_profile(g, values, w, mean) for g in grid]
    k = int(np.argmin(obj))
    bracket = (grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)])
    res = optimize.minimize_scalar(
        _nb_profile, bounds=bracket, method="bounded", args=(values, w, mean), options=dict(xatol=1e-10)
    )
    la = res.x if res.fun <= obj[k] else grid[k]
    a = math.exp(la)
    return GammaFit(shape=a, rate=a / mean, fallback=False)


def global_gamma(counts, return_fit: bool = False):
    """Posterior means (y + a0) / (1 + b0) under one fitted Gamma(a0, b0) prior."""
    ds = as_dataset(counts)
    values, mult = ds.histogram()
    g = fit_gamma_poisson(values, mult)
    est = np.zeros(len(ds)) if math.isinf(g.rate) else g.posterior_mean(ds.y)
    return (est, g) if return_fit else est


# ---------------------------------------------------------------------------
# zero-inflated gamma-Poisson

PI_BOUNDS = (1e-6, 1 - 1e-6)


@dataclass(frozen=True)
class ZIPFit:
    """Structural-zero probability ``pi`` and the gamma prior of the rest."""

    pi: float
    gamma: GammaFit
    iters: int
    flagged: bool = False

    def estimates(self, y):
        y = np.asarray(y, dtype=float)
        g = self.gamma
        if math.isinf(g.rate):
            return np.zeros_like(y)
        p0 = (g.rate / (1.0 + g.rate)) ** g.shape  # NB mass at zero
        keep = (1 - self.pi) * p0 / (self.pi + (1 - self.pi) * p0)
        return np.where(y > 0, g.posterior_mean(y), keep * g.shape / (1 + g.rate))


def _zip_loglik(values, mult, pi, g: GammaFit) -> float:
    a, b = g.shape, g.rate
    lp = special.gammaln(values + a) - special.gammaln(a) - special.gammaln(values + 1.0)
    lp += a * math.log(b / (1.0 + b)) - values * math.log1p(b)
    lp[values > 0] += math.log1p(-pi)
    zero = values == 0
    lp[zero] = np.log(pi + (1 - pi) * np.exp(lp[zero]))
    return float(np.dot(mult, lp))


def _zip_em_map(values, mult, pi, g: GammaFit):
    n0, n = mult[0], mult.sum()
    p0 = (g.rate / (1.0 + g.rate)) ** g.shape
    z = pi / (pi + (1 - pi) * p0)  # P(structural | y = 0)
    w = mult.copy()
    w[0] *= 1 - z
    return min(max(z * n0 / n, PI_BOUNDS[0]), PI_BOUNDS[1]), fit_gamma_poisson(values, w)


def _pack(pi, g):
    return np.array([math.log(pi / (1 - pi)), math.log(g.shape), math.log(g.rate)])


def _unpack(x):
    pi = 1.0 / (1.0 + math.exp(-min(max(x[0], -700.0), 700.0)))
    pi = min(max(pi, PI_BOUNDS[0]), PI_BOUNDS[1])
    a = math.exp(min(max(x[1], math.log(SHAPE_RANGE[0])), math.log(SHAPE_RANGE[1]) + 20))
    return pi, GammaFit(shape=a, rate=math.exp(min(max(x[2], -700.0), 700.0)))


def fit_zip(counts, tol: float = 1e-10, max_iters: int = 2000) -> ZIPFit:
    """EM for y ~ pi delta_0 + (1 - pi) NB(shape, rate).

    The EM map is accelerated by SQUAREM in (logit pi, log shape, log rate)
    with a safeguard that falls back to the plain EM point whenever the
    extrapolated point lowers the likelihood, so the likelihood never
    decreases.  Stops when a cycle moves pi by at most ``tol`` or raises the
    log-likelihood by at most 1e-13 relative.  ``iters`` counts EM map
    evaluations.
    """
    ds = as_dataset(counts)
    values, mult = ds.histogram()
    values = values.astype(float)
    mult = mult.astype(float)
    if values[0] != 0:
        return ZIPFit(pi=PI_BOUNDS[0], gamma=fit_gamma_poisson(values, mult), iters=0, flagged=True)
    if values.size == 1:
        return ZIPFit(pi=PI_BOUNDS[1], gamma=GammaFit(SHAPE_RANGE[0], math.inf, True), iters=0, flagged=True)
    pi = min(max(0.5 * mult[0] / mult.sum(), PI_BOUNDS[0]), PI_BOUNDS[1])
    g = fit_gamma_poisson(values, mult)
    ll = _zip_loglik(values, mult, pi, g)
    it = 0
    while it < max_iters:
        pi1, g1 = _zip_em_map(values, mult, pi, g)
        pi2, g2 = _zip_em_map(values, mult, pi1, g1)
        it += 2
        x0, x1, x2 = _pack(pi, g), _pack(pi1, g1), _pack(pi2, g2)
        r, v = x1 - x0, x2 - 2 * x1 + x0
        nv = float(np.linalg.norm(v))
        cand = (pi2, g2)
        if nv > 0:
            step = min(-float(np.linalg.norm(r)) / nv, -1.0)
            if step < -1.0:
                pe, ge = _unpack(x0 - 2 * step * r + step * step * v)
                cand = _zip_em_map(values, mult, pe, ge)  # stabilizing EM step
                it += 1
                if not _zip_loglik(values, mult, *cand) >= _zip_loglik(values, mult, pi2, g2):
                    cand = (pi2, g2)
        new_ll = _zip_loglik(values, mult, *cand)
        dpi = abs(cand[0] - pi)
        pi, g = cand
        # the likelihood can be nearly flat along a ridge trading pi against
        # a small shape, so a negligible gain also counts as convergence
        if dpi <= tol or new_ll - ll <= 1e-13 * abs(ll):
            ll = new_ll
            break
        ll = new_ll
    return ZIPFit(pi=pi, gamma=g, iters=it, flagged=pi in PI_BOUNDS)


def zip_bayes(counts, return_fit: bool = False):
    """Posterior means under the fitted zero-inflated gamma-Poisson model."""
    ds = as_dataset(counts)
    z = fit_zip(ds)
    est = z.estimates(ds.y)
    return (est, z) if return_fit else est


# ---------------------------------------------------------------------------
# horseshoe


def horseshoe(counts, cfg: FitConfig | None = None) -> ShrinkageResult:
    """GH shrinkage with gamma pinned at 1 and tau fitted by marginal likelihood."""
    base = cfg or FitConfig()
    cfg = FitConfig(
        tau_range=base.tau_range,
        gamma_range=(1.0, 1.0),
        grid_points=base.grid_points,
        refine_iters=base.refine_iters,
        alpha=base.alpha,
    )
    ds = as_dataset(counts)
    return shrink(ds, fit(ds, cfg).params)


# ---------------------------------------------------------------------------
# two-groups gamma mixture


@dataclass(frozen=True)
class TwoGroupsParams:
    """theta ~ (1 - p) Ga(alpha0, scale beta0) + p Ga(alpha0, scale beta0 + delta)."""

    omega_prior: float = 0.1
    alpha0: float = 0.5
    beta0: float = 0.1
    delta: float = 10.0

    def __post_init__(self):
        if not 0 < self.omega_prior < 1:
            raise ValueError(f"omega_prior must lie in (0, 1), got {self.omega_prior}")
        if not (self.alpha0 > 0 and self.beta0 > 0 and self.delta >= 0):
            raise ValueError("alpha0 and beta0 must be positive and delta nonnegative")


def _nb_scale_logpmf(y, alpha, beta):
    return (
        special.gammaln(y + alpha)
        - special.gammaln(alpha)
        - special.gammaln(y + 1)
        - alpha * math.log1p(beta)
        + y * (math.log(beta) - math.log1p(beta))
    )


def two_groups_inclusion(y, tg: TwoGroupsParams):
    """Posterior probability that y came from the alternative component."""
    y = np.asarray(y, dtype=float)
    l1 = math.log(tg.omega_prior) + _nb_scale_logpmf(y, tg.alpha0, tg.beta0 + tg.delta)
    l0 = math.log1p(-tg.omega_prior) + _nb_scale_logpmf(y, tg.alpha0, tg.beta0)
    return special.expit(l1 - l0)


def two_groups_weight(y, tg: TwoGroupsParams):
    """Shrinkage weight w* with E(theta | y) = w* (y + alpha0)."""
    om = two_groups_inclusion(y, tg)
    b0, b1 = tg.beta0, tg.beta0 + tg.delta
    return (1 - om) * b0 / (1 + b0) + om * b1 / (1 + b1)
