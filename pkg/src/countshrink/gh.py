"""Gauss-Hypergeometric (GH) prior and posterior for Poisson rates.

Model::

    y | theta      ~ Poisson(theta)
    theta | kappa  ~ Gamma(alpha, scale=(1 - kappa) / kappa)
    kappa          ~ GH(1/2, 1/2, z = tau^2 - 1, gamma)

so ``y | kappa`` is negative binomial with size ``alpha`` and the posterior
of ``kappa`` is again GH with ``a = alpha + 1/2`` and ``b = y + 1/2``.
Every normalizer is an Euler integral evaluated by
:func:`countshrink.specfun.log_euler_integral`, and all ratios of
normalizers are formed in log space.

``z`` is carried together with ``1 + z = tau**2`` because for small tau
the difference ``1 - (1 - tau**2)`` has lost most of its digits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .specfun import (
    DEFAULT_CONTROL,
    DomainError,
    EvalControl,
    digamma,
    log_euler_integral,
    upper_inc_gamma_scaled,
)

TAU_MIN = 1e-6
DEFAULT_ALPHA = 0.5


@dataclass(frozen=True)
class GHParams:
    """Hyperparameters (alpha, gamma, tau) of the GH shrinkage prior."""

    alpha: float = DEFAULT_ALPHA
    gamma: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise DomainError(f"alpha must be positive, got {self.alpha}")
        if not self.gamma >= 0:
            raise DomainError(f"gamma must be nonnegative, got {self.gamma}")
        if not TAU_MIN <= self.tau <= 1:
            raise DomainError(f"tau must lie in [{TAU_MIN}, 1], got {self.tau}")

    @property
    def tau2(self) -> float:
        return self.tau * self.tau

    @property
    def z(self) -> float:
        return self.tau2 - 1.0


@dataclass(frozen=True)
class GHDistribution:
    """GH(a, b, z, gamma) density on (0, 1), with its log normalizer."""

    a: float
    b: float
    z: float
    gamma: float
    log_norm: float
    one_plus_z: float

    @property
    def mean(self) -> float:
        return gh_moment(self, 1)


@dataclass(frozen=True)
class ShrinkageResult:
    """Per-observation posterior summaries.

    ``theta_mean == inclusion * (y + alpha)`` holds exactly, because the
    posterior mean of theta is formed from the stored inclusion values.
    """

    y: np.ndarray
    kappa_mean: np.ndarray
    theta_mean: np.ndarray
    inclusion: np.ndarray
    params: GHParams | None = None

    def __len__(self):
        return len(self.y)


def gh_distribution(a, b, z, gamma, *, one_plus_z=None, ctl: EvalControl = DEFAULT_CONTROL):
    if one_plus_z is None:
        one_plus_z = 1.0 + z
    if not (0 < one_plus_z <= 1):
        raise DomainError(f"z must lie in (-1, 0], got {z}")
    log_norm = log_euler_integral(a, b, gamma, one_plus_z, ctl)
    return GHDistribution(float(a), float(b), float(z), float(gamma), float(log_norm), float(one_plus_z))


def gh_log_density(kappa, dist: GHDistribution):
    kappa = np.asarray(kappa, dtype=float)
    if np.any((kappa <= 0) | (kappa >= 1)):
        raise DomainError("GH density is defined for 0 < kappa < 1")
    # 1 + z kappa = (1 - kappa) + (1 + z) kappa, exact for tiny 1 + z
    out = (
        (dist.a - 1) * np.log(kappa)
        + (dist.b - 1) * np.log1p(-kappa)
        - dist.gamma * np.log((1 - kappa) + dist.one_plus_z * kappa)
        - dist.log_norm
    )
    return float(out) if out.ndim == 0 else out


def gh_moment(dist: GHDistribution, k: int, ctl: EvalControl = DEFAULT_CONTROL) -> float:
    if k == 0:
        return 1.0
    num = log_euler_integral(dist.a + k, dist.b, dist.gamma, dist.one_plus_z, ctl)
    return math.exp(num - dist.log_norm)


def prior_kappa_dist(p: GHParams) -> GHDistribution:
    return gh_distribution(0.5, 0.5, p.z, p.gamma, one_plus_z=p.tau2)


def posterior_kappa_dist(y: int, p: GHParams, ctl: EvalControl = DEFAULT_CONTROL) -> GHDistribution:
    """Conjugate update: kappa | y ~ GH(alpha + 1/2, y + 1/2, tau^2 - 1, gamma)."""
    if y < 0:
        raise DomainError(f"counts must be nonnegative, got {y}")
    return gh_distribution(p.alpha + 0.5, y + 0.5, p.z, p.gamma, one_plus_z=p.tau2, ctl=ctl)


def _check_counts(y):
    y = np.asarray(y, dtype=float)
    if np.any(~(y >= 0)):
        raise DomainError("counts must be nonnegative")
    return y


def posterior_kappa_moment(k: int, y, p: GHParams, ctl: EvalControl = DEFAULT_CONTROL):
    """E(kappa^k | y, tau, gamma) as a ratio of Euler integrals.  Vectorized in y."""
    if k < 0:
        raise DomainError(f"moment order must be nonnegative, got {k}")
    y = _check_counts(y)
    if k == 0:
        out = np.ones_like(y)
    else:
        a = p.alpha + 0.5
        num = log_euler_integral(a + k, y + 0.5, p.gamma, p.tau2, ctl)
        den = log_euler_integral(a, y + 0.5, p.gamma, p.tau2, ctl)
        out = np.exp(num - den)
    return float(out) if np.ndim(out) == 0 else out


def posterior_theta_mean(y, p: GHParams, ctl: EvalControl = DEFAULT_CONTROL):
    y = _check_counts(y)
    out = (1.0 - np.asarray(posterior_kappa_moment(1, y, p, ctl))) * (y + p.alpha)
    return float(out) if np.ndim(out) == 0 else out


def shrinkage(y, p: GHParams, ctl: EvalControl = DEFAULT_CONTROL) -> ShrinkageResult:
    """Posterior shrinkage summaries, evaluated once per distinct count."""
    y = np.asarray(y)
    values, inverse = np.unique(y, return_inverse=True)
    kappa_u = np.atleast_1d(posterior_kappa_moment(1, values, p, ctl))
    kappa = kappa_u[inverse]
    inclusion = 1.0 - kappa
    theta = inclusion * (y + p.alpha)
    return ShrinkageResult(y=y, kappa_mean=kappa, theta_mean=theta, inclusion=inclusion, params=p)


def marginal_log_pmf(y, p: GHParams, ctl: EvalControl = DEFAULT_CONTROL):
    """log m(y), the GH-mixed negative binomial pmf.

    Factorials are written as gamma functions, so real ``y >= 0`` gives the
    analytic continuation used by the Tweedie formula.
    """
    y = _check_counts(y)
    a = p.alpha
    out = (
        special.gammaln(y + a)
        - special.gammaln(a)
        - special.gammaln(y + 1)
        + log_euler_integral(a + 0.5, y + 0.5, p.gamma, p.tau2, ctl)
        - log_euler_integral(0.5, 0.5, p.gamma, p.tau2, ctl)
    )
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# marginal prior of theta at tau = 1


def prior_theta_density(theta: float, alpha: float = DEFAULT_ALPHA) -> float:
    """Marginal prior density of theta when tau = 1 (half-Cauchy lambda).

    Equals exp(theta) theta^(alpha-1) Gamma(1/2 - alpha, theta) / (sqrt(pi) B(1/2, alpha));
    has a pole at theta = 0 for alpha <= 1/2 and a polynomial tail.
    """
    if not theta > 0:
        raise DomainError(f"theta must be positive, got {theta}")
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    log_c = -0.5 * math.log(math.pi) - special.betaln(0.5, alpha)
    return math.exp(log_c + (alpha - 1) * math.log(theta)) * upper_inc_gamma_scaled(0.5 - alpha, theta)


def prior_theta_bounds(theta: float, alpha: float) -> tuple[float, float]:
    """Closed-form lower and upper bounds on :func:`prior_theta_density`.

    Available for alpha = 1/2 (from the E1 sandwich) and alpha = 1 (from the
    Mills-ratio inequality for erfc).
    """
    if not theta > 0:
        raise DomainError(f"theta must be positive, got {theta}")
    rt = math.sqrt(theta)
    if alpha == 0.5:
        c = math.pi**-1.5 / rt
        return 0.5 * c * math.log1p(2.0 / theta), c * math.log1p(1.0 / theta)
    if alpha == 1.0:
        # 1/sqrt(t) - 2/(sqrt(t) + sqrt(t + c)) = c / (sqrt(t) (sqrt(t) + sqrt(t + c))^2)
        def gap(c):
            return c / (rt * (rt + math.sqrt(theta + c)) ** 2)

        k = 1.0 / math.sqrt(math.pi)
        return k * gap(4.0 / math.pi), k * gap(2.0)
    raise DomainError(f"bounds are only available for alpha in {{0.5, 1}}, got {alpha}")


# ---------------------------------------------------------------------------
# concentration and testing bounds


def tail_bound_upper(eta: float, y: float, p: GHParams) -> float:
    """Upper bound on pr(kappa > eta | y) for counts above gamma + 1/2.

    The constant ``(1 - eta^1.5) / eta^1.5`` comes from integrating a
    ``kappa^(1/2)`` kernel; it dominates the alpha = 1/2 constant, so the
    bound holds for ``alpha <= 1``.
    """
    if not 0 < eta < 1:
        raise DomainError(f"eta must lie in (0, 1), got {eta}")
    if p.tau >= 1:
        raise DomainError("the large-count bound needs tau < 1")
    m = y - 0.5 - p.gamma
    if not m > 0:
        raise DomainError(f"need y > gamma + 1/2, got y={y}, gamma={p.gamma}")
    c_eta = (1.0 - eta**1.5) / eta**1.5
    tau2 = p.tau2
    return c_eta / (1.0 - tau2) * math.exp(-m * math.log1p(tau2 * eta / (1.0 - eta)))


def concentration_bound_lower(eta: float, y: float, p: GHParams) -> float:
    """Claimed bound (tau^2 / (1 - eta))^d on pr(kappa < eta | y), d = gamma - 1/2 - y.

    Verified to dominate the exact tail for y = 0 only.  For y >= 1 the exact
    tail behaves like tau^(2d) / (d B(y + 1/2, d)) as tau -> 0 and can exceed
    this value; see the test suite.
    """
    if not 0 < eta < 1:
        raise DomainError(f"eta must lie in (0, 1), got {eta}")
    d = p.gamma - 0.5 - y
    if not d > 0:
        raise DomainError(f"need y < gamma - 1/2, got y={y}, gamma={p.gamma}")
    return (p.tau2 / (1.0 - eta)) ** d


def type1_bound(gamma: float, alpha: float, beta: float) -> float:
    """Bound on the null rejection probability of the thresholded GH rule.

    Null rates are Gamma(alpha, scale=beta).
    """
    if gamma < 0 or not alpha > 0 or not beta > 0:
        raise DomainError("type1_bound needs gamma >= 0, alpha > 0, beta > 0")
    g = gamma + 0.5
    log_val = (
        g * (math.log(beta) - math.log1p(beta))
        - (alpha - 1) * math.log1p(beta)
        - math.log(g)
        - special.betaln(g, alpha)
    )
    return math.exp(log_val)


# ---------------------------------------------------------------------------
# Tweedie


def tweedie_log_theta_mean(y: float, p: GHParams, ctl: EvalControl = DEFAULT_CONTROL) -> float:
    """E(log theta | y) = psi(y + 1) + d/dy log m(y), central differences."""
    if not y >= 1:
        raise DomainError(f"Tweedie evaluation needs y >= 1, got {y}")
    h = 1e-5 * max(1.0, y)
    up, down = marginal_log_pmf(np.array([y + h, y - h]), p, ctl)
    return digamma(y + 1.0) + (up - down) / (2.0 * h)
