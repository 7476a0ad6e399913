"""Special functions for the GH shrinkage model.

Everything the posterior formulas need lives here: log-beta, the Gauss
hypergeometric function on ``[0, 1)``, the Euler-type integral that
normalizes GH densities, the upper incomplete gamma function for
nonpositive shapes, E1 and digamma.

The hypergeometric function is evaluated two ways.  For ``w <= 0.5`` the
Pochhammer series converges geometrically and is summed directly.  Closer
to ``w = 1`` the series is hopeless (``w = 1 - tau**2`` with tau down to
1e-6), so the Euler integral is computed instead, in log space, after the
substitution ``kappa = 1 / (1 + exp(s))``.  In the ``s`` variable the
integrand is entire in the strip ``|Im s| < pi`` and decays exponentially
in both directions, so the trapezoid rule converges geometrically in the
step size.  Steps are halved per row until the half-step estimate
settles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "ConvergenceError",
    "DomainError",
    "EvalControl",
    "digamma",
    "exp_e1",
    "gauss_2f1",
    "log_beta",
    "log_euler_integral",
    "log_gauss_2f1",
    "upper_inc_gamma",
    "upper_inc_gamma_scaled",
]

EULER_GAMMA = 0.57721566490153286061


class DomainError(ValueError):
    """An argument lies outside the domain of a special function."""


class ConvergenceError(ArithmeticError):
    """A series or quadrature did not reach the requested tolerance."""


@dataclass(frozen=True)
class EvalControl:
    rel_tol: float = 1e-12
    max_terms: int = 10_000

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise DomainError(f"rel_tol must be positive, got {self.rel_tol}")
        if self.max_terms < 1:
            raise DomainError(f"max_terms must be >= 1, got {self.max_terms}")


DEFAULT_CONTROL = EvalControl()

# Initial trapezoid step in the logit variable.  With the strip half-width
# pi the discretization error is about exp(-2 pi^2 / h), i.e. ~1e-17 here
# for moderate parameters; larger parameters sharpen the peak and trigger
# refinement.
_H0 = 0.5
# Tail cut: the integrand is dropped once it is exp(-_TAIL) below its peak.
_TAIL = 42.0
_ROWS = 2048


def log_beta(a, b):
    """log B(a, b), finite for large arguments."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(~(a > 0)) or np.any(~(b > 0)):
        raise DomainError("log_beta requires a > 0 and b > 0")
    out = special.betaln(a, b)
    return float(out) if out.ndim == 0 else out


def digamma(x):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError("digamma is only provided for x > 0")
    out = special.psi(x)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Gauss hypergeometric function and the Euler integral


def _series_block(a, b, c, w, ctl):
    out = np.zeros(a.size)
    todo = np.flatnonzero((w > 0) & (a != 0))
    k_max = 64
    while todo.size:
        if k_max > 2 * ctl.max_terms:
            raise ConvergenceError(
                f"2F1 series did not converge within {ctl.max_terms} terms"
            )
        k = np.arange(min(k_max, ctl.max_terms), dtype=float)
        aa, bb, cc, ww = (x[todo, None] for x in (a, b, c, w))
        ratio = (aa + k) * (bb + k) / ((cc + k) * (k + 1.0)) * ww
        logt = np.cumsum(np.log(ratio), axis=1)
        peak = np.maximum(logt.max(axis=1), 0.0)
        total = np.exp(-peak) + np.exp(logt - peak[:, None]).sum(axis=1)
        # Terms are positive and the ratio tends to w monotonically, so the
        # tail is bounded by a geometric series with ratio max(ratio, w).
        r = np.maximum(ratio[:, -1], ww[:, 0])
        tail = np.exp(logt[:, -1] - peak) * r / np.maximum(1.0 - r, 1e-300)
        done = (ratio[:, -1] < 1.0) & (tail <= 0.01 * ctl.rel_tol * total)
        out[todo[done]] = peak[done] + np.log(total[done])
        todo = todo[~done]
        k_max *= 2
    return out


def _series_log_2f1(a, b, c, w, ctl):
    """Direct Pochhammer series, all rows at once.  Requires 0 <= w <= 0.5.

    Terms are generated in blocks from a cumulative sum of log ratios; the
    block length doubles for rows whose geometric tail bound has not settled.
    """
    out = np.empty(a.size)
    for i in range(0, a.size, _ROWS):
        sl = slice(i, i + _ROWS)
        out[sl] = _series_block(a[sl], b[sl], c[sl], w[sl], ctl)
    return out


def _logit_integrand(s, a, b, g, log_eps):
    # log of kappa^a (1-kappa)^b (1-(1-eps) kappa)^-g with kappa = 1/(1+e^s);
    # the Jacobian kappa(1-kappa) is already folded in.  Softplus form, so
    # that a huge b does not cancel b*s against b*log(1+e^s).
    sp = np.logaddexp(0.0, s)
    return -b * np.logaddexp(0.0, -s) - a * sp + g * (sp - np.logaddexp(s, log_eps))


def _quad_rows(a, b, g, log_eps, ctl):
    """Trapezoid rule in the logit variable; 1-D parameter arrays."""
    lo = np.minimum(np.minimum(log_eps, 0.0), np.log(b / a)) - _TAIL / b
    hi = np.maximum(np.log(b / a), 0.0) + _TAIL / a
    out = np.empty(a.size)
    todo = np.arange(a.size)
    nodes = int(math.ceil(np.max(hi - lo) / _H0))
    while todo.size:
        if nodes > ctl.max_terms:
            raise ConvergenceError(
                f"Euler-integral quadrature needs more than {ctl.max_terms} nodes"
            )
        # Even node count so that every other node forms the 2h rule.
        nodes += nodes % 2
        t = np.linspace(0.0, 1.0, nodes + 1)
        step = (hi[todo] - lo[todo]) / nodes
        s = lo[todo, None] + (hi[todo] - lo[todo])[:, None] * t[None, :]
        lf = _logit_integrand(
            s, a[todo, None], b[todo, None], g[todo, None], log_eps[todo, None]
        )
        peak = lf.max(axis=1)
        e = np.exp(lf - peak[:, None])
        fine = e.sum(axis=1) - 0.5 * (e[:, 0] + e[:, -1])
        coarse = e[:, ::2].sum(axis=1) - 0.5 * (e[:, 0] + e[:, -1])
        fine_val = fine * step
        coarse_val = coarse * 2.0 * step
        # Exponential convergence: the h-rule error is roughly the square of
        # the 2h-rule error, so a 2h discrepancy of sqrt(tol) certifies tol.
        settled = np.abs(fine_val - coarse_val) <= np.sqrt(ctl.rel_tol) * 1e-1 * fine_val
        # Mass left at either end means the window is too narrow.
        edges_ok = (lf[:, 0] - peak < -_TAIL + 4) & (lf[:, -1] - peak < -_TAIL + 4)
        ok = settled & edges_ok
        out[todo[ok]] = peak[ok] + np.log(fine_val[ok])
        grow = todo[~edges_ok]
        if grow.size:
            width = hi[grow] - lo[grow]
            lo[grow] -= 0.5 * width
            hi[grow] += 0.5 * width
        todo = todo[~ok]
        nodes *= 2
    return out


def _as_rows(*args):
    arrs = np.broadcast_arrays(*[np.asarray(x, dtype=float) for x in args])
    shape = arrs[0].shape
    return shape, [x.ravel() for x in arrs]


def log_euler_integral(a, b, gamma, eps, ctl: EvalControl = DEFAULT_CONTROL):
    """log of the integral of k^(a-1) (1-k)^(b-1) (1 - (1-eps) k)^(-gamma) over (0, 1).

    This is ``log B(a, b) + log 2F1(gamma, a; a+b; 1-eps)``, the GH
    normalizing constant.  ``eps`` is passed instead of ``w = 1 - eps`` so
    that tiny ``eps`` keeps full relative precision.  Broadcasts.
    """
    shape, (a, b, g, eps) = _as_rows(a, b, gamma, eps)
    if np.any(~(a > 0)) or np.any(~(b > 0)):
        raise DomainError("Euler integral requires a > 0 and b > 0")
    if np.any(g < 0):
        raise DomainError("Euler integral requires gamma >= 0")
    if np.any(~(eps > 0)) or np.any(eps > 1):
        raise DomainError("Euler integral requires 0 < eps <= 1")
    out = special.betaln(a, b)
    w = 1.0 - eps
    series = (eps >= 0.5) & (g > 0) & (w > 0)
    if np.any(series):
        out[series] += _series_log_2f1(g[series], a[series], a[series] + b[series], w[series], ctl)
    quad = (eps < 0.5) & (g > 0)
    if np.any(quad):
        out[quad] = _quad_rows(a[quad], b[quad], g[quad], np.log(eps[quad]), ctl)
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


def log_gauss_2f1(a, b, c, w, ctl: EvalControl = DEFAULT_CONTROL, *, one_minus_w=None):
    """log 2F1(a, b; c; w) for a >= 0, c > b > 0 and 0 <= w < 1.

    Pass ``one_minus_w`` when ``w`` is within rounding of 1.
    """
    eps = 1.0 - np.asarray(w, dtype=float) if one_minus_w is None else one_minus_w
    shape, (a, b, c, w, eps) = _as_rows(a, b, c, w, eps)
    if np.any(a < 0) or np.any(~(b > 0)) or np.any(~(c > b)):
        raise DomainError("gauss_2f1 requires a >= 0 and c > b > 0")
    if np.any(w < 0) or np.any(~(w < 1)) or np.any(~(eps > 0)):
        raise DomainError("gauss_2f1 requires 0 <= w < 1")
    out = np.zeros(a.size)
    series = (w <= 0.5) & (w > 0) & (a > 0)
    if np.any(series):
        out[series] = _series_log_2f1(a[series], b[series], c[series], w[series], ctl)
    quad = (w > 0.5) & (a > 0)
    if np.any(quad):
        bb, cb = b[quad], c[quad] - b[quad]
        out[quad] = _quad_rows(bb, cb, a[quad], np.log(eps[quad]), ctl) - special.betaln(bb, cb)
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


def gauss_2f1(a, b, c, w, ctl: EvalControl = DEFAULT_CONTROL, *, one_minus_w=None):
    """Gauss hypergeometric function 2F1(a, b; c; w) on 0 <= w < 1."""
    return np.exp(log_gauss_2f1(a, b, c, w, ctl, one_minus_w=one_minus_w))


# ---------------------------------------------------------------------------
# Incomplete gamma and E1


def _scaled_cf(s, x, ctl):
    """exp(x) x^-s Gamma(s, x) by the Legendre continued fraction (modified Lentz)."""
    tiny = 1e-300
    bcf = x + 1.0 - s
    c = 1.0 / tiny
    d = 1.0 / bcf
    h = d
    for i in range(1, ctl.max_terms + 1):
        an = -i * (i - s)
        bcf += 2.0
        d = an * d + bcf
        if abs(d) < tiny:
            d = tiny
        c = bcf + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) <= 1e-16:
            return h
    raise ConvergenceError(f"incomplete gamma continued fraction failed at s={s}, x={x}")


def _small_x_unit_shape(s, x):
    """Gamma(s, x) for 0 <= s < 1 and 0 < x < 1, cancellation-free near s = 0."""
    lx = math.log(x)
    # Gamma(s) - 1/s and (1 - x^s)/s, both with their s -> 0 limits.
    if s == 0.0:
        head = -EULER_GAMMA - lx
    else:
        head = _gamma1pm1(s) / s - math.expm1(s * lx) / s
    # minus sum_{k>=1} (-1)^k x^(s+k) / (k! (s+k))
    acc = 0.0
    term = 1.0
    xs = math.exp(s * lx)
    for k in range(1, 200):
        term *= -x / k
        piece = term / (s + k)
        acc += piece
        if abs(piece) < 1e-17 * abs(acc):
            break
    return head - xs * acc


def _gamma1pm1(s):
    """Gamma(1 + s) - 1 without cancellation for small s."""
    if s >= 0.2:
        return math.gamma(1.0 + s) - 1.0
    # log Gamma(1+s) = -gamma_E s + sum_{k>=2} (-1)^k zeta(k) s^k / k
    acc = -EULER_GAMMA * s
    p = -s
    for k in range(2, 40):
        p *= -s
        piece = float(special.zeta(k)) * p / k
        acc += piece
        if abs(piece) < 1e-18 * abs(acc):
            break
    return math.expm1(acc)


def _check_x(x):
    if not x > 0:
        raise DomainError(f"incomplete gamma requires x > 0, got {x}")


def upper_inc_gamma_scaled(s: float, x: float, ctl: EvalControl = DEFAULT_CONTROL) -> float:
    """exp(x) * Gamma(s, x); stays finite where Gamma(s, x) itself underflows."""
    s = float(s)
    x = float(x)
    _check_x(x)
    if s > 1:
        raise DomainError(f"upper_inc_gamma is provided for s <= 1, got {s}")
    if x >= 1.0:
        return x**s * _scaled_cf(s, x, ctl)
    # Small x: start from the shape in [0, 1) and step down, which is the
    # stable direction for s < 0.
    if s == 1.0:
        return 1.0
    n = max(0, math.ceil(-s)) if s < 0 else 0
    r = s + n
    if r >= 1.0:
        r -= 1.0
        n += 1
    val = _small_x_unit_shape(r, x)
    ex = math.exp(-x)
    for j in range(n):
        t = r - 1.0 - j
        # Gamma(t, x) = (Gamma(t+1, x) - x^t e^-x) / t
        val = (val - x**t * ex) / t
    return val * math.exp(x)


def upper_inc_gamma(s: float, x: float, ctl: EvalControl = DEFAULT_CONTROL) -> float:
    """Upper incomplete gamma Gamma(s, x) for s <= 1 (zero and negative s allowed)."""
    s = float(s)
    x = float(x)
    _check_x(x)
    if s > 1:
        raise DomainError(f"upper_inc_gamma is provided for s <= 1, got {s}")
    if x >= 1.0:
        return math.exp(s * math.log(x) - x) * _scaled_cf(s, x, ctl)
    return math.exp(-x) * upper_inc_gamma_scaled(s, x, ctl)


def exp_e1(x: float) -> float:
    """Exponential integral E1(x) = Gamma(0, x)."""
    return upper_inc_gamma(0.0, x)
