"""Empirical-Bayes estimation of the GH hyperparameters.

The marginal log-likelihood ``sum_i log m(y_i | tau, gamma, alpha)`` is
maximized by a grid search over (log tau, gamma) followed by bounded
Nelder-Mead.  Counts usually take few distinct values, so the objective is
evaluated once per distinct count and weighted by multiplicity.  Grid values
of the Euler integral are cached per distinct count and shared between
fits with the same grid, which makes repeated fits (simulations) cheap.
"""
from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .data import CountDataset, DataError, as_dataset
from .gh import TAU_MIN, GHParams, ShrinkageResult, shrinkage
from .specfun import DEFAULT_CONTROL, EvalControl, log_euler_integral


class BoundaryWarning(UserWarning):
    """The maximizer sits on the upper end of the gamma search range."""


@dataclass(frozen=True)
class FitConfig:
    """Search box and effort for :func:`fit`.

    A degenerate range such as ``gamma_range=(1, 1)`` pins that parameter.
    """

    tau_range: tuple = (TAU_MIN, 1.0)
    gamma_range: tuple = (0.0, 20.0)
    grid_points: int = 40
    refine_iters: int = 200
    fit_alpha: bool = False
    alpha: float = 0.5
    alpha_range: tuple = (0.05, 20.0)

    def __post_init__(self):
        t0, t1 = map(float, self.tau_range)
        g0, g1 = map(float, self.gamma_range)
        if not TAU_MIN <= t0 <= t1 <= 1.0:
            raise ValueError(f"tau_range must satisfy {TAU_MIN} <= lo <= hi <= 1, got {self.tau_range}")
        if not 0.0 <= g0 <= g1 or not math.isfinite(g1):
            raise ValueError(f"gamma_range must satisfy 0 <= lo <= hi < inf, got {self.gamma_range}")
        a0, a1 = map(float, self.alpha_range)
        if not 0 < a0 <= a1 or not math.isfinite(a1):
            raise ValueError(f"bad alpha_range {self.alpha_range}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if int(self.grid_points) != self.grid_points or self.grid_points < 2:
            raise ValueError(f"grid_points must be an integer >= 2, got {self.grid_points}")
        if self.refine_iters < 0:
            raise ValueError("refine_iters must be nonnegative")
        object.__setattr__(self, "tau_range", (t0, t1))
        object.__setattr__(self, "gamma_range", (g0, g1))
        object.__setattr__(self, "alpha_range", (a0, a1))

    def tau_grid(self):
        t0, t1 = self.tau_range
        return np.array([t0]) if t0 == t1 else np.geomspace(t0, t1, self.grid_points)

    def gamma_grid(self):
        g0, g1 = self.gamma_range
        return np.array([g0]) if g0 == g1 else np.linspace(g0, g1, self.grid_points)


@dataclass(frozen=True)
class FitResult:
    """Fitted hyperparameters.

    ``trace`` has one row ``(tau, gamma, alpha, objective)`` per evaluation,
    grid nodes first, then refinement steps; ``log_marginal`` is its maximum.
    """

    params: GHParams
    log_marginal: float
    trace: np.ndarray
    n_grid: int
    at_gamma_boundary: bool = False

    def trace_params(self):
        return [(GHParams(alpha=a, gamma=g, tau=t), f) for t, g, a, f in self.trace]


class _GridTable:
    """log I(alpha + 1/2, y + 1/2, gamma, tau^2) over a fixed grid, keyed by y."""

    def __init__(self, alpha, taus, gammas, ctl):
        self.alpha = alpha
        self.eps = (taus**2)[:, None] * np.ones_like(gammas)[None, :]
        self.g = np.ones_like(taus)[:, None] * gammas[None, :]
        self.ctl = ctl
        self.rows = {}
        self.prior = log_euler_integral(0.5, 0.5, self.g, self.eps, ctl)
        self.lock = threading.Lock()

    def get(self, ys):
        with self.lock:
            missing = [int(y) for y in ys if int(y) not in self.rows]
            if missing:
                m = np.asarray(missing, dtype=float)[:, None, None]
                vals = log_euler_integral(self.alpha + 0.5, m + 0.5, self.g[None], self.eps[None], self.ctl)
                for y, v in zip(missing, vals):
                    self.rows[y] = v
            return np.stack([self.rows[int(y)] for y in ys])


_TABLES: dict = {}
_TABLES_LOCK = threading.Lock()


def _table(cfg: FitConfig, ctl: EvalControl) -> _GridTable:
    key = (cfg.alpha, cfg.tau_range, cfg.gamma_range, cfg.grid_points, ctl)
    with _TABLES_LOCK:
        tab = _TABLES.get(key)
        if tab is None:
            tab = _TABLES[key] = _GridTable(cfg.alpha, cfg.tau_grid(), cfg.gamma_grid(), ctl)
        return tab


def _data_term(values, counts, alpha):
    """Parameter-free part of sum log m(y) for fixed alpha."""
    return float(
        np.dot(counts, special.gammaln(values + alpha) - special.gammaln(alpha) - special.gammaln(values + 1.0))
    )


def log_marginal_sum(values, counts, tau, gamma, alpha, ctl: EvalControl = DEFAULT_CONTROL) -> float:
    """sum_i log m(y_i) from the distinct values and their multiplicities."""
    values = np.asarray(values, dtype=float)
    counts = np.asarray(counts, dtype=float)
    eps = tau * tau
    a = np.concatenate([np.full(values.size, alpha + 0.5), [0.5]])
    b = np.concatenate([values + 0.5, [0.5]])
    li = log_euler_integral(a, b, gamma, eps, ctl)
    return _data_term(values, counts, alpha) + float(np.dot(counts, li[:-1])) - counts.sum() * li[-1]


def _all_zero_fit(n, cfg: FitConfig, ctl: EvalControl) -> FitResult:
    # m(0) = E[kappa^alpha] rises as tau falls and as gamma grows, since both
    # tilt the prior on kappa toward 1.  Near that corner the objective is
    # within rounding of 0, so a numerical search would only chase noise.
    t, g = cfg.tau_range[0], cfg.gamma_range[1]
    f = log_marginal_sum(np.array([0.0]), np.array([n]), t, g, cfg.alpha, ctl)
    at_edge = cfg.gamma_range[0] < cfg.gamma_range[1]
    if at_edge:
        warnings.warn(f"all counts are zero; gamma set to the upper search bound {g:.4g}", BoundaryWarning, stacklevel=3)
    return FitResult(
        params=GHParams(alpha=cfg.alpha, gamma=g, tau=t),
        log_marginal=f,
        trace=np.array([[t, g, cfg.alpha, f]]),
        n_grid=0,
        at_gamma_boundary=at_edge,
    )


def fit(counts, cfg: FitConfig = FitConfig(), ctl: EvalControl = DEFAULT_CONTROL) -> FitResult:
    """Maximize the marginal likelihood of the counts over (tau, gamma[, alpha]).

    All-zero data is valid.  Its objective increases toward small tau and
    large gamma, so the fit is the corner of the search box with the most
    shrinkage.
    """
    ds = as_dataset(counts)
    values, mult = ds.histogram()
    mult = mult.astype(float)
    n = mult.sum()

    if values.size == 1 and values[0] == 0:
        return _all_zero_fit(n, cfg, ctl)

    taus, gammas = cfg.tau_grid(), cfg.gamma_grid()
    tab = _table(cfg, ctl)
    rows = tab.get(values)
    surface = np.tensordot(mult, rows, axes=1) - n * tab.prior + _data_term(values.astype(float), mult, cfg.alpha)
    # first maximal node in (tau, gamma) order; ties resolve deterministically
    i, j = np.unravel_index(int(np.argmax(surface)), surface.shape)

    tt, gg = np.meshgrid(taus, gammas, indexing="ij")
    trace = [np.column_stack([tt.ravel(), gg.ravel(), np.full(tt.size, cfg.alpha), surface.ravel()])]
    n_grid = tt.size

    # free coordinates for refinement: log tau, gamma, log alpha
    lo, hi, x0, step = [], [], [], []
    free_tau = cfg.tau_range[0] < cfg.tau_range[1]
    free_gamma = cfg.gamma_range[0] < cfg.gamma_range[1]
    if free_tau:
        lt = np.log(taus)
        lo.append(lt[0]), hi.append(lt[-1]), x0.append(lt[i]), step.append(lt[1] - lt[0])
    if free_gamma:
        lo.append(gammas[0]), hi.append(gammas[-1]), x0.append(gammas[j]), step.append(gammas[1] - gammas[0])
    if cfg.fit_alpha:
        la = np.log(cfg.alpha_range)
        if la[0] < la[1]:
            lo.append(la[0]), hi.append(la[1]), x0.append(float(np.clip(np.log(cfg.alpha), *la))), step.append(0.25)

    def unpack(x):
        k = 0
        tau, gamma, alpha = taus[i], gammas[j], cfg.alpha
        if free_tau:
            tau = float(np.exp(x[k])); k += 1  # noqa: E702
        if free_gamma:
            gamma = float(x[k]); k += 1  # noqa: E702
        if k < len(x):
            alpha = float(np.exp(x[k]))
        return min(max(tau, cfg.tau_range[0]), cfg.tau_range[1]), min(max(gamma, cfg.gamma_range[0]), cfg.gamma_range[1]), alpha

    evals = []

    def negobj(x):
        t, g, a = unpack(x)
        f = log_marginal_sum(values, mult, t, g, a, ctl)
        evals.append((t, g, a, f))
        return -f if math.isfinite(f) else np.inf

    if x0 and cfg.refine_iters > 0:
        x0 = np.array(x0)
        lo, hi = np.array(lo), np.array(hi)
        # initial simplex: one grid step along each axis, pointed inward
        simplex = [x0]
        for k in range(x0.size):
            e = x0.copy()
            e[k] = x0[k] + step[k] if x0[k] + step[k] <= hi[k] else x0[k] - step[k]
            simplex.append(e)
        optimize.minimize(
            negobj,
            x0,
            method="Nelder-Mead",
            bounds=list(zip(lo, hi)),
            options=dict(maxiter=cfg.refine_iters, xatol=1e-3, fatol=1e-7, initial_simplex=np.array(simplex)),
        )
    if evals:
        trace.append(np.array(evals))
    trace = np.vstack(trace)
    best = int(np.argmax(trace[:, 3]))
    t, g, a, f = trace[best]
    at_edge = cfg.gamma_range[0] < cfg.gamma_range[1] and g >= cfg.gamma_range[1] * (1 - 1e-6)
    if at_edge:
        warnings.warn(
            f"gamma estimate {g:.4g} is on the upper search bound {cfg.gamma_range[1]:.4g}", BoundaryWarning, stacklevel=2
        )
    params = GHParams(alpha=float(a), gamma=float(g), tau=float(t))
    return FitResult(params=params, log_marginal=float(f), trace=trace, n_grid=n_grid, at_gamma_boundary=bool(at_edge))


def shrink(counts, params: GHParams, ctl: EvalControl = DEFAULT_CONTROL) -> ShrinkageResult:
    """Plug-in posterior summaries at fixed hyperparameters."""
    ds = as_dataset(counts)
    return shrinkage(ds.y, params, ctl)


def fit_shrink(counts, cfg: FitConfig = FitConfig(), ctl: EvalControl = DEFAULT_CONTROL):
    """:func:`fit` then :func:`shrink`; returns ``(FitResult, ShrinkageResult)``."""
    ds = as_dataset(counts)
    res = fit(ds, cfg, ctl)
    return res, shrink(ds, res.params, ctl)


__all__ = [
    "BoundaryWarning",
    "CountDataset",
    "DataError",
    "FitConfig",
    "FitResult",
    "fit",
    "fit_shrink",
    "log_marginal_sum",
    "shrink",
]
