"""Lasso-penalized EM on the positive-part slopes with cross-validated tuning."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .almath import QuantileConfig, check_loss
from .data import PreparedData
from .em import (FitError, FitOptions, FitResult, NumericalError, MixtureParams,
                 PosteriorState, m_step_positive, multi_start, positive_system,
                 update_b1, zero_beta_threshold)

log = logging.getLogger(__name__)

CD_TOL = 1e-8
CD_MAX_SWEEPS = 10_000


@dataclass
class PenaltyConfig:
    """CV settings. ``lambda_grid=None`` requests the default path from ``lambda_max``."""

    lambda_grid: Optional[Sequence[float]] = None
    n_folds: int = 10
    fold_seed: int = 0

    def __post_init__(self):
        if self.lambda_grid is not None:
            grid = np.asarray(self.lambda_grid, dtype=float).ravel()
            if grid.size == 0:
                raise ValueError("lambda_grid must be nonempty")
            if np.any(grid < 0) or np.any(np.diff(grid) < 0):
                raise ValueError("lambda_grid must be nonnegative and sorted ascending")
            self.lambda_grid = grid.tolist()
        if self.n_folds < 2:
            raise ValueError("n_folds must be at least 2")


def soft_threshold(z, c):
    return np.sign(z) * np.maximum(np.abs(z) - c, 0.0)


def _active_set_solution(A, h, c, beta, tol=1e-12):
    """Exact minimizer on the support and signs of ``beta``, if it satisfies KKT.

    Coordinate descent identifies the support quickly but crawls along
    ill-conditioned directions; once the support is right the solution is a
    linear solve.
    """
    act = np.flatnonzero(beta)
    sol = np.zeros_like(beta)
    if act.size:
        s = np.sign(beta[act])
        try:
            sol[act] = np.linalg.solve(A[np.ix_(act, act)], h[act] - c * s)
        except np.linalg.LinAlgError:
            return None
        if np.any(np.sign(sol[act]) != s):
            return None
    g = h - A @ sol
    rest = np.setdiff1d(np.arange(beta.size), act)
    if np.any(np.abs(g[rest]) > c * (1 + tol) + tol):
        return None
    return sol


def lasso_cd(A, h, c, beta0=None, tol=CD_TOL, max_sweeps=CD_MAX_SWEEPS):
    """Cyclic coordinate descent for ``beta' A beta / 2 - beta' h + c ||beta||_1``.

    Returns ``(beta, n_sweeps)``; stops when no coordinate moves by more
    than ``tol`` in a sweep.
    """
    p = h.size
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    if p == 0:
        return beta, 0
    if not np.isfinite(c):
        return np.zeros(p), 0
    diag = np.diag(A).copy()
    g = h - A @ beta
    for sweep in range(1, max_sweeps + 1):
        exact = _active_set_solution(A, h, c, beta)
        if exact is not None:
            return exact, sweep
        move = 0.0
        for j in range(p):
            if diag[j] <= 0:
                continue
            old = beta[j]
            new = soft_threshold(g[j] + diag[j] * old, c) / diag[j]
            if new != old:
                g -= A[:, j] * (new - old)
                beta[j] = new
                move = max(move, abs(new - old))
        if move < tol:
            return beta, sweep
    return beta, max_sweeps


class LassoStep:
    """Penalized replacement for the closed-form beta/b1 update.

    With ``lam = inf`` beta is pinned at zero; ``thresholds`` (if a list)
    then collects the smallest penalty that would have kept it there.
    """

    def __init__(self, lam, thresholds=None):
        if not lam >= 0:
            raise ValueError("lambda must be nonnegative")
        self.lam = lam
        self.thresholds = thresholds

    def __call__(self, state, data, cfg, current, diagnostics=None):
        return penalized_m_step_positive(state, data, cfg, current, self.lam, diagnostics,
                                         self.thresholds)


def penalized_m_step_positive(state: PosteriorState, data: PreparedData, cfg: QuantileConfig,
                              current: MixtureParams, lam: float, diagnostics=None,
                              thresholds=None):
    """Beta by lasso coordinate descent on the Q-function's beta-block, then b1.

    The block is ``-(beta' A beta / 2 - beta' h) / (rho2 sigma)``, so the
    soft-threshold level is ``lam * rho2 * sigma``. Locations are unpenalized.
    """
    if not lam >= 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0:
        return m_step_positive(state, data, cfg, current, diagnostics)
    if data.n_pos == 0:
        raise ValueError("no positive observations")
    A, h = positive_system(state, data, cfg, current.b1)
    scale = cfg.rho2 * current.sigma
    if thresholds is not None and h.size:
        thresholds.append(float(np.max(np.abs(h))) / scale)
    beta, sweeps = lasso_cd(A, h, lam * scale, beta0=current.beta)
    if sweeps >= CD_MAX_SWEEPS and diagnostics is not None:
        diagnostics.append("lasso coordinate descent hit the sweep limit")
    return beta, update_b1(state, data, cfg, beta, current.b1)


def fit_penalized(data: PreparedData, cfg: QuantileConfig, G: int, lam: float,
                  options: Optional[FitOptions] = None, **kw) -> FitResult:
    """Multi-start EM maximizing ``loglik - lam * ||beta||_1``.

    ``n_parameters`` counts nonzero slopes only.
    """
    if not lam >= 0:
        raise ValueError("lambda must be nonnegative")
    opts = replace(options or FitOptions(), **kw)
    return multi_start(data, cfg, G, opts, positive_step=LassoStep(lam), lam=lam,
                       count_zero_beta=False)


def lambda_max(data: PreparedData, cfg: QuantileConfig, G: int,
               options: Optional[FitOptions] = None, **kw) -> float:
    """Smallest penalty for which every EM start keeps beta at exactly zero.

    Runs the beta-constrained EM (infinite penalty) with the same starts and
    records, at every cycle, the penalty needed to keep each candidate beta
    update at zero. Any ``lam >= lambda_max`` follows the same trajectory.
    """
    opts = replace(options or FitOptions(), **kw)
    if data.X.shape[1] == 0:
        return 0.0
    found = []

    def probe(state, params):
        out = zero_beta_threshold(state, data, cfg)
        if out is not None:
            found.append(out[0] / params.sigma)

    multi_start(data, cfg, G, opts, positive_step=LassoStep(np.inf, found), lam=np.inf,
                count_zero_beta=False, on_state=probe)
    if not found:
        raise NumericalError("no penalty threshold could be evaluated")
    return float(max(found))


def default_lambda_grid(lam_max: float, n=50, ratio=1e-3) -> list:
    """``n`` log-spaced values from ``ratio * lam_max`` up to ``lam_max``, ascending."""
    if lam_max <= 0:
        return [0.0]
    return np.geomspace(ratio * lam_max, lam_max, n).tolist()


def unit_folds(n_units, n_folds, rng):
    perm = rng.permutation(n_units)
    return [np.sort(f) for f in np.array_split(perm, n_folds)]


def held_out_check_loss(params: MixtureParams, data: PreparedData, cfg: QuantileConfig):
    """Mean check loss of held-out positives at the population-averaged location."""
    pos = data.pos
    mu = data.X[pos] @ params.beta + float(params.pi @ params.b1)
    return float(np.mean(check_loss(data.y_log[pos] - mu, cfg.tau)))


@dataclass
class CVTable:
    lambdas: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    fold_losses: np.ndarray
    diagnostics: list

    def to_frame(self):
        import pandas as pd
        return pd.DataFrame({"lambda": self.lambdas, "cv_mean": self.mean, "cv_se": self.se})


def cross_validate_lambda(data: PreparedData, cfg: QuantileConfig, G: int,
                          pcfg: PenaltyConfig, options: Optional[FitOptions] = None,
                          max_resample=100):
    """K-fold CV over units; returns ``(lambda_opt, CVTable)``.

    Each fold walks the grid from the largest penalty down, warm-starting
    every fit at the previous solution after a multi-start fit at the top.
    Ties go to the larger penalty.
    """
    opts = options or FitOptions()
    if pcfg.n_folds > data.n_units:
        raise ValueError("more folds than units")
    grid = pcfg.lambda_grid
    if grid is None:
        grid = default_lambda_grid(lambda_max(data, cfg, G, opts))
    grid = np.asarray(grid, dtype=float)
    diagnostics = []

    rng = np.random.default_rng(pcfg.fold_seed)
    for attempt in range(max_resample + 1):
        folds = unit_folds(data.n_units, pcfg.n_folds, rng)
        empty = [f for f, units in enumerate(folds)
                 if data.subset(units).n_pos == 0]
        if not empty:
            break
        diagnostics.append(f"fold(s) {empty} without positive outcomes; folds resampled")
    else:
        raise ValueError("could not form folds that all contain positive outcomes")

    if grid.size == 1:
        return float(grid[0]), CVTable(grid, np.full(1, np.nan), np.full(1, np.nan),
                                       np.full((pcfg.n_folds, 1), np.nan), diagnostics)

    losses = np.full((pcfg.n_folds, grid.size), np.nan)
    for f, held in enumerate(folds):
        train = data.subset(np.setdiff1d(np.arange(data.n_units), held))
        test = data.subset(held)
        init = None
        for j in range(grid.size - 1, -1, -1):
            o = opts if init is None else replace(opts, init=init, n_starts=1)
            try:
                res = fit_penalized(train, cfg, G, float(grid[j]), o)
            except (FitError, NumericalError) as exc:
                diagnostics.append(f"fold {f}, lambda {grid[j]:.6g}: {exc}")
                continue
            init = res.params
            losses[f, j] = held_out_check_loss(res.params, test, cfg)
    mean = np.nanmean(losses, axis=0)
    counts = np.sum(np.isfinite(losses), axis=0)
    se = np.nanstd(losses, axis=0, ddof=1) / np.sqrt(np.maximum(counts, 1))
    if not np.any(np.isfinite(mean)):
        raise FitError("every cross-validation fit failed")
    best = np.flatnonzero(mean == np.nanmin(mean))[-1]
    return float(grid[best]), CVTable(grid, mean, se, losses, diagnostics)
