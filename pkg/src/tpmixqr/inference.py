"""Simulation, parametric bootstrap and BIC model selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .almath import QuantileConfig, sample_al
from .data import PanelDataset, PreparedData, _standardize, prepare
from .em import FitError, FitOptions, FitResult, MixtureParams, NumericalError, fit

log = logging.getLogger(__name__)

AMBIGUOUS_GAP = 1e-3


def design_matrices(data: PanelDataset, standardize=True):
    """Stacked ``(S, X, unit_index)`` exactly as :func:`prepare` builds them."""
    S = np.vstack([u.s for u in data.units])
    X = np.vstack([u.x for u in data.units])
    if standardize:
        S = _standardize(S, data.covariate_names_binary, "binary")[0]
        X = _standardize(X, data.covariate_names_positive, "positive")[0]
    unit_index = np.repeat(np.arange(data.n_units), [u.n_obs for u in data.units])
    return S, X, unit_index


def simulate(params: MixtureParams, template: PanelDataset, cfg: QuantileConfig, seed=None,
             standardize=True, return_components=False):
    """Draw outcomes from the two-part mixture at the template's covariates.

    ``params`` refer to the standardized covariates of ``template`` (the scale
    on which fits report them) unless ``standardize`` is False.
    """
    S, X, unit_index = design_matrices(template, standardize)
    if S.shape[1] != params.gamma.size or X.shape[1] != params.beta.size:
        raise ValueError("parameter dimensions do not match the template covariates")
    rng = np.random.default_rng(seed)
    comp = rng.choice(params.G, size=template.n_units, p=params.pi)
    k = comp[unit_index]
    p_zero = expit(S @ params.gamma + params.b0[k])
    zero = rng.random(unit_index.size) < p_zero
    mu = X @ params.beta + params.b1[k]
    y_log = sample_al(mu, params.sigma, cfg.tau, rng)
    y = np.where(zero, 0.0, np.exp(y_log))
    out = template.with_outcomes(y)
    return (out, comp) if return_components else out


@dataclass
class BootstrapResult:
    n_replicates: int
    se: np.ndarray
    replicate_estimates: np.ndarray
    n_failed: int
    names: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    n_ambiguous: int = 0

    def se_dict(self) -> dict:
        return dict(zip(self.names, self.se.tolist()))


def bootstrap_se(fit_result: FitResult, data: PanelDataset, cfg: QuantileConfig,
                 n_replicates=250, seed=0, options: Optional[FitOptions] = None,
                 multi_start=False, standardize=True, zero_threshold=0.0, n_jobs=1):
    """Parametric-bootstrap standard errors of every parameter.

    Each replicate is simulated from ``fit_result.params`` and refit with the
    point estimate as the single warm start (``multi_start=True`` restores the
    cold multi-start of ``options``). Components are label-aligned by sorting
    on ``b1``.
    """
    if n_replicates < 2:
        raise ValueError("n_replicates must be at least 2")
    if not fit_result.converged:
        raise ValueError("bootstrap requires a converged fit")
    point = fit_result.params.canonical()
    base = options or FitOptions()
    seeds = np.random.SeedSequence(seed).spawn(n_replicates)

    def one(b):
        sim_seed, fit_seed = seeds[b].spawn(2)
        sim = simulate(point, data, cfg, np.random.default_rng(sim_seed), standardize)
        prep = prepare(sim, standardize=standardize, zero_threshold=zero_threshold)
        opts = replace(base, seed=int(fit_seed.generate_state(1)[0]))
        if not multi_start:
            opts = replace(opts, init=point, n_starts=1)
        try:
            res = fit(prep, cfg, point.G, opts)
        except (FitError, NumericalError, ValueError) as exc:
            log.debug("bootstrap replicate %d failed: %s", b, exc)
            return None
        return res.params.canonical()

    if n_jobs == 1:
        results = [one(b) for b in range(n_replicates)]
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=n_jobs)(delayed(one)(b) for b in range(n_replicates))

    ok = [r for r in results if r is not None]
    n_failed = n_replicates - len(ok)
    ambiguous = sum(1 for r in ok if r.G > 1 and np.min(np.diff(r.b1)) < AMBIGUOUS_GAP)
    names = point.parameter_names()
    if len(ok) >= 2:
        est = np.vstack([r.to_vector() for r in ok])
        se = est.std(axis=0, ddof=1)
    else:
        est = np.empty((len(ok), point.to_vector().size))
        se = np.full(point.to_vector().size, np.nan)
    warnings = []
    if n_failed > 0.2 * n_replicates:
        warnings.append(f"{n_failed} of {n_replicates} bootstrap replicates failed")
    if ambiguous:
        warnings.append(f"{ambiguous} replicate(s) with ambiguous component order")
    return BootstrapResult(n_replicates=n_replicates, se=se, replicate_estimates=est,
                           n_failed=n_failed, names=names, warnings=warnings,
                           n_ambiguous=ambiguous)


@dataclass
class SelectionRow:
    G: int
    tau: float
    loglik: float
    n_parameters: int
    aic: float
    bic: float
    selected: bool = False
    failed: bool = False
    error: str = ""


@dataclass
class SelectionTable:
    rows: list
    fits: dict = field(default_factory=dict, repr=False)

    def selected(self, tau) -> Optional[SelectionRow]:
        for r in self.rows:
            if r.selected and r.tau == tau:
                return r
        return None

    def to_frame(self):
        import pandas as pd
        cols = ["tau", "G", "loglik", "n_parameters", "aic", "bic", "selected", "failed"]
        return pd.DataFrame([{c: getattr(r, c) for c in cols} for r in self.rows],
                            columns=cols)


def select_model(data, taus: Sequence[float], G_range: Sequence[int],
                 options: Optional[FitOptions] = None, n_jobs=1) -> SelectionTable:
    """Fit every (tau, G) cell and flag the BIC-minimizing G per tau.

    ``data`` may be a :class:`PanelDataset` (prepared with defaults) or an
    already prepared dataset. Failed cells are kept and marked.
    """
    if not taus or not G_range:
        raise ValueError("taus and G_range must be nonempty")
    prep = data if isinstance(data, PreparedData) else prepare(data)
    opts = options or FitOptions()
    cells = [(float(t), int(g)) for t in taus for g in G_range]

    def one(cell):
        t, g = cell
        try:
            return fit(prep, QuantileConfig(t), g, opts)
        except (FitError, NumericalError, ValueError) as exc:
            return exc

    if n_jobs == 1:
        results = [one(c) for c in cells]
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=n_jobs)(delayed(one)(c) for c in cells)

    rows, fits = [], {}
    for (t, g), res in zip(cells, results):
        if isinstance(res, Exception):
            rows.append(SelectionRow(g, t, np.nan, 0, np.nan, np.nan, failed=True,
                                     error=str(res)))
        else:
            fits[(t, g)] = res
            rows.append(SelectionRow(g, t, res.loglik, res.n_parameters, res.aic, res.bic))
    for t in dict.fromkeys(t for t, _ in cells):
        ok = [r for r in rows if r.tau == t and not r.failed]
        if ok:
            min(ok, key=lambda r: r.bic).selected = True
    return SelectionTable(rows, fits)
