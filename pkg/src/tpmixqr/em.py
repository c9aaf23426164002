"""EM fitting of the two-part finite-mixture quantile regression.

Each unit ``i`` belongs to one of ``G`` latent components. Given component
``k`` the zero indicator follows a logit model with linear predictor
``S @ gamma + b0[k]`` and the log of a positive outcome follows an
asymmetric Laplace law located at ``X @ beta + b1[k]`` with scale ``sigma``.

The M-step is a cyclic sequence of conditional maximizations
(beta, b1, then sigma and pi, then gamma and b0), each of which cannot
decrease the expected complete-data log-likelihood, so the observed
log-likelihood is nondecreasing across cycles.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, logsumexp

from .almath import RESIDUAL_FLOOR, QuantileConfig, check_loss, gig_inverse_moment
from .data import PreparedData

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8
LOGIT_CAP = 15.0
MIN_MASS = 1e-4
RIDGE_JITTER = 1e-8


class NumericalError(ArithmeticError):
    pass


class FitError(RuntimeError):
    """No start converged. ``traces`` holds the log-likelihood trace of every run."""

    def __init__(self, message, traces=()):
        super().__init__(message)
        self.traces = list(traces)


class DegenerateComponent(RuntimeError):
    pass


@dataclass
class MixtureParams:
    gamma: np.ndarray
    beta: np.ndarray
    sigma: float
    b0: np.ndarray
    b1: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float)).ravel()
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float)).ravel()
        self.sigma = float(self.sigma)
        self.b0 = np.atleast_1d(np.asarray(self.b0, dtype=float)).ravel()
        self.b1 = np.atleast_1d(np.asarray(self.b1, dtype=float)).ravel()
        self.pi = np.atleast_1d(np.asarray(self.pi, dtype=float)).ravel()
        if not (self.b0.size == self.b1.size == self.pi.size >= 1):
            raise ValueError("b0, b1 and pi must share the same length G >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1.0) > 1e-8:
            raise ValueError("pi must be a probability vector")

    @property
    def G(self) -> int:
        return self.b1.size

    def permuted(self, order) -> "MixtureParams":
        order = np.asarray(order)
        return replace(self, b0=self.b0[order], b1=self.b1[order], pi=self.pi[order])

    def canonical(self) -> "MixtureParams":
        """Components sorted by ascending positive-part location."""
        return self.permuted(np.argsort(self.b1, kind="stable"))

    def copy(self) -> "MixtureParams":
        return MixtureParams(self.gamma.copy(), self.beta.copy(), self.sigma,
                             self.b0.copy(), self.b1.copy(), self.pi.copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.beta, [self.sigma],
                               self.b0, self.b1, self.pi])

    def parameter_names(self, names_binary=None, names_positive=None) -> list:
        nb = names_binary or [str(j) for j in range(self.gamma.size)]
        npos = names_positive or [str(j) for j in range(self.beta.size)]
        ks = range(1, self.G + 1)
        return ([f"gamma[{n}]" for n in nb] + [f"beta[{n}]" for n in npos] + ["sigma"]
                + [f"b0[{k}]" for k in ks] + [f"b1[{k}]" for k in ks]
                + [f"pi[{k}]" for k in ks])

    def to_dict(self) -> dict:
        return {"gamma": self.gamma.tolist(), "beta": self.beta.tolist(),
                "sigma": self.sigma, "b0": self.b0.tolist(), "b1": self.b1.tolist(),
                "pi": self.pi.tolist()}

    @classmethod
    def from_dict(cls, d) -> "MixtureParams":
        return cls(d.get("gamma", []), d.get("beta", []), d["sigma"], d["b0"],
                   d["b1"], d["pi"])


@dataclass
class PosteriorState:
    """E-step output.

    ``w`` is ``(n_units, G)``; ``v_inv`` is ``(n_pos, G)``, one entry per
    positive observation and component since the residual depends on ``b1[k]``.
    ``loglik`` is the observed log-likelihood at the parameters used.
    """

    w: np.ndarray
    v_inv: np.ndarray
    loglik: float


@dataclass
class FitOptions:
    n_starts: int = 20
    tol: float = 1e-5
    max_iter: int = 500
    irls_max_iter: int = 100
    irls_tol: float = 1e-8
    residual_floor: float = RESIDUAL_FLOOR
    seed: int = 0
    init: Optional[MixtureParams] = None
    max_restarts: int = 5
    floor_start: float = 1e-2
    floor_decay: float = 0.1
    line_search: bool = True


@dataclass
class FitResult:
    params: MixtureParams
    loglik_trace: list
    n_iterations: int
    converged: bool
    n_parameters: int
    aic: float
    bic: float
    tau: float
    n_units: int
    lambda_: float = 0.0
    objective_trace: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    starts: list = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]


# ---------------------------------------------------------------------------
# likelihood pieces


def _positive_rows(data: PreparedData):
    pos = data.pos
    return data.X[pos], data.y_log[pos], data.unit_index[pos]


def _obs_component_loglik(params: MixtureParams, data: PreparedData, cfg: QuantileConfig):
    """Per-row, per-component log f_itk as an ``(n_obs, G)`` array."""
    eta = (data.S @ params.gamma)[:, None] + params.b0[None, :]
    zero = data.d
    out = np.empty((data.n_obs, params.G))
    # log p = -log(1 + e^-eta); log(1 - p) = -log(1 + e^eta)
    out[zero] = -np.logaddexp(0.0, -eta[zero])
    pos = ~zero
    mu = (data.X[pos] @ params.beta)[:, None] + params.b1[None, :]
    u = (data.y_log[pos][:, None] - mu) / params.sigma
    al = (np.log(cfg.tau * (1.0 - cfg.tau)) - np.log(params.sigma)
          - u * (cfg.tau - (u < 0)))
    out[pos] = -np.logaddexp(0.0, eta[pos]) + al
    return out


def component_logliks(params: MixtureParams, data: PreparedData, cfg: QuantileConfig):
    """``(n_units, G)`` array of sum_t log f_itk."""
    per_obs = _obs_component_loglik(params, data, cfg)
    out = np.empty((data.n_units, params.G))
    for k in range(params.G):
        out[:, k] = np.bincount(data.unit_index, weights=per_obs[:, k],
                                minlength=data.n_units)
    return out


def _unit_log_marginals(params, data, cfg):
    with np.errstate(divide="ignore"):
        a = component_logliks(params, data, cfg) + np.log(params.pi)[None, :]
    lse = logsumexp(a, axis=1)
    bad = np.flatnonzero(~np.isfinite(lse))
    if bad.size:
        raise NumericalError(
            f"non-finite likelihood contribution for unit {data.unit_ids[bad[0]]!r} "
            f"(index {bad[0]})")
    return a, lse


def observed_loglik(params: MixtureParams, data: PreparedData, cfg: QuantileConfig) -> float:
    _, lse = _unit_log_marginals(params, data, cfg)
    return float(lse.sum())


def e_step(params: MixtureParams, data: PreparedData, cfg: QuantileConfig,
           residual_floor=RESIDUAL_FLOOR) -> PosteriorState:
    a, lse = _unit_log_marginals(params, data, cfg)
    w = np.exp(a - lse[:, None])
    w /= w.sum(axis=1, keepdims=True)
    X, y, _ = _positive_rows(data)
    resid = y[:, None] - (X @ params.beta)[:, None] - params.b1[None, :]
    v_inv = gig_inverse_moment(resid, params.sigma, cfg, floor=residual_floor)
    return PosteriorState(w=w, v_inv=np.atleast_2d(v_inv).reshape(resid.shape),
                          loglik=float(lse.sum()))


# ---------------------------------------------------------------------------
# M-step


def positive_system(state: PosteriorState, data: PreparedData, cfg: QuantileConfig, b1):
    """Weighted normal equations ``A beta = h`` of the beta-block given ``b1``.

    The beta-block of the expected complete-data log-likelihood is
    ``-(beta' A beta / 2 - beta' h) / (rho2 * sigma)`` plus constants.
    """
    X, y, units = _positive_rows(data)
    W = state.w[units]
    WV = W * state.v_inv
    a = WV.sum(axis=1)
    t = (WV * (y[:, None] - np.asarray(b1)[None, :])).sum(axis=1) - cfg.theta * W.sum(axis=1)
    A = X.T @ (a[:, None] * X)
    h = X.T @ t
    return A, h


def _solve_gram(A, h, diagnostics):
    if A.size == 0:
        return np.zeros(0)
    try:
        L = np.linalg.cholesky(A)
        if np.min(np.abs(np.diag(L))) ** 2 < 1e-12 * max(np.max(np.diag(A)), 1e-300):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        if diagnostics is not None:
            diagnostics.append("singular weighted Gram matrix in beta update "
                               "(collinear covariates?); ridge jitter applied")
        A = A + RIDGE_JITTER * np.eye(A.shape[0])
        return np.linalg.solve(A, h)
    return np.linalg.solve(L.T, np.linalg.solve(L, h))


def update_b1(state: PosteriorState, data: PreparedData, cfg: QuantileConfig, beta, current_b1):
    X, y, units = _positive_rows(data)
    W = state.w[units]
    WV = W * state.v_inv
    r = y - X @ beta
    num = (WV * r[:, None]).sum(axis=0) - cfg.theta * W.sum(axis=0)
    den = WV.sum(axis=0)
    b1 = np.array(current_b1, dtype=float)
    ok = den > 1e-300
    b1[ok] = num[ok] / den[ok]
    return b1


def m_step_positive(state: PosteriorState, data: PreparedData, cfg: QuantileConfig,
                    current: MixtureParams, diagnostics=None):
    """Closed-form weighted least-squares updates: beta given current b1, then b1."""
    if data.n_pos == 0:
        raise ValueError("no positive observations")
    A, h = positive_system(state, data, cfg, current.b1)
    beta = _solve_gram(A, h, diagnostics)
    return beta, update_b1(state, data, cfg, beta, current.b1)


def _binary_objective(eta, d, wt):
    return float(np.sum(wt * (d * eta - np.logaddexp(0.0, eta))))


def m_step_binary(state: PosteriorState, data: PreparedData, current: MixtureParams,
                  max_iter=100, tol=1e-8, cap=LOGIT_CAP, diagnostics=None):
    """Weighted logistic regression on the component-expanded design.

    Rows are replicated once per component with weight ``w[i, k]``; the
    component intercepts enter as indicator columns. Newton steps are
    damped so the objective never decreases, and the intercepts are boxed
    to ``[-cap, cap]``.
    """
    G, m = current.G, current.gamma.size
    n = data.n_obs
    Z = np.zeros((n * G, m + G))
    Z[:, :m] = np.tile(data.S, (G, 1))
    Z[np.arange(n * G), m + np.repeat(np.arange(G), n)] = 1.0
    dd = np.tile(data.d.astype(float), G)
    wt = state.w[data.unit_index].T.ravel()

    mass = state.w.sum(axis=0)
    unident = mass < 1e-10
    coef = np.concatenate([current.gamma, np.clip(current.b0, -cap, cap)])
    free = np.ones(m + G, dtype=bool)
    free[m + np.flatnonzero(unident)] = False

    eta = Z @ coef
    obj = _binary_objective(eta, dd, wt)
    for _ in range(max_iter):
        p = expit(eta)
        grad = Z.T @ (wt * (dd - p))
        # intercepts pinned at the box with an outward gradient are inactive
        b0 = coef[m:]
        pinned = np.zeros(m + G, dtype=bool)
        pinned[m:] = ((b0 >= cap) & (grad[m:] > 0)) | ((b0 <= -cap) & (grad[m:] < 0))
        act = free & ~pinned
        if not act.any() or np.linalg.norm(grad[act]) < tol:
            break
        H = Z[:, act].T @ ((wt * p * (1.0 - p))[:, None] * Z[:, act])
        H[np.diag_indices_from(H)] += RIDGE_JITTER
        step = np.zeros_like(coef)
        step[act] = np.linalg.solve(H, grad[act])
        t = 1.0
        for _ in range(50):
            cand = coef + t * step
            cand[m:] = np.clip(cand[m:], -cap, cap)
            eta_c = Z @ cand
            obj_c = _binary_objective(eta_c, dd, wt)
            if obj_c >= obj:
                break
            t *= 0.5
        else:
            break
        done = np.max(np.abs(cand - coef)) < 1e-14
        coef, eta, obj = cand, eta_c, obj_c
        if done:
            break

    gamma, b0 = coef[:m], coef[m:]
    if diagnostics is not None:
        if np.any(np.abs(b0) >= cap):
            diagnostics.append(f"binary intercepts capped at |b0| = {cap} "
                               "(quasi-separation)")
        if unident.any():
            diagnostics.append(f"components {list(np.flatnonzero(unident) + 1)} carry no "
                               "weight; their binary intercepts are unidentified")
    return gamma, b0


def m_step_scale_and_masses(state: PosteriorState, data: PreparedData, cfg: QuantileConfig,
                            beta, b1, diagnostics=None):
    if data.n_pos == 0:
        raise ValueError("no positive observations")
    X, y, units = _positive_rows(data)
    W = state.w[units]
    resid = y[:, None] - (X @ beta)[:, None] - np.asarray(b1)[None, :]
    sigma = float(np.sum(W * check_loss(resid, cfg.tau)) / np.sum(W))
    if not sigma >= SIGMA_FLOOR:
        if diagnostics is not None:
            diagnostics.append(f"sigma clamped to {SIGMA_FLOOR}")
        sigma = SIGMA_FLOOR
    pi = state.w.mean(axis=0)
    return sigma, pi / pi.sum()


# ---------------------------------------------------------------------------
# driver

PositiveStep = Callable[..., tuple]


def n_free_parameters(params: MixtureParams, count_zero_beta=True) -> int:
    p = params.beta.size if count_zero_beta else int(np.count_nonzero(params.beta))
    G = params.G
    return params.gamma.size + p + 1 + 2 * G + (G - 1)


def information_criteria(loglik, nu, n_units):
    return -2.0 * loglik + 2.0 * nu, -2.0 * loglik + nu * np.log(n_units)


def initial_params(data: PreparedData, cfg: QuantileConfig, G: int, rng) -> MixtureParams:
    """Data-driven start: 1-D k-means on per-unit mean log-positive outcomes."""
    pos = data.pos
    cnt = np.bincount(data.unit_index[pos], minlength=data.n_units)
    tot = np.bincount(data.unit_index[pos], weights=data.y_log[pos], minlength=data.n_units)
    has = cnt > 0
    means = np.where(has, tot / np.maximum(cnt, 1), np.nan)
    pts = means[has]
    fill = float(np.mean(pts)) if pts.size else 0.0
    means[~has] = fill

    # k-means++ seeding, then Lloyd iterations
    centers = [pts[rng.integers(pts.size)]] if pts.size else [fill]
    while len(centers) < G:
        d2 = np.min((pts[:, None] - np.array(centers)[None, :]) ** 2, axis=1) if pts.size else None
        if d2 is None or d2.sum() <= 0:
            centers.append(centers[-1] + rng.normal(scale=0.1))
        else:
            centers.append(pts[rng.choice(pts.size, p=d2 / d2.sum())])
    centers = np.sort(np.array(centers, dtype=float))
    for _ in range(50):
        lab = np.argmin(np.abs(means[:, None] - centers[None, :]), axis=1)
        new = np.array([means[lab == k].mean() if np.any(lab == k) else centers[k]
                        for k in range(G)])
        if np.allclose(new, centers):
            break
        centers = new
    lab = np.argmin(np.abs(means[:, None] - centers[None, :]), axis=1)

    row_lab = lab[data.unit_index]
    b1 = np.empty(G)
    b0 = np.empty(G)
    for k in range(G):
        yk = data.y_log[pos & (row_lab == k)]
        b1[k] = np.quantile(yk, cfg.tau) if yk.size else centers[k]
        zk = data.d[row_lab == k]
        rate = np.clip(zk.mean() if zk.size else data.d.mean(), 0.01, 0.99)
        b0[k] = np.log(rate / (1.0 - rate))
    y_pos = data.y_log[pos]
    sigma = float(np.mean(check_loss(y_pos - b1[row_lab[pos]], cfg.tau))) if y_pos.size else 1.0
    params = MixtureParams(np.zeros(data.S.shape[1]), np.zeros(data.X.shape[1]),
                           max(sigma, SIGMA_FLOOR), b0, b1, np.full(G, 1.0 / G))
    return params.canonical()


def weighted_check_loss(state: PosteriorState, data: PreparedData, cfg: QuantileConfig,
                        beta, b1) -> float:
    """Posterior-weighted check loss of the positive part at ``(beta, b1)``."""
    X, y, units = _positive_rows(data)
    resid = y[:, None] - (X @ beta)[:, None] - np.asarray(b1)[None, :]
    return float(np.sum(state.w[units] * check_loss(resid, cfg.tau)))


def piecewise_linear_argmin(r, a, w, tau, t_max=1e6):
    """Exact minimizer over ``t >= 0`` of ``sum_j w_j rho_{tau_j}(r_j - t a_j)``.

    The objective is convex and piecewise linear in ``t`` with breakpoints
    ``r_j / a_j``; its right slope rises by ``w_j |a_j|`` at each one.
    ``tau`` may be a scalar or per-term array.
    """
    r, a, w = (np.asarray(v, dtype=float).ravel() for v in (r, a, w))
    tau = np.broadcast_to(np.asarray(tau, dtype=float), r.shape).ravel()
    keep = (a != 0) & (w > 0)
    r, a, w, tau = r[keep], a[keep], w[keep], tau[keep]
    if r.size == 0:
        return 0.0
    jump = w * np.abs(a)
    slope = -np.sum(np.where(a > 0, tau, 1.0 - tau) * jump)
    bp = r / a
    # right slope at t = 0
    slope += jump[bp <= 0].sum()
    if slope >= 0:
        return 0.0
    ahead = bp > 0
    order = np.argsort(bp[ahead], kind="stable")
    cum = slope + np.cumsum(jump[ahead][order])
    hit = np.flatnonzero(cum >= 0)
    if hit.size == 0:
        return float(t_max)
    return float(min(bp[ahead][order][hit[0]], t_max))


def _line_search(state, data, cfg, current, beta, b1, lam, diag):
    """Best step along the closed-form update direction.

    The step length minimizes the posterior-weighted check loss (plus the
    lasso term) exactly, which is the beta/b1 block of the expected
    complete-data log-likelihood over component labels. Every accepted step
    therefore raises the observed log-likelihood, with or without the
    residual floor, and a step can cross residual kinks that the plain
    reweighting only approaches geometrically.
    """
    X, y, units = _positive_rows(data)
    d_beta = beta - current.beta
    d_b1 = b1 - current.b1
    r = y[:, None] - (X @ current.beta)[:, None] - current.b1[None, :]
    a = (X @ d_beta)[:, None] + d_b1[None, :]
    W = state.w[units]
    rr, aa, ww, tt = [r.ravel()], [a.ravel()], [W.ravel()], [np.full(r.size, cfg.tau)]
    if lam:
        # lam * |beta_j + t d_j| = 2 lam sigma * rho_0.5(beta_j + t d_j) / sigma
        rr.append(current.beta)
        aa.append(-d_beta)
        ww.append(np.full(beta.size, 2.0 * lam * current.sigma))
        tt.append(np.full(beta.size, 0.5))
    t = piecewise_linear_argmin(np.concatenate(rr), np.concatenate(aa),
                                np.concatenate(ww), np.concatenate(tt))
    return t, current.beta + t * d_beta, current.b1 + t * d_b1


def _positive_cost(state, data, cfg, params, beta, b1, lam):
    """Negative beta/b1 block of the label-expected complete log-likelihood."""
    return weighted_check_loss(state, data, cfg, beta, b1) / params.sigma + _l1(lam, beta)


def _block_lp(state, data, cfg, min_weight):
    X, y, units = _positive_rows(data)
    W = state.w[units]
    obs, comp = np.nonzero(W > min_weight)
    wt = W[obs, comp]
    C = np.zeros((W.shape[1], obs.size))
    C[comp, np.arange(obs.size)] = 1.0
    bounds = np.column_stack([(cfg.tau - 1.0) * wt, cfg.tau * wt])
    return X[obs], y[obs], C, bounds


def zero_beta_threshold(state: PosteriorState, data: PreparedData, cfg: QuantileConfig,
                        min_weight=1e-12):
    """Smallest ``lam * sigma`` at which ``beta = 0`` solves the exact block.

    Returns ``(threshold, b1)`` with ``b1`` the optimal locations when beta
    is held at zero, or ``None`` if a solver call fails. ``beta = 0`` is
    optimal iff some optimal dual point ``a`` of the restricted problem has
    ``max_j |x_j' a| <= lam sigma``.
    """
    from scipy.optimize import linprog

    Xo, yo, C, bounds = _block_lp(state, data, cfg, min_weight)
    if yo.size == 0:
        return None
    G, p = C.shape[0], Xo.shape[1]
    res = linprog(-yo, A_eq=C, b_eq=np.zeros(G), bounds=bounds, method="highs")
    if res.status != 0:
        return None
    b1 = -res.eqlin.marginals
    if p == 0:
        return 0.0, b1
    # minimize s subject to |X'a| <= s over the optimal face of the dual
    n = yo.size
    slack = 1e-9 * max(1.0, abs(res.fun))
    A_ub = np.vstack([np.column_stack([Xo.T, -np.ones(p)]),
                      np.column_stack([-Xo.T, -np.ones(p)]),
                      np.append(-yo, 0.0)[None, :]])
    b_ub = np.concatenate([np.zeros(2 * p), [res.fun + slack]])
    c = np.zeros(n + 1)
    c[-1] = 1.0
    res2 = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=np.column_stack([C, np.zeros(G)]),
                   b_eq=np.zeros(G), bounds=np.vstack([bounds, [0.0, np.inf]]),
                   method="highs")
    if res2.status != 0:
        return None
    return float(res2.x[-1]), b1


def exact_positive_block(state: PosteriorState, data: PreparedData, cfg: QuantileConfig,
                         lam=0.0, sigma=1.0, min_weight=1e-12):
    """Exact maximizer of the beta/b1 block given the component weights.

    Solves the weighted (optionally lasso-penalized) linear quantile
    regression ``min sum_ik w_ik rho_tau(y - x'beta - b1_k) + lam sigma ||beta||_1``
    through its dual, a box-constrained linear program with one row per
    coefficient; the coefficients are the dual's constraint marginals.
    With a penalty, ``beta = 0`` is screened first and returned exactly when
    optimal. Returns ``None`` if the solver fails.
    """
    from scipy.optimize import linprog

    pen = lam * sigma
    p = data.X.shape[1]
    if pen > 0.0:
        screen = zero_beta_threshold(state, data, cfg, min_weight)
        if screen is None:
            return None
        if pen >= screen[0]:
            return np.zeros(p), screen[1]
    Xo, yo, C, bounds = _block_lp(state, data, cfg, min_weight)
    if yo.size == 0:
        return None
    G = C.shape[0]
    if pen > 0.0:
        res = linprog(-yo, A_ub=np.vstack([Xo.T, -Xo.T]), b_ub=np.full(2 * p, pen),
                      A_eq=C, b_eq=np.zeros(G), bounds=bounds, method="highs")
        if res.status != 0:
            return None
        m = res.ineqlin.marginals
        return m[p:] - m[:p], -res.eqlin.marginals
    res = linprog(-yo, A_eq=np.vstack([Xo.T, C]), b_eq=np.zeros(p + G),
                  bounds=bounds, method="highs")
    if res.status != 0:
        return None
    coef = -res.eqlin.marginals
    return coef[:p], coef[p:]


def _positive_update(state, data, cfg, params, step, lam, floor, diag, min_gain):
    """Closed-form direction with an exact line search; exact block solve on a stall.

    The GIG moments are built with the configured residual floor, then with a
    much finer one, which restores proportional shrinking of residuals pinned
    near zero. When neither direction gains ``min_gain`` the iterate sits at a
    vertex the reweighting cannot leave and the block is maximized exactly.
    Every accepted step raises the observed likelihood.
    """
    X, y, _ = _positive_rows(data)
    c0 = _positive_cost(state, data, cfg, params, params.beta, params.b1, lam)
    best = (0.0, params.beta.copy(), params.b1.copy())
    for i, f in enumerate((floor, floor * 1e-6)):
        if i:
            resid = y[:, None] - (X @ params.beta)[:, None] - params.b1[None, :]
            v_inv = gig_inverse_moment(resid, params.sigma, cfg, floor=f)
            st = PosteriorState(state.w, np.reshape(v_inv, resid.shape), state.loglik)
        else:
            st = state
        beta, b1 = step(st, data, cfg, params, diagnostics=diag)
        t, beta, b1 = _line_search(st, data, cfg, params, beta, b1, lam, diag)
        if t == 0.0:
            continue
        gain = c0 - _positive_cost(state, data, cfg, params, beta, b1, lam)
        if gain > best[0]:
            best = (gain, beta, b1)
        if gain >= min_gain:
            return beta, b1
    exact = exact_positive_block(state, data, cfg, lam, params.sigma)
    if exact is not None:
        gain = c0 - _positive_cost(state, data, cfg, params, *exact, lam)
        if gain > best[0]:
            if "exact positive-block solve used at a stall" not in diag:
                diag.append("exact positive-block solve used at a stall")
            best = (gain, *exact)
    return best[1], best[2]


def _l1(lam, beta):
    # an infinite penalty is allowed and pins beta at zero
    norm = float(np.sum(np.abs(beta)))
    return lam * norm if lam and norm else 0.0


def _penalty(params, lam):
    return _l1(lam, params.beta)


def run_em(data: PreparedData, cfg: QuantileConfig, init: MixtureParams, opts: FitOptions,
           positive_step: Optional[PositiveStep] = None, lam: float = 0.0,
           on_state=None):
    """One EM run from ``init``.

    Returns ``(params, loglik_trace, objective_trace, n_iterations, converged,
    diagnostics)``. ``positive_step`` replaces the closed-form beta/b1 update;
    the objective is ``loglik - lam * ||beta||_1``.
    """
    step = positive_step or m_step_positive
    params = init.canonical().copy()
    trace, objective, diagnostics = [], [], []
    converged = False
    n_iter = 0
    target = opts.residual_floor
    floor = max(target, opts.floor_start * params.sigma) if opts.floor_start else target
    state = e_step(params, data, cfg, floor)
    while True:
        trace.append(state.loglik)
        objective.append(state.loglik - _penalty(params, lam))
        if len(objective) > 1 and abs(objective[-1] - objective[-2]) < opts.tol:
            if floor <= target:
                converged = True
                break
            floor = max(target, floor * opts.floor_decay)
            state = e_step(params, data, cfg, floor)
        if n_iter >= opts.max_iter:
            break
        if on_state is not None:
            on_state(state, params)
        diag = []
        if opts.line_search:
            beta, b1 = _positive_update(state, data, cfg, params, step, lam, floor, diag,
                                            opts.tol)
        else:
            beta, b1 = step(state, data, cfg, params, diagnostics=diag)
        sigma, pi = m_step_scale_and_masses(state, data, cfg, beta, b1, diagnostics=diag)
        inter = replace(params, beta=beta, b1=b1, sigma=sigma, pi=pi)
        gamma, b0 = m_step_binary(state, data, inter, opts.irls_max_iter, opts.irls_tol,
                                  diagnostics=diag)
        params = replace(inter, gamma=gamma, b0=b0)
        n_iter += 1
        for msg in diag:
            if msg not in diagnostics:
                diagnostics.append(msg)
        if params.G > 1 and np.min(params.pi) < MIN_MASS:
            raise DegenerateComponent(
                f"component mass {np.min(params.pi):.2e} below {MIN_MASS} "
                f"at iteration {n_iter}")
        state = e_step(params, data, cfg, floor)
    return params, trace, objective, n_iter, converged, diagnostics


def multi_start(data: PreparedData, cfg: QuantileConfig, G: int, opts: FitOptions,
                positive_step=None, lam=0.0, count_zero_beta=True, on_state=None) -> FitResult:
    if G < 1:
        raise ValueError("G must be at least 1")
    if data.n_obs == 0:
        raise ValueError("data is empty")
    if data.n_pos == 0:
        raise ValueError("no positive observations")
    streams = np.random.SeedSequence(opts.seed).spawn(max(opts.n_starts, 1))
    runs, traces = [], []
    n_starts = 1 if opts.init is not None else opts.n_starts
    for s in range(n_starts):
        rng = np.random.default_rng(streams[s])
        for attempt in range(opts.max_restarts + 1):
            if opts.init is not None and attempt == 0:
                init = opts.init
                if init.G != G:
                    raise ValueError("warm start has the wrong number of components")
            else:
                init = initial_params(data, cfg, G, rng)
            try:
                out = run_em(data, cfg, init, opts, positive_step, lam, on_state)
            except DegenerateComponent as exc:
                log.debug("start %d attempt %d degenerate: %s", s, attempt, exc)
                traces.append([])
                continue
            runs.append((s, attempt, out))
            traces.append(out[1])
            break
        else:
            log.info("start %d degenerated %d times; consider a smaller G", s,
                     opts.max_restarts + 1)

    good = [r for r in runs if r[2][4]]
    if not good:
        raise FitError(f"no EM start converged (G={G}, tau={cfg.tau})", traces)
    best = good[0]
    for r in good[1:]:
        if r[2][2][-1] > best[2][2][-1]:
            best = r
    s, attempt, (params, trace, objective, n_iter, converged, diagnostics) = best
    params = params.canonical()
    nu = n_free_parameters(params, count_zero_beta)
    aic, bic = information_criteria(trace[-1], nu, data.n_units)
    degenerate = len(traces) - len(runs)
    diagnostics = list(diagnostics)
    if degenerate:
        diagnostics.append(f"{degenerate} run(s) aborted for degenerate components")
    return FitResult(
        params=params, loglik_trace=list(trace), n_iterations=n_iter, converged=converged,
        n_parameters=nu, aic=float(aic), bic=float(bic), tau=cfg.tau, n_units=data.n_units,
        lambda_=float(lam), objective_trace=list(objective), diagnostics=diagnostics,
        starts=[{"start": r[0], "attempt": r[1], "loglik": r[2][1][-1],
                 "n_iterations": r[2][3], "converged": r[2][4]} for r in runs])


def fit(data: PreparedData, cfg: QuantileConfig, G: int, options: Optional[FitOptions] = None,
        **kw) -> FitResult:
    """Multi-start EM; returns the best converged run.

    Keyword arguments override fields of ``options``.
    """
    opts = replace(options or FitOptions(), **kw)
    return multi_start(data, cfg, G, opts)
