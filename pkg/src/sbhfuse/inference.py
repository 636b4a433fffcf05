"""Empirical-Bayes fitting via nested optimization with a Laplace approximation.

The negative log posterior f(theta, beta) couples the Bernoulli (dated
child-year) and Poisson (summary-cell) likelihoods with Gaussian random
effect priors and hyperpriors.  The inner problem finds the random-effect
mode theta_hat(beta) by Newton iteration; the outer problem minimizes the
Laplace-approximate marginal -log L*(beta) over fixed effects and
log-precisions.  Derivatives are automatic (exact), in the spirit of the
template-based tools this model class is usually fit with.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg
import scipy.optimize

import jax
import jax.numpy as jnp
from jax.scipy.special import gammaln

from . import likelihoods, priors
from .data_model import BirthHistoryPanel, RegionGraph, tabulate_sbh
from .hazards import (MIN_MOTHER_AGE, FertilitySchedule, HazardModelSpec,
                      HazardParams, MortalitySchedule, TimeWindow,
                      birth_shares)
from .priors import HyperPrior

jax.config.update("jax_enable_x64", True)

log = logging.getLogger(__name__)

STRATEGIES = ("fbh_only", "fbh_sbh_true_births", "fbh_sbh_true_shares",
              "fbh_sbh_estimated_shares")

DEFAULT_TOL_INNER = 1e-8
DEFAULT_TOL_OUTER = 1e-6
DEFAULT_MAX_INNER = 100
DEFAULT_MAX_OUTER = 200
LOG2PI = math.log(2.0 * math.pi)


class InferenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# generic nested engine

class NestedObjective:
    """Twice-differentiable objective f(theta, beta) with cached derivatives."""

    def __init__(self, value, grad_theta, hess_theta, grad_beta=None,
                 cross=None, dim_theta=None, dim_beta=None):
        self.value = value
        self.grad_theta = grad_theta
        self.hess_theta = hess_theta
        self.grad_beta = grad_beta
        self.cross = cross
        self.dim_theta = dim_theta
        self.dim_beta = dim_beta

    @classmethod
    def from_function(cls, f, dim_theta=None, dim_beta=None):
        """Wrap a plain jax-traceable scalar function of (theta, beta)."""
        return cls(
            value=jax.jit(f),
            grad_theta=jax.jit(jax.grad(f, argnums=0)),
            hess_theta=jax.jit(jax.hessian(f, argnums=0)),
            grad_beta=jax.jit(jax.grad(f, argnums=1)),
            cross=jax.jit(jax.jacfwd(jax.grad(f, argnums=0), argnums=1)),
            dim_theta=dim_theta,
            dim_beta=dim_beta,
        )


def inner_optimize(obj: NestedObjective, beta, theta0, *,
                   tol=DEFAULT_TOL_INNER, max_iter=DEFAULT_MAX_INNER):
    """Newton solve for theta_hat(beta); returns (theta_hat, H, f_value).

    H is the Hessian of f in theta at the mode; the Laplace step requires it
    to be positive definite there.
    """
    theta = np.asarray(theta0, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if theta.size == 0:
        return theta, np.zeros((0, 0)), float(obj.value(theta, beta))
    fval = float(obj.value(theta, beta))
    trace = []
    for it in range(max_iter):
        g = np.asarray(obj.grad_theta(theta, beta))
        gnorm = np.linalg.norm(g)
        trace.append((it, fval, gnorm))
        if not np.isfinite(fval) or not np.all(np.isfinite(g)):
            raise InferenceError(
                f"non-finite inner objective at iteration {it}: f={fval}")
        if gnorm <= tol * (1.0 + abs(fval)):
            break
        H = np.asarray(obj.hess_theta(theta, beta))
        step = _damped_newton_step(H, g)
        alpha = 1.0
        for _ in range(40):
            cand = theta + alpha * step
            fcand = float(obj.value(cand, beta))
            if np.isfinite(fcand) and fcand <= fval + 1e-4 * alpha * (g @ step):
                stalled = fval - fcand <= 1e-13 * (1.0 + abs(fval))
                theta, fval = cand, fcand
                break
            alpha *= 0.5
        else:
            break  # no decrease along the Newton direction; accept the mode
        if stalled:
            break  # progress below float precision; the mode is as good as it gets
    else:
        raise InferenceError(
            "inner optimization did not converge; trace (iter, f, |g|): "
            + "; ".join(f"({i}, {f:.6g}, {gn:.3g})" for i, f, gn in trace[-5:]))
    H = np.asarray(obj.hess_theta(theta, beta))
    return theta, H, fval


def _damped_newton_step(H, g):
    lam = 0.0
    eye = np.eye(H.shape[0])
    for _ in range(12):
        try:
            c, low = scipy.linalg.cho_factor(H + lam * eye)
            return -scipy.linalg.cho_solve((c, low), g)
        except np.linalg.LinAlgError:
            lam = 10.0 * lam if lam else 1e-6 * max(1.0, np.trace(H) / len(g))
    raise InferenceError("could not stabilize the inner Newton step")


def laplace_neg_log_marginal(obj: NestedObjective, beta, theta0, *,
                             tol=DEFAULT_TOL_INNER):
    """-log L*(beta) = f(theta_hat) + 0.5 log det H - (d/2) log 2 pi.

    The 2 pi factor makes the approximation exact, not just proportional,
    when the inner problem is Gaussian.
    """
    theta_hat, H, fval = inner_optimize(obj, beta, theta0, tol=tol)
    if theta_hat.size == 0:
        return fval, theta_hat, H
    sign, logdet = np.linalg.slogdet(H)
    if sign <= 0:
        raise InferenceError("inner Hessian is not positive definite at the "
                             "mode")
    value = fval + 0.5 * logdet - 0.5 * theta_hat.size * LOG2PI
    return value, theta_hat, H


@dataclass
class OuterResult:
    beta_hat: np.ndarray
    theta_hat: np.ndarray
    neg_log_marginal: float
    hessian: np.ndarray  # outer curvature in beta
    n_evals: int


def outer_optimize(obj: NestedObjective, beta0, theta0, *,
                   tol_outer=DEFAULT_TOL_OUTER, tol_inner=DEFAULT_TOL_INNER,
                   max_iter=DEFAULT_MAX_OUTER, fd_step=1e-5):
    """Quasi-Newton minimization of -log L*(beta).

    Inner solves are warm started from the last mode, so each finite
    difference gradient costs 2 * dim(beta) cheap Newton solves.
    """
    beta0 = np.asarray(beta0, dtype=float)
    cache = {"theta": np.asarray(theta0, dtype=float), "n": 0, "best": None}

    def value(beta):
        v, theta_hat, _ = laplace_neg_log_marginal(obj, beta, cache["theta"],
                                                   tol=tol_inner)
        cache["theta"] = theta_hat
        cache["n"] += 1
        if cache["best"] is None or v < cache["best"][0]:
            cache["best"] = (v, np.array(beta, copy=True), theta_hat.copy())
        return v

    def grad(beta):
        g = np.empty_like(beta)
        for i in range(beta.size):
            h = fd_step * max(1.0, abs(beta[i]))
            ei = np.zeros_like(beta)
            ei[i] = h
            g[i] = (value(beta + ei) - value(beta - ei)) / (2.0 * h)
        return g

    f0 = value(beta0)
    res = scipy.optimize.minimize(
        value, beta0, jac=grad, method="L-BFGS-B",
        options={"maxiter": max_iter, "ftol": 1e-12,
                 "gtol": tol_outer * max(1.0, abs(f0))})
    if not res.success and res.status != 1:  # status 1 is maxiter
        best = cache["best"]
        raise InferenceError(
            f"outer optimization failed: {res.message}; best f={best[0]:.6g} "
            f"at beta={np.array2string(best[1], precision=4)}")
    beta_hat = np.asarray(res.x, dtype=float)
    vhat, theta_hat, _ = laplace_neg_log_marginal(obj, beta_hat,
                                                  cache["theta"],
                                                  tol=tol_inner)
    H = _fd_hessian(value, beta_hat)
    return OuterResult(beta_hat, theta_hat, vhat, H, cache["n"])


def _fd_hessian(fun, x, step=1e-4):
    d = x.size
    H = np.empty((d, d))
    hs = [step * max(1.0, abs(x[i])) for i in range(d)]
    f0 = fun(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = hs[i]
        H[i, i] = (fun(x + ei) - 2.0 * f0 + fun(x - ei)) / hs[i] ** 2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = hs[j]
            H[i, j] = H[j, i] = (fun(x + ei + ej) - fun(x + ei - ej)
                                 - fun(x - ei + ej) + fun(x - ei - ej)) \
                / (4.0 * hs[i] * hs[j])
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# parameter layout

@dataclass(frozen=True)
class ParameterLayout:
    """Slices of the outer (beta) and inner (theta) vectors by term name.

    beta holds fixed effects followed by log-precisions; theta holds the
    random effects (time curves, spatial, iid) in a fixed order.
    """

    beta_names: tuple
    beta_slices: dict
    theta_names: tuple
    theta_slices: dict
    dim_beta: int
    dim_theta: int
    n_rw2_classes: int
    n_periods: int
    n_regions: int
    iid: str | None

    @classmethod
    def for_spec(cls, spec: HazardModelSpec, window: TimeWindow,
                 n_regions: int) -> "ParameterLayout":
        beta_names, beta_slices = [], {}
        pos = 0

        def add_beta(name, size):
            nonlocal pos
            beta_names.append(name)
            beta_slices[name] = slice(pos, pos + size)
            pos += size

        add_beta("intercepts", spec.n_intercepts)
        if spec.urban_effect:
            add_beta("beta_urb", 1)
        if spec.sbh_bias:
            add_beta("beta_sbh", 1)
            add_beta("beta_sbh_urb", 1)
        if spec.rw2_classes is not None:
            add_beta("log_kappa_T", 1)
        if spec.spatial:
            add_beta("log_kappa_S", 1)
        if spec.iid is not None:
            add_beta("log_kappa_eps", 1)
        dim_beta = pos

        theta_names, theta_slices = [], {}
        pos = 0

        def add_theta(name, size):
            nonlocal pos
            theta_names.append(name)
            theta_slices[name] = slice(pos, pos + size)
            pos += size

        P = window.n_periods
        if spec.rw2_classes is not None:
            add_theta("phi", spec.n_rw2_classes * P)
        if spec.spatial:
            add_theta("S", n_regions)
        if spec.iid == "region":
            add_theta("eps", n_regions)
        elif spec.iid == "region_period":
            add_theta("eps", n_regions * P)
        return cls(tuple(beta_names), beta_slices, tuple(theta_names),
                   theta_slices, dim_beta, pos, spec.n_rw2_classes, P,
                   n_regions, spec.iid)

    @property
    def n_fixed_effects(self) -> int:
        n = 0
        for name in self.beta_names:
            if name.startswith("log_kappa"):
                break
            n = self.beta_slices[name].stop
        return n

    def unpack(self, beta, theta) -> HazardParams:
        beta = np.asarray(beta)
        theta = np.asarray(theta)

        def b(name):
            if name not in self.beta_slices:
                return 0.0
            return float(beta[self.beta_slices[name]][0])

        phi = S = eps = None
        if "phi" in self.theta_slices:
            phi = theta[self.theta_slices["phi"]].reshape(
                self.n_rw2_classes, self.n_periods)
        if "S" in self.theta_slices:
            S = theta[self.theta_slices["S"]]
        if "eps" in self.theta_slices:
            eps = theta[self.theta_slices["eps"]]
            if self.iid == "region_period":
                eps = eps.reshape(self.n_regions, self.n_periods)
        return HazardParams(
            intercepts=beta[self.beta_slices["intercepts"]],
            beta_urb=b("beta_urb"), beta_sbh=b("beta_sbh"),
            beta_sbh_urb=b("beta_sbh_urb"), phi=phi, S=S, eps=eps)

    def pack(self, params: HazardParams, log_kappas: dict | None = None):
        """Inverse of unpack: (beta, theta) from parameter pieces."""
        beta = np.zeros(self.dim_beta)
        beta[self.beta_slices["intercepts"]] = params.intercepts
        for name, val in (("beta_urb", params.beta_urb),
                          ("beta_sbh", params.beta_sbh),
                          ("beta_sbh_urb", params.beta_sbh_urb)):
            if name in self.beta_slices:
                beta[self.beta_slices[name]] = val
        for name, val in (log_kappas or {}).items():
            if name not in self.beta_slices:
                raise InferenceError(f"no {name} in this model")
            beta[self.beta_slices[name]] = val
        theta = np.zeros(self.dim_theta)
        if "phi" in self.theta_slices and params.phi is not None:
            theta[self.theta_slices["phi"]] = np.ravel(params.phi)
        if "S" in self.theta_slices and params.S is not None:
            theta[self.theta_slices["S"]] = params.S
        if "eps" in self.theta_slices and params.eps is not None:
            theta[self.theta_slices["eps"]] = np.ravel(params.eps)
        return beta, theta


# ---------------------------------------------------------------------------
# data preparation

@dataclass(frozen=True)
class BernoulliRows:
    """Aggregated Bernoulli trials: k events out of n at shared predictors."""

    ic: np.ndarray
    rc: np.ndarray
    p: np.ndarray
    r: np.ndarray
    urb: np.ndarray
    n: np.ndarray
    k: np.ndarray
    offset: np.ndarray  # log odds offset per row (HIV), zeros if none


def _pad(arr, size, fill=0):
    out = np.full(size, fill, dtype=arr.dtype)
    out[:len(arr)] = arr
    return out


def _round_up(n, mult):
    return max(mult, ((n + mult - 1) // mult) * mult)


def mortality_rows(panel: BirthHistoryPanel, spec: HazardModelSpec,
                   window: TimeWindow, region_index: dict) -> BernoulliRows:
    """Aggregate FBH child-years by (age group, period, region, stratum)."""
    acc: dict = {}
    n_groups = spec.n_age_groups
    survey_year_of = lambda sid: panel.surveys[sid].survey_year
    for w, c, a, year, died in likelihoods.child_life_years(panel,
                                                            survey_year_of):
        if not window.contains(year):
            continue
        g = min(a, n_groups - 1)
        key = (g, window.period_of_year(year), region_index[w.region],
               1 if w.stratum == "urban" else 0)
        cell = acc.setdefault(key, [0, 0])
        cell[0] += 1
        cell[1] += int(died)
    return _rows_from_acc(acc, spec)


def fertility_rows(panel: BirthHistoryPanel, spec: HazardModelSpec,
                   window: TimeWindow, region_index: dict) -> BernoulliRows:
    """Aggregate FBH woman-years by (mother age group, period, region, stratum).

    Each woman contributes one trial per age from the fertility minimum to
    the year before the survey; a year with several births contributes one
    success indicator per birth.
    """
    acc: dict = {}
    n_groups = spec.n_age_groups
    for w in panel.women:
        if w.source_kind != "FBH":
            continue
        t_s = panel.surveys[w.survey_id].survey_year
        births_by_year: dict = {}
        for c in panel.children_of(w.woman_id):
            births_by_year[c.birth_year] = births_by_year.get(c.birth_year,
                                                              0) + 1
        for m in range(MIN_MOTHER_AGE, w.age_at_survey):
            year = t_s - (w.age_at_survey - m)
            if not window.contains(year):
                continue
            g = min(m - MIN_MOTHER_AGE, n_groups - 1)
            key = (g, window.period_of_year(year), region_index[w.region],
                   1 if w.stratum == "urban" else 0)
            cell = acc.setdefault(key, [0, 0])
            births = births_by_year.get(year, 0)
            cell[0] += max(1, births)
            cell[1] += births
    return _rows_from_acc(acc, spec)


def _rows_from_acc(acc, spec):
    keys = sorted(acc)
    g = np.array([k[0] for k in keys], dtype=np.int32)
    ic = np.array([spec.intercept_classes[gi] for gi in g], dtype=np.int32)
    if spec.rw2_classes is not None:
        rc = np.array([spec.rw2_classes[gi] for gi in g], dtype=np.int32)
    else:
        rc = np.zeros(len(keys), dtype=np.int32)
    p = np.array([k[1] for k in keys], dtype=np.int32)
    if spec.kind == "mortality" and spec.hiv is not None:
        offset = np.array([spec.log_hiv(pi) for pi in p])
    else:
        offset = np.zeros(len(keys))
    size = _round_up(len(keys), 256)
    return BernoulliRows(
        ic=_pad(ic, size), rc=_pad(rc, size), p=_pad(p, size),
        r=_pad(np.array([k[2] for k in keys], dtype=np.int32), size),
        urb=_pad(np.array([k[3] for k in keys], dtype=np.int32), size),
        n=_pad(np.array([acc[k][0] for k in keys], dtype=float), size),
        k=_pad(np.array([acc[k][1] for k in keys], dtype=float), size),
        offset=_pad(offset, size))


@dataclass(frozen=True)
class SbhArrays:
    """Flattened summary cells plus the q* count matrix.

    log(1 - q*) for a cohort is a fixed integer combination of the
    [age group, period] log-survival table, so each unique
    (birth year, age, region, stratum) combination carries a count vector
    over that table instead of a per-year survival chain.
    """

    cell_td: np.ndarray
    cell_valid: np.ndarray
    row_cell: np.ndarray
    row_w: np.ndarray
    row_q: np.ndarray    # index into the unique-combination axis
    uq_cnt: np.ndarray   # [K, G * P] counts of (age group, period) exposures
    uq_r: np.ndarray     # [K]
    uq_u: np.ndarray     # [K]
    n_cells: int


def sbh_cell_weights(cells, survey_year_of, region_index, *,
                     fertility: FertilitySchedule | None = None,
                     true_births: dict | None = None,
                     include_survey_year: bool = False):
    """Per-cell birth-time weight vectors (expected or true births per age).

    With ``true_births`` the weights are looked up by
    (survey_id, region, stratum, age_at_survey); otherwise they are
    T_B times the fertility-derived shares.  Cells without births drop out.
    """
    out = []
    for cell in cells:
        if cell.total_born == 0:
            continue
        m_s = cell.age_at_survey
        if true_births is not None:
            key = (cell.survey_id, cell.region, cell.stratum, m_s)
            if key not in true_births:
                raise InferenceError(f"no true birth counts for cell {key}")
            w = np.asarray(true_births[key], dtype=float)
            if len(w) != m_s + 1:
                raise InferenceError(f"birth counts for cell {key} must have "
                                     f"length {m_s + 1}")
        else:
            if fertility is None:
                raise InferenceError("need a fertility schedule or true birth "
                                     "counts")
            r = region_index[cell.region]
            s = 1 if cell.stratum == "urban" else 0
            shares = birth_shares(fertility, m_s,
                                  survey_year_of(cell.survey_id), r, s,
                                  include_survey_year=include_survey_year)
            w = cell.total_born * shares
        out.append((cell, w))
    return out


def sbh_arrays(cell_weights, survey_year_of, region_index,
               spec: HazardModelSpec, window: TimeWindow) -> SbhArrays:
    G = spec.n_age_groups
    P = window.n_periods
    rows = []
    cell_td = []
    uq: dict = {}
    uq_cnt, uq_r, uq_u = [], [], []
    for ci, (cell, w) in enumerate(cell_weights):
        t_s = survey_year_of(cell.survey_id)
        if t_s - 1 > window.end_year:
            raise InferenceError(
                f"survey year {t_s} needs hazards for {t_s - 1}, outside the "
                f"window ending {window.end_year}")
        r = region_index[cell.region]
        u = 1 if cell.stratum == "urban" else 0
        cell_td.append(float(cell.total_died))
        for a in range(1, len(w)):
            if w[a] == 0.0:
                continue
            year = t_s - a
            if not window.contains(year):
                raise InferenceError(
                    f"cell {cell.survey_id}/{cell.region}/"
                    f"m_s={cell.age_at_survey} needs birth year {year} "
                    f"outside the window")
            key = (year, a, r, u)
            qi = uq.get(key)
            if qi is None:
                qi = uq[key] = len(uq)
                cnt = np.zeros(G * P)
                for i in range(a):
                    g = min(i, G - 1)
                    p = window.period_of_year(year + i)
                    cnt[g * P + p] += 1.0
                uq_cnt.append(cnt)
                uq_r.append(r)
                uq_u.append(u)
            rows.append((ci, w[a], qi))

    n_cells = len(cell_td)
    cell_size = _round_up(max(n_cells, 1), 64)
    row_size = _round_up(max(len(rows), 1), 512)
    q_size = _round_up(max(len(uq), 1), 64)
    rows_arr = np.array(rows, dtype=float) if rows else np.zeros((0, 3))
    cnt_arr = np.zeros((q_size, G * P))
    if uq_cnt:
        cnt_arr[:len(uq_cnt)] = np.vstack(uq_cnt)

    return SbhArrays(
        cell_td=_pad(np.asarray(cell_td), cell_size),
        cell_valid=_pad(np.ones(n_cells), cell_size),
        row_cell=_pad(rows_arr[:, 0].astype(np.int32), row_size),
        row_w=_pad(rows_arr[:, 1], row_size),
        row_q=_pad(rows_arr[:, 2].astype(np.int32), row_size),
        uq_cnt=cnt_arr,
        uq_r=_pad(np.asarray(uq_r, dtype=np.int32), q_size),
        uq_u=_pad(np.asarray(uq_u, dtype=np.int32), q_size),
        n_cells=cell_size)


# ---------------------------------------------------------------------------
# the negative log posterior (jax)

class StaticInfo(NamedTuple):
    """Hashable model structure: everything the jax trace shape-depends on."""

    n_intercepts: int
    n_rw2: int
    n_periods: int
    n_regions: int
    iid: str | None
    urban_effect: bool
    sbh_bias: bool
    has_sbh: bool
    rank_T: int
    rank_S: int   # -1 when there is no spatial term
    kappa_prior_T: tuple | None
    kappa_prior_S: tuple | None
    kappa_prior_eps: tuple | None
    constraint_weight: float
    group_ic: tuple
    group_rc: tuple


def _slices(info: StaticInfo):
    bsl = {"intercepts": slice(0, info.n_intercepts)}
    pos = info.n_intercepts
    flags = (("beta_urb", info.urban_effect),
             ("beta_sbh", info.sbh_bias),
             ("beta_sbh_urb", info.sbh_bias),
             ("log_kappa_T", info.n_rw2 > 0),
             ("log_kappa_S", info.rank_S >= 0),
             ("log_kappa_eps", info.iid is not None))
    for name, present in flags:
        if present:
            bsl[name] = slice(pos, pos + 1)
            pos += 1
    tsl = {}
    tpos = 0
    if info.n_rw2 > 0:
        tsl["phi"] = slice(tpos, tpos + info.n_rw2 * info.n_periods)
        tpos += info.n_rw2 * info.n_periods
    if info.rank_S >= 0:
        tsl["S"] = slice(tpos, tpos + info.n_regions)
        tpos += info.n_regions
    if info.iid == "region":
        tsl["eps"] = slice(tpos, tpos + info.n_regions)
        tpos += info.n_regions
    elif info.iid == "region_period":
        tsl["eps"] = slice(tpos, tpos + info.n_regions * info.n_periods)
        tpos += info.n_regions * info.n_periods
    return bsl, tsl


def _neg_log_kappa_prior(prior, lk):
    """Negative log prior of a precision at log-precision lk, Jacobian included."""
    kind = prior[0]
    if kind == "pc":
        lam = -jnp.log(prior[2]) / prior[1]
        lp = jnp.log(lam / 2.0) - 1.5 * lk - lam * jnp.exp(-lk / 2.0)
    elif kind == "gamma":
        sh, sc = prior[1], prior[2]
        lp = ((sh - 1.0) * lk - jnp.exp(lk) / sc
              - gammaln(sh) - sh * jnp.log(sc))
    else:
        raise InferenceError(f"unsupported precision prior kind {kind!r}")
    return -(lp + lk)


def _neg_log_posterior_raw(theta, beta, data, info: StaticInfo):
    (b_ic, b_rc, b_p, b_r, b_urb, b_n, b_k, b_off,
     s_td, s_valid, s_cell, s_w, s_q, q_cnt, q_r, q_u, hiv_p,
     K_T, K_S, fe_mean, fe_sd) = data
    bsl, tsl = _slices(info)

    intercepts = beta[bsl["intercepts"]]
    beta_urb = beta[bsl["beta_urb"]][0] if "beta_urb" in bsl else 0.0
    beta_sbh = beta[bsl["beta_sbh"]][0] if "beta_sbh" in bsl else 0.0
    beta_sbh_urb = (beta[bsl["beta_sbh_urb"]][0] if "beta_sbh_urb" in bsl
                    else 0.0)

    P, R = info.n_periods, info.n_regions
    phi = (theta[tsl["phi"]].reshape(info.n_rw2, P) if "phi" in tsl else None)
    S = theta[tsl["S"]] if "S" in tsl else None
    if info.iid == "region_period":
        eps = theta[tsl["eps"]].reshape(R, P)
    elif info.iid == "region":
        eps = theta[tsl["eps"]]
    else:
        eps = None

    # Bernoulli block over aggregated trials
    eta = intercepts[b_ic] + b_off
    if phi is not None:
        eta = eta + phi[b_rc, b_p]
    if S is not None:
        eta = eta + S[b_r]
    if eps is not None:
        eta = eta + (eps[b_r, b_p] if info.iid == "region_period"
                     else eps[b_r])
    if info.urban_effect:
        eta = eta + beta_urb * b_urb
    nll = -jnp.sum(b_k * jax.nn.log_sigmoid(eta)
                   + (b_n - b_k) * jax.nn.log_sigmoid(-eta))

    # Poisson block over summary cells
    if info.has_sbh:
        G = len(info.group_ic)
        ic_g = jnp.asarray(info.group_ic)
        rc_g = jnp.asarray(info.group_rc)
        eta_g = jnp.zeros((G, P, R, 2)) + intercepts[ic_g][:, None, None, None]
        if phi is not None:
            eta_g = eta_g + phi[rc_g][:, :, None, None]
        if S is not None:
            eta_g = eta_g + S[None, None, :, None]
        if eps is not None:
            if info.iid == "region_period":
                eta_g = eta_g + eps.T[None, :, :, None]
            else:
                eta_g = eta_g + eps[None, None, :, None]
        if info.urban_effect:
            eta_g = eta_g.at[..., 1].add(beta_urb)
        if info.sbh_bias:
            eta_g = eta_g + beta_sbh
            eta_g = eta_g.at[..., 1].add(beta_sbh_urb)
        eta_g = eta_g + hiv_p[None, :, None, None]
        # q*(combo) via the count matrix over the log-survival table
        lm = jax.nn.log_sigmoid(-eta_g).reshape(G * P, R, 2)
        sel = lm[:, q_r, q_u].T                       # [K, G * P]
        qs = 1.0 - jnp.exp(jnp.sum(q_cnt * sel, axis=1))
        mu = jax.ops.segment_sum(s_w * qs[s_q], s_cell,
                                 num_segments=len(s_td))
        safe = jnp.maximum(mu, 1e-300)
        nll = nll + jnp.sum(s_valid * (mu - s_td * jnp.log(safe)
                                       + gammaln(s_td + 1.0)))

    # improper GMRF priors with the soft sum-to-zero penalty
    w = info.constraint_weight
    if phi is not None:
        lk = beta[bsl["log_kappa_T"]][0]
        kappa = jnp.exp(lk)
        for c in range(info.n_rw2):
            x = phi[c]
            nll = nll + 0.5 * kappa * x @ (K_T @ x) \
                - 0.5 * info.rank_T * (lk - LOG2PI) \
                + 0.5 * w * jnp.sum(x) ** 2
        nll = nll + _neg_log_kappa_prior(info.kappa_prior_T, lk)
    if S is not None:
        lk = beta[bsl["log_kappa_S"]][0]
        kappa = jnp.exp(lk)
        nll = nll + 0.5 * kappa * S @ (K_S @ S) \
            - 0.5 * info.rank_S * (lk - LOG2PI) \
            + 0.5 * w * jnp.sum(S) ** 2
        nll = nll + _neg_log_kappa_prior(info.kappa_prior_S, lk)
    if eps is not None:
        lk = beta[bsl["log_kappa_eps"]][0]
        kappa = jnp.exp(lk)
        nll = nll + 0.5 * kappa * jnp.sum(eps ** 2) \
            - 0.5 * eps.size * (lk - LOG2PI)
        nll = nll + _neg_log_kappa_prior(info.kappa_prior_eps, lk)

    # Normal priors on fixed effects
    fe = beta[:fe_mean.shape[0]]
    nll = nll + jnp.sum(0.5 * ((fe - fe_mean) / fe_sd) ** 2
                        + jnp.log(fe_sd) + 0.5 * LOG2PI)
    return nll


_nlp_value = jax.jit(_neg_log_posterior_raw, static_argnums=(3,))
_nlp_grad_theta = jax.jit(jax.grad(_neg_log_posterior_raw, argnums=0),
                          static_argnums=(3,))
_nlp_hess_theta = jax.jit(jax.hessian(_neg_log_posterior_raw, argnums=0),
                          static_argnums=(3,))
_nlp_grad_beta = jax.jit(jax.grad(_neg_log_posterior_raw, argnums=1),
                         static_argnums=(3,))
_nlp_cross = jax.jit(jax.jacfwd(jax.grad(_neg_log_posterior_raw, argnums=0),
                                argnums=1), static_argnums=(3,))


# ---------------------------------------------------------------------------
# model assembly

DEFAULT_KAPPA_PRIORS = {
    "kappa_T": HyperPrior(kind="pc", u=1.0, alpha=0.01),
    "kappa_S": HyperPrior(kind="pc", u=1.0, alpha=0.01),
    "kappa_eps": HyperPrior(kind="gamma", shape=1.0, scale=200.0),
}
DEFAULT_FE_SD = 10.0


def _kappa_prior_tuple(hp: HyperPrior):
    if hp.kind == "pc":
        return ("pc", float(hp.u), float(hp.alpha))
    if hp.kind == "gamma":
        return ("gamma", float(hp.shape), float(hp.scale))
    raise InferenceError(f"precision priors must be pc or gamma, got "
                         f"{hp.kind!r}")


@dataclass
class HazardModel:
    """A bound objective: spec + data arrays + layout, ready to optimize."""

    spec: HazardModelSpec
    window: TimeWindow
    regions: tuple
    layout: ParameterLayout
    objective: NestedObjective
    info: StaticInfo
    data: tuple


def build_hazard_model(spec: HazardModelSpec, window: TimeWindow,
                       graph: RegionGraph, bern: BernoulliRows,
                       sbh: SbhArrays | None = None) -> HazardModel:
    n_regions = len(graph.regions)
    layout = ParameterLayout.for_spec(spec, window, n_regions)

    P = window.n_periods
    if spec.rw2_classes is not None:
        st = priors.rw2_structure(P)
        K_T = st.K.toarray()
        rank_T = st.rank
    else:
        K_T, rank_T = np.zeros((1, 1)), 0
    if spec.spatial:
        st = priors.icar_structure(graph)
        K_S = st.K.toarray()
        rank_S = st.rank
    else:
        K_S, rank_S = np.zeros((1, 1)), -1

    def kp(name):
        return _kappa_prior_tuple(spec.priors.get(name,
                                                  DEFAULT_KAPPA_PRIORS[name]))

    info = StaticInfo(
        n_intercepts=spec.n_intercepts,
        n_rw2=spec.n_rw2_classes if spec.rw2_classes is not None else 0,
        n_periods=P, n_regions=n_regions, iid=spec.iid,
        urban_effect=spec.urban_effect, sbh_bias=spec.sbh_bias,
        has_sbh=sbh is not None, rank_T=rank_T, rank_S=rank_S,
        kappa_prior_T=kp("kappa_T") if spec.rw2_classes is not None else None,
        kappa_prior_S=kp("kappa_S") if spec.spatial else None,
        kappa_prior_eps=kp("kappa_eps") if spec.iid is not None else None,
        constraint_weight=priors.DEFAULT_CONSTRAINT_WEIGHT,
        group_ic=tuple(spec.intercept_classes),
        group_rc=tuple(spec.rw2_classes) if spec.rw2_classes is not None
        else tuple(0 for _ in spec.intercept_classes))

    n_fe = layout.n_fixed_effects
    fe_mean = np.zeros(n_fe)
    fe_sd = np.full(n_fe, DEFAULT_FE_SD)
    for name in ("intercepts", "beta_urb", "beta_sbh", "beta_sbh_urb"):
        hp = spec.priors.get(name)
        if hp is None:
            continue
        if hp.kind != "normal":
            raise InferenceError(f"fixed-effect prior {name} must be normal")
        sl = layout.beta_slices.get(name)
        if sl is not None:
            fe_mean[sl] = hp.mean
            fe_sd[sl] = hp.sd
    if sbh is None:
        # placeholder arrays keep the traced argument structure stable
        sbh = SbhArrays(
            cell_td=np.zeros(1), cell_valid=np.zeros(1),
            row_cell=np.zeros(1, dtype=np.int32), row_w=np.zeros(1),
            row_q=np.zeros(1, dtype=np.int32),
            uq_cnt=np.zeros((1, spec.n_age_groups * P)),
            uq_r=np.zeros(1, dtype=np.int32),
            uq_u=np.zeros(1, dtype=np.int32), n_cells=1)
    if spec.hiv is not None:
        hiv_p = np.log(np.asarray(spec.hiv, dtype=float))
    else:
        hiv_p = np.zeros(P)

    data = tuple(jnp.asarray(a) for a in (
        bern.ic, bern.rc, bern.p, bern.r, bern.urb, bern.n, bern.k,
        bern.offset,
        sbh.cell_td, sbh.cell_valid, sbh.row_cell, sbh.row_w, sbh.row_q,
        sbh.uq_cnt, sbh.uq_r, sbh.uq_u, hiv_p,
        K_T, K_S, fe_mean, fe_sd))

    def bind(fn):
        def wrapped(theta, beta):
            return fn(jnp.asarray(theta, dtype=jnp.float64),
                      jnp.asarray(beta, dtype=jnp.float64), data, info)
        return wrapped

    obj = NestedObjective(
        value=bind(_nlp_value), grad_theta=bind(_nlp_grad_theta),
        hess_theta=bind(_nlp_hess_theta), grad_beta=bind(_nlp_grad_beta),
        cross=bind(_nlp_cross), dim_theta=layout.dim_theta,
        dim_beta=layout.dim_beta)
    return HazardModel(spec, window, tuple(graph.regions), layout, obj, info,
                       data)


def neg_log_posterior(model: HazardModel, theta, beta) -> float:
    """The full joint negative log posterior at one parameter point."""
    return float(model.objective.value(theta, beta))


# ---------------------------------------------------------------------------
# fitting

@dataclass
class FitResult:
    spec: HazardModelSpec
    window: TimeWindow
    regions: tuple
    layout: ParameterLayout
    strategy: str
    beta_hat: np.ndarray
    theta_hat: np.ndarray
    cov_beta: np.ndarray
    joint_mean: np.ndarray   # [beta, theta]
    joint_cov: np.ndarray
    neg_log_marginal: float
    seed: int
    n_outer_evals: int
    hyper_intervals: dict
    draws: np.ndarray | None = None
    q5_summary: dict | None = None

    def params(self) -> HazardParams:
        return self.layout.unpack(self.beta_hat, self.theta_hat)

    def mortality_schedule(self) -> MortalitySchedule:
        return MortalitySchedule.from_params(self.spec, self.params(),
                                             self.window, len(self.regions))

    def fertility_schedule(self) -> FertilitySchedule:
        return FertilitySchedule.from_params(self.spec, self.params(),
                                             self.window, len(self.regions))

    def split_draws(self):
        """(beta draws, theta draws) from the joint draw matrix."""
        if self.draws is None:
            raise InferenceError("no draws stored; call draw_posterior")
        d = self.layout.dim_beta
        return self.draws[:, :d], self.draws[:, d:]


def joint_gaussian(model: HazardModel, beta_hat, theta_hat, H_inner, H_outer):
    """Joint Gaussian over (beta, theta) from the two curvatures.

    Combines the outer covariance with the conditional inner covariance and
    the sensitivity d theta_hat / d beta, the standard delta-method assembly
    for Laplace-based fits.
    """
    db = len(beta_hat)
    dt = len(theta_hat)
    cov_beta = _safe_inverse(H_outer, "outer Hessian")
    mean = np.concatenate([beta_hat, theta_hat])
    cov = np.zeros((db + dt, db + dt))
    cov[:db, :db] = cov_beta
    if dt:
        C = np.asarray(model.objective.cross(theta_hat, beta_hat))
        Hinv = _safe_inverse(H_inner, "inner Hessian")
        J = -Hinv @ C
        cov[db:, :db] = J @ cov_beta
        cov[:db, db:] = cov[db:, :db].T
        cov[db:, db:] = Hinv + J @ cov_beta @ J.T
    return mean, 0.5 * (cov + cov.T), cov_beta


def _safe_inverse(H, what):
    H = np.asarray(H)
    if H.size == 0:
        return H.reshape(0, 0)
    try:
        c, low = scipy.linalg.cho_factor(H)
        return scipy.linalg.cho_solve((c, low), np.eye(H.shape[0]))
    except np.linalg.LinAlgError:
        log.warning("%s not positive definite, using pseudo-inverse", what)
        return np.linalg.pinv(H)


def draw_posterior(fit: FitResult, n_draws: int = 1000,
                   seed: int | None = None) -> np.ndarray:
    """Draw from the joint Gaussian; deterministic for a given seed."""
    if seed is None:
        seed = fit.seed
    rng = np.random.default_rng(seed)
    cov = fit.joint_cov
    jitter = 0.0
    for _ in range(8):
        try:
            L = np.linalg.cholesky(cov + jitter * np.eye(len(cov)))
            break
        except np.linalg.LinAlgError:
            jitter = 10.0 * jitter if jitter else 1e-10
    else:
        raise InferenceError("joint covariance is not positive semidefinite")
    if jitter:
        log.warning("added %.1e jitter to the joint covariance", jitter)
    z = rng.standard_normal((n_draws, len(cov)))
    return fit.joint_mean[None, :] + z @ L.T


def q5_draws(fit: FitResult, draws: np.ndarray) -> np.ndarray:
    """U5MR per draw over [draw, period, region, stratum], bias terms off."""
    spec, layout = fit.spec, fit.layout
    if spec.kind != "mortality":
        raise InferenceError("q5 is defined for mortality fits only")
    n = draws.shape[0]
    db = layout.dim_beta
    bdr, tdr = draws[:, :db], draws[:, db:]
    P, R = layout.n_periods, layout.n_regions
    G = spec.n_age_groups
    icmap = np.array([spec.intercept_classes[g] for g in range(G)])
    intercepts = bdr[:, layout.beta_slices["intercepts"]]

    eta = np.zeros((n, G, P, R, 2))
    eta += intercepts[:, icmap][:, :, None, None, None]
    if "phi" in layout.theta_slices:
        rcmap = np.array([spec.rw2_classes[g] for g in range(G)])
        phi = tdr[:, layout.theta_slices["phi"]].reshape(
            n, layout.n_rw2_classes, P)
        eta += phi[:, rcmap][:, :, :, None, None]
    if "S" in layout.theta_slices:
        eta += tdr[:, layout.theta_slices["S"]][:, None, None, :, None]
    if "eps" in layout.theta_slices:
        eps = tdr[:, layout.theta_slices["eps"]]
        if layout.iid == "region_period":
            eps = eps.reshape(n, R, P).transpose(0, 2, 1)
            eta += eps[:, None, :, :, None]
        else:
            eta += eps[:, None, None, :, None]
    if spec.urban_effect:
        eta[..., 1] += bdr[:, layout.beta_slices["beta_urb"]][:, 0][
            :, None, None, None]
    if spec.hiv is not None:
        eta += np.log(np.asarray(spec.hiv))[None, None, :, None, None]
    q1 = 1.0 / (1.0 + np.exp(-eta))
    surv = np.ones((n, P, R, 2))
    for a in range(5):
        surv *= 1.0 - q1[:, min(a, G - 1)]
    return 1.0 - surv


def summarize_q5(q5d: np.ndarray) -> dict:
    """Median, sd of logit, and central 95% interval over the draw axis."""
    logit = np.log(q5d) - np.log1p(-q5d)
    return {
        "median": np.median(q5d, axis=0),
        "sd_logit": np.std(logit, axis=0, ddof=1),
        "lower": np.quantile(q5d, 0.025, axis=0),
        "upper": np.quantile(q5d, 0.975, axis=0),
    }


def aggregate_strata(q5d: np.ndarray, urban_weights) -> np.ndarray:
    """Combine rural and urban U5MR per draw with urban population weights.

    ``urban_weights`` is [n_regions] or [n_regions, n_periods] urban
    proportions; there is no default because the split is population data.
    """
    if urban_weights is None:
        raise InferenceError("urban population weights are required to "
                             "aggregate strata")
    w = np.asarray(urban_weights, dtype=float)
    if np.any(w < 0) or np.any(w > 1):
        raise InferenceError("urban weights must be proportions in [0, 1]")
    n, P, R, _ = q5d.shape
    if w.shape == (R,):
        w = np.broadcast_to(w[None, :], (P, R))
    elif w.shape == (R, P):
        w = w.T
    else:
        raise InferenceError(f"urban weights must have shape ({R},) or "
                             f"({R}, {P}), got {w.shape}")
    return (1.0 - w)[None] * q5d[..., 0] + w[None] * q5d[..., 1]


def _hyper_intervals(layout: ParameterLayout, beta_hat, cov_beta) -> dict:
    out = {}
    for name in layout.beta_names:
        if not name.startswith("log_kappa"):
            continue
        i = layout.beta_slices[name].start
        lk = beta_hat[i]
        se = math.sqrt(max(cov_beta[i, i], 0.0))
        out[name.replace("log_", "")] = {
            "estimate": math.exp(lk),
            "lower": math.exp(lk - 1.96 * se),
            "upper": math.exp(lk + 1.96 * se),
        }
    return out


def _initial_beta(layout: ParameterLayout, bern: BernoulliRows,
                  spec: HazardModelSpec) -> np.ndarray:
    beta0 = np.zeros(layout.dim_beta)
    ic_sl = layout.beta_slices["intercepts"]
    for c in range(spec.n_intercepts):
        mask = (bern.ic == c) & (bern.n > 0)
        n = bern.n[mask].sum()
        k = bern.k[mask].sum()
        rate = min(max((k + 0.5) / (n + 1.0), 1e-5), 1.0 - 1e-5)
        beta0[ic_sl.start + c] = math.log(rate / (1.0 - rate))
    for name in layout.beta_names:
        if name.startswith("log_kappa"):
            beta0[layout.beta_slices[name]] = 3.0
    return beta0


def _finish_fit(model: HazardModel, outer: OuterResult, *, strategy, seed,
                n_draws, tol_inner, want_q5) -> FitResult:
    _, theta_hat, H_inner = laplace_neg_log_marginal(
        model.objective, outer.beta_hat, outer.theta_hat, tol=tol_inner)
    mean, cov, cov_beta = joint_gaussian(model, outer.beta_hat, theta_hat,
                                         H_inner, outer.hessian)
    fit = FitResult(
        spec=model.spec, window=model.window, regions=model.regions,
        layout=model.layout, strategy=strategy, beta_hat=outer.beta_hat,
        theta_hat=theta_hat, cov_beta=cov_beta, joint_mean=mean,
        joint_cov=cov, neg_log_marginal=outer.neg_log_marginal, seed=seed,
        n_outer_evals=outer.n_evals,
        hyper_intervals=_hyper_intervals(model.layout, outer.beta_hat,
                                         cov_beta))
    if n_draws:
        fit.draws = draw_posterior(fit, n_draws, seed)
        if want_q5:
            fit.q5_summary = summarize_q5(q5_draws(fit, fit.draws))
    return fit


def fit_mortality(panel: BirthHistoryPanel, spec: HazardModelSpec,
                  window: TimeWindow, *, strategy: str = "fbh_only",
                  fertility: FertilitySchedule | None = None,
                  true_births: dict | None = None, seed: int = 0,
                  n_draws: int = 1000, tol_inner=DEFAULT_TOL_INNER,
                  tol_outer=DEFAULT_TOL_OUTER, beta0=None) -> FitResult:
    """Fit the mortality model under one of the fusion strategies.

    ``fbh_only`` ignores summary records.  The three fusion strategies
    differ in where the birth-time weights come from: tabulated true births
    per age, shares from a supplied true fertility schedule, or shares from
    an estimated schedule.  The caller supplies the schedule in both share
    cases; the names flow through to reporting.
    """
    if strategy not in STRATEGIES:
        raise InferenceError(f"unknown strategy {strategy!r}; choose from "
                             f"{STRATEGIES}")
    if spec.kind != "mortality":
        raise InferenceError("fit_mortality needs a mortality spec")
    region_index = {rid: i for i, rid in enumerate(panel.graph.regions)}
    bern = mortality_rows(panel, spec, window, region_index)
    sbh = None
    if strategy != "fbh_only":
        cells = tabulate_sbh(panel)
        survey_year_of = lambda sid: panel.surveys[sid].survey_year
        if strategy == "fbh_sbh_true_births":
            if true_births is None:
                raise InferenceError("strategy fbh_sbh_true_births needs "
                                     "true_births")
            cw = sbh_cell_weights(cells, survey_year_of, region_index,
                                  true_births=true_births)
        else:
            if fertility is None:
                raise InferenceError(f"strategy {strategy} needs a fertility "
                                     "schedule")
            cw = sbh_cell_weights(cells, survey_year_of, region_index,
                                  fertility=fertility)
        if cw:
            sbh = sbh_arrays(cw, survey_year_of, region_index, spec, window)
        else:
            log.warning("no summary cells with births; the fit reduces to "
                        "fbh_only")
    model = build_hazard_model(spec, window, panel.graph, bern, sbh)
    if beta0 is None:
        beta0 = _initial_beta(model.layout, bern, spec)
    outer = outer_optimize(model.objective, beta0,
                           np.zeros(model.layout.dim_theta),
                           tol_outer=tol_outer, tol_inner=tol_inner)
    return _finish_fit(model, outer, strategy=strategy, seed=seed,
                       n_draws=n_draws, tol_inner=tol_inner, want_q5=True)


def fit_fertility(panel: BirthHistoryPanel, spec: HazardModelSpec,
                  window: TimeWindow, *, seed: int = 0, n_draws: int = 0,
                  tol_inner=DEFAULT_TOL_INNER, tol_outer=DEFAULT_TOL_OUTER,
                  beta0=None) -> FitResult:
    """Fit the fertility model to FBH woman-year exposures."""
    if spec.kind != "fertility":
        raise InferenceError("fit_fertility needs a fertility spec")
    region_index = {rid: i for i, rid in enumerate(panel.graph.regions)}
    bern = fertility_rows(panel, spec, window, region_index)
    model = build_hazard_model(spec, window, panel.graph, bern, None)
    if beta0 is None:
        beta0 = _initial_beta(model.layout, bern, spec)
    outer = outer_optimize(model.objective, beta0,
                           np.zeros(model.layout.dim_theta),
                           tol_outer=tol_outer, tol_inner=tol_inner)
    return _finish_fit(model, outer, strategy="fertility", seed=seed,
                       n_draws=n_draws, tol_inner=tol_inner, want_q5=False)
