"""Observed-data likelihoods and the exact small-instance oracles.

The production likelihood has two parts: a Bernoulli log likelihood over
dated child-years (full birth histories) and a Poisson log likelihood over
summary cells, with cell mean T_B * sum_a c(a) q*(a).  The exact oracles
(binomial convolution and the birth-configuration mixture) exist to validate
that Poisson approximation on instances small enough to enumerate.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .data_model import BirthHistoryPanel, SbhCell
from .hazards import (MIN_MOTHER_AGE, FertilitySchedule, HazardModelSpec,
                      HazardParams, MortalitySchedule, TimeWindow,
                      birth_shares, q_star)

log = logging.getLogger(__name__)

CONVOLUTION_GUARD = 30   # max total births for the exact convolution
MIXTURE_GUARD_TB = 8     # max T_B for the exact mixture
MIXTURE_GUARD_MS = 6     # max m_s (number of birth slots - 1) for the mixture


class LikelihoodError(ValueError):
    pass


def poisson_logpmf(k, mu):
    """Log Poisson pmf in log space; mu = 0 gives 0 for k = 0, -inf otherwise."""
    k = np.asarray(k, dtype=float)
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(mu > 0,
                       k * np.log(np.where(mu > 0, mu, 1.0)) - mu
                       - gammaln(k + 1.0),
                       np.where(k == 0, 0.0, -np.inf))
    return out


# ---------------------------------------------------------------------------
# FBH Bernoulli log likelihood

def child_life_years(panel: BirthHistoryPanel, survey_year_of):
    """Yield (woman, child, age, year, died_this_year) Bernoulli indicators.

    A child alive at the survey contributes survival indicators for every age
    it completed; a dead child contributes survivals up to the death age and
    one death indicator.  Each child contributes one birth indicator upstream
    and at most one death indicator per life-year here.
    """
    for w in panel.women:
        if w.source_kind != "FBH":
            continue
        t_s = survey_year_of(w.survey_id)
        for c in panel.children_of(w.woman_id):
            age_at_survey = t_s - c.birth_year
            if c.age_at_death is None:
                n_years = age_at_survey
                for a in range(n_years):
                    yield w, c, a, c.birth_year + a, False
            else:
                for a in range(c.age_at_death):
                    yield w, c, a, c.birth_year + a, False
                yield w, c, c.age_at_death, c.birth_year + c.age_at_death, True


def fbh_loglik(panel: BirthHistoryPanel, spec: HazardModelSpec,
               params: HazardParams, window: TimeWindow,
               region_index: dict) -> float:
    """Sum of Bernoulli log probabilities over FBH child-years."""
    n_regions = len(region_index)
    sched = MortalitySchedule.from_params(spec, params, window, n_regions)
    total = 0.0
    survey_year_of = lambda sid: panel.surveys[sid].survey_year
    for w, c, a, year, died in child_life_years(panel, survey_year_of):
        q = sched.rate(a, year, region_index[w.region],
                       1 if w.stratum == "urban" else 0)
        if not 0.0 < q < 1.0:
            raise LikelihoodError(f"hazard {q} outside (0,1) at age {a}, "
                                  f"year {year}")
        total += math.log(q) if died else math.log1p(-q)
    return total


# ---------------------------------------------------------------------------
# SBH Poisson log likelihood

@dataclass(frozen=True)
class SbhCellLik:
    """One summary cell with its birth-time weights and death probabilities."""

    cell: SbhCell
    weights: np.ndarray   # per age a: expected births T_B*c(a), or true B_a
    qstar: np.ndarray     # per age a: probability of death by the survey

    @property
    def mu(self) -> float:
        return float(self.weights @ self.qstar)


def sbh_cell_liks(cells, mortality: MortalitySchedule, region_index: dict,
                  survey_year_of, *, fertility: FertilitySchedule | None = None,
                  true_births: dict | None = None,
                  include_survey_year: bool = False) -> list[SbhCellLik]:
    """Build per-cell likelihood terms from schedules.

    Birth-time weights come either from fertility-derived shares (scaled by
    T_B) or, when ``true_births`` maps cell keys to per-age birth counts,
    directly from those counts.  Cells with no births are dropped.
    """
    out = []
    for cell in cells:
        if cell.total_born == 0:
            continue
        r = region_index[cell.region]
        s = 1 if cell.stratum == "urban" else 0
        t_s = survey_year_of(cell.survey_id)
        m_s = cell.age_at_survey
        if true_births is not None:
            key = (cell.survey_id, cell.region, cell.stratum, m_s)
            if key not in true_births:
                raise LikelihoodError(f"no true birth counts for cell {key}")
            weights = np.asarray(true_births[key], dtype=float)
            if len(weights) != m_s + 1:
                raise LikelihoodError(f"birth counts for cell {key} must have "
                                      f"length {m_s + 1}")
        else:
            if fertility is None:
                raise LikelihoodError("need a fertility schedule or true "
                                      "birth counts")
            shares = birth_shares(fertility, m_s, t_s, r, s,
                                  include_survey_year=include_survey_year)
            weights = cell.total_born * shares
        qs = np.zeros(m_s + 1)
        for a in range(1, m_s + 1):
            if weights[a] == 0.0:
                continue
            qs[a] = q_star(mortality, a, t_s - a, r, s)
        out.append(SbhCellLik(cell, weights, qs))
    return out


def sbh_loglik(cell_liks) -> float:
    """Sum of Poisson log pmfs over summary cells."""
    total = 0.0
    for cl in cell_liks:
        mu = cl.mu
        td = cl.cell.total_died
        if mu == 0.0 and td > 0:
            log.warning("cell %s: zero mean with %d deaths", cl.cell, td)
            return -math.inf
        total += float(poisson_logpmf(td, mu))
    return total


# ---------------------------------------------------------------------------
# exact oracles

def sbh_exact_convolution(births_by_age, qstar) -> np.ndarray:
    """Exact pmf of the death total: convolution of per-age binomials.

    ``births_by_age[a]`` children each die independently with probability
    ``qstar[a]``.
    """
    births_by_age = np.asarray(births_by_age, dtype=int)
    qstar = np.asarray(qstar, dtype=float)
    if births_by_age.sum() > CONVOLUTION_GUARD:
        raise LikelihoodError(f"exact convolution guard exceeded "
                              f"({births_by_age.sum()} > {CONVOLUTION_GUARD})")
    pmf = np.array([1.0])
    for b, q in zip(births_by_age, qstar):
        if b == 0:
            continue
        k = np.arange(b + 1)
        binom = np.exp(gammaln(b + 1) - gammaln(k + 1) - gammaln(b - k + 1))
        with np.errstate(divide="ignore"):
            bpmf = binom * q ** k * (1.0 - q) ** (b - k)
        pmf = np.convolve(pmf, bpmf)
    return pmf


def _compositions(total, parts):
    """All nonnegative integer vectors of length ``parts`` summing to total."""
    for cuts in itertools.combinations(range(total + parts - 1), parts - 1):
        prev = -1
        comp = []
        for c in cuts:
            comp.append(c - prev - 1)
            prev = c
        comp.append(total + parts - 2 - prev)
        yield tuple(comp)


def sbh_exact_mixture(total_born: int, shares, qstar) -> np.ndarray:
    """Exact pmf of the death total, mixing over birth configurations.

    The configuration law is multinomial with per-age probabilities
    ``shares`` (a modeling choice: it reproduces the expected births per age
    and is sufficient for validating the approximation chain).
    """
    shares = np.asarray(shares, dtype=float)
    qstar = np.asarray(qstar, dtype=float)
    m_s = len(shares) - 1
    if total_born > MIXTURE_GUARD_TB or m_s > MIXTURE_GUARD_MS:
        raise LikelihoodError(f"exact mixture guard exceeded (T_B={total_born},"
                              f" m_s={m_s})")
    if abs(shares.sum() - 1.0) > 1e-9:
        raise LikelihoodError("shares must sum to 1")
    pmf = np.zeros(total_born + 1)
    log_shares = np.where(shares > 0, np.log(np.where(shares > 0, shares, 1.0)),
                          -np.inf)
    for comp in _compositions(total_born, m_s + 1):
        b = np.asarray(comp)
        used = b > 0
        if np.any(used & (shares == 0.0)):
            continue
        logp = (gammaln(total_born + 1) - gammaln(b + 1).sum()
                + float(b[used] @ log_shares[used]))
        conv = sbh_exact_convolution(b, qstar)
        pmf[:len(conv)] += math.exp(logp) * conv
    return pmf


def pmf_mean(pmf) -> float:
    pmf = np.asarray(pmf)
    return float(np.arange(len(pmf)) @ pmf)


def poisson_pmf_vector(mu: float, n: int) -> np.ndarray:
    """Poisson pmf on 0..n-1 (the tail mass beyond n-1 is excluded)."""
    return np.exp(poisson_logpmf(np.arange(n), mu))


def tv_distance_to_poisson(pmf, mu: float) -> float:
    """Total variation distance between a finite pmf and Poisson(mu).

    The Poisson tail beyond the pmf support counts fully toward the distance.
    """
    pmf = np.asarray(pmf, dtype=float)
    pois = poisson_pmf_vector(mu, len(pmf))
    tail = 1.0 - pois.sum()
    return 0.5 * (np.abs(pmf - pois).sum() + tail)
