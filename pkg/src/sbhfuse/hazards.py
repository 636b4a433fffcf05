"""Fertility and mortality model structure and derived quantities.

A hazard model is a logit-scale linear predictor built from age-class
intercepts, per-class random-walk time curves, spatial (ICAR) and iid region
effects, optional urban and summary-source bias terms, and an optional
period-wise HIV odds multiplier.  The multiplier acts on the odds inside the
logistic, which is the same as adding its log to the linear predictor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

STRATA = ("rural", "urban")
MIN_MOTHER_AGE = 15
MAX_MOTHER_AGE = 49
N_MOTHER_AGES = MAX_MOTHER_AGE - MIN_MOTHER_AGE + 1

# default age-class maps: six mortality intercepts for ages 0..4 and 5+,
# three shared time curves ({0}, {1..4}, {5+}), five fertility bands
MORTALITY_INTERCEPT_CLASSES = (0, 1, 2, 3, 4, 5)
MORTALITY_SIM_INTERCEPT_CLASSES = (0, 1, 1, 1, 1, 2)
MORTALITY_RW2_CLASSES = (0, 1, 1, 1, 1, 2)
FERTILITY_BAND_CLASSES = tuple(min((m - 15) // 5, 4) for m in range(15, 50))


class HazardError(ValueError):
    pass


@dataclass(frozen=True)
class TimeWindow:
    """Yearly modeling window grouped into fixed-length calendar periods.

    Periods are aligned so the last one ends at ``end_year``; the window span
    must be a whole number of periods.
    """

    start_year: int
    end_year: int
    period_length: int = 5

    def __post_init__(self):
        if self.end_year < self.start_year:
            raise HazardError("empty time window")
        if self.n_years % self.period_length != 0:
            raise HazardError(
                f"window of {self.n_years} years is not a multiple of the "
                f"period length {self.period_length}")

    @property
    def n_years(self) -> int:
        return self.end_year - self.start_year + 1

    @property
    def n_periods(self) -> int:
        return self.n_years // self.period_length

    def period_of_year(self, year: int) -> int:
        """Period index of a calendar year, clamped to the window."""
        y = min(max(year, self.start_year), self.end_year)
        return (y - self.start_year) // self.period_length

    def contains(self, year: int) -> bool:
        return self.start_year <= year <= self.end_year

    def period_years(self, p: int) -> tuple[int, int]:
        y0 = self.start_year + p * self.period_length
        return y0, y0 + self.period_length - 1

    def period_label(self, p: int) -> str:
        y0, y1 = self.period_years(p)
        return f"{y0}-{y1}"


def class_of_age(class_map: tuple[int, ...], age: int) -> int:
    """Class index for an age; the last map entry extends to all older ages."""
    if age < 0:
        raise HazardError(f"negative age {age}")
    return class_map[min(age, len(class_map) - 1)]


@dataclass(frozen=True)
class HazardModelSpec:
    """Structure of one hazard model (which terms exist, and their class maps).

    For mortality, ``*_classes`` are indexed by child age; for fertility, by
    mother age minus 15.
    """

    kind: str  # "mortality" | "fertility"
    intercept_classes: tuple[int, ...]
    rw2_classes: tuple[int, ...] | None = None
    urban_effect: bool = False
    sbh_bias: bool = False
    spatial: bool = True
    iid: str | None = "region"  # "region" | "region_period" | None
    hiv: tuple[float, ...] | None = None  # per-period odds multiplier
    priors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("mortality", "fertility"):
            raise HazardError(f"unknown hazard kind {self.kind!r}")
        if self.sbh_bias and self.kind != "mortality":
            raise HazardError("SBH bias terms are mortality-only")
        if self.hiv is not None and self.kind != "mortality":
            raise HazardError("HIV multiplier is mortality-only")
        if self.iid not in (None, "region", "region_period"):
            raise HazardError(f"unknown iid kind {self.iid!r}")
        if self.hiv is not None and any(h <= 0 for h in self.hiv):
            raise HazardError("HIV multipliers must be positive")

    @property
    def n_intercepts(self) -> int:
        return max(self.intercept_classes) + 1

    @property
    def n_rw2_classes(self) -> int:
        return 0 if self.rw2_classes is None else max(self.rw2_classes) + 1

    @property
    def n_age_groups(self) -> int:
        n = len(self.intercept_classes)
        if self.rw2_classes is not None:
            if len(self.rw2_classes) != n:
                raise HazardError("intercept and rw2 class maps must cover the "
                                  "same ages")
        return n

    def log_hiv(self, period: int) -> float:
        if self.hiv is None:
            return 0.0
        return math.log(self.hiv[period])


@dataclass(frozen=True)
class HazardParams:
    """One point in parameter space for a HazardModelSpec."""

    intercepts: np.ndarray
    beta_urb: float = 0.0
    beta_sbh: float = 0.0
    beta_sbh_urb: float = 0.0
    phi: np.ndarray | None = None    # [n_rw2_classes, n_periods]
    S: np.ndarray | None = None      # [n_regions]
    eps: np.ndarray | None = None    # [n_regions] or [n_regions, n_periods]


def _logistic(eta):
    return 1.0 / (1.0 + np.exp(-eta))


def linear_predictor(spec: HazardModelSpec, params: HazardParams, *,
                     age: int, year: int, region: int, urban: bool,
                     sbh: bool, window: TimeWindow) -> float:
    """Logit-scale linear predictor (before the HIV odds multiplier)."""
    p = window.period_of_year(year)
    if age >= len(spec.intercept_classes) and spec.kind == "fertility":
        raise HazardError(f"mother age offset {age} beyond the class map")
    eta = float(params.intercepts[class_of_age(spec.intercept_classes, age)])
    if spec.rw2_classes is not None and params.phi is not None:
        eta += float(params.phi[class_of_age(spec.rw2_classes, age), p])
    if spec.spatial and params.S is not None:
        eta += float(params.S[region])
    if spec.iid == "region" and params.eps is not None:
        eta += float(params.eps[region])
    elif spec.iid == "region_period" and params.eps is not None:
        eta += float(params.eps[region, p])
    if spec.urban_effect and urban:
        eta += params.beta_urb
    if spec.sbh_bias and sbh:
        eta += params.beta_sbh
        if urban:
            eta += params.beta_sbh_urb
    return eta


def hazard_probability(spec: HazardModelSpec, params: HazardParams, *,
                       age: int, year: int, region: int, urban: bool = False,
                       sbh: bool = False, window: TimeWindow) -> float:
    """The hazard HIV(p)*exp(eta) / (1 + HIV(p)*exp(eta))."""
    eta = linear_predictor(spec, params, age=age, year=year, region=region,
                           urban=urban, sbh=sbh, window=window)
    if spec.kind == "mortality":
        eta += spec.log_hiv(window.period_of_year(year))
    return float(_logistic(eta))


def hazard_grid(spec: HazardModelSpec, params: HazardParams, window: TimeWindow,
                n_regions: int, sbh: bool = False) -> np.ndarray:
    """Hazards over [age_group, period, region, stratum(rural, urban)]."""
    G = spec.n_age_groups
    P = window.n_periods
    eta = np.empty((G, P, n_regions, 2))
    ic = np.array([spec.intercept_classes[g] for g in range(G)])
    eta[:] = params.intercepts[ic][:, None, None, None]
    if spec.rw2_classes is not None and params.phi is not None:
        rc = np.array([spec.rw2_classes[g] for g in range(G)])
        eta += params.phi[rc][:, :, None, None]
    if spec.spatial and params.S is not None:
        eta += params.S[None, None, :, None]
    if params.eps is not None:
        if spec.iid == "region":
            eta += params.eps[None, None, :, None]
        elif spec.iid == "region_period":
            eta += params.eps.T[None, :, :, None]
    if spec.urban_effect:
        eta[..., 1] += params.beta_urb
    if sbh and spec.sbh_bias:
        eta += params.beta_sbh
        eta[..., 1] += params.beta_sbh_urb
    if spec.kind == "mortality" and spec.hiv is not None:
        eta += np.log(np.asarray(spec.hiv))[None, :, None, None]
    return _logistic(eta)


@dataclass(frozen=True)
class MortalitySchedule:
    """One-year death probabilities over [age_group, period, region, stratum]."""

    spec: HazardModelSpec
    window: TimeWindow
    q1: np.ndarray  # [n_age_groups, n_periods, n_regions, 2]

    @classmethod
    def from_params(cls, spec, params, window, n_regions, sbh=False):
        q1 = hazard_grid(spec, params, window, n_regions, sbh=sbh)
        return cls(spec, window, q1)

    def rate(self, age: int, year: int, region: int, stratum: int = 0) -> float:
        g = min(age, self.q1.shape[0] - 1)
        return float(self.q1[g, self.window.period_of_year(year), region,
                             stratum])


@dataclass(frozen=True)
class FertilitySchedule:
    """Yearly birth probabilities over [mother_age, period, region, stratum]."""

    spec: HazardModelSpec
    window: TimeWindow
    f: np.ndarray  # [N_MOTHER_AGES, n_periods, n_regions, 2]
    m_min: int = MIN_MOTHER_AGE

    @classmethod
    def from_params(cls, spec, params, window, n_regions):
        f = hazard_grid(spec, params, window, n_regions)
        return cls(spec, window, f)

    def rate(self, mother_age: int, year: int, region: int,
             stratum: int = 0) -> float:
        if mother_age < self.m_min:
            return 0.0
        a = min(mother_age - MIN_MOTHER_AGE, self.f.shape[0] - 1)
        return float(self.f[a, self.window.period_of_year(year), region,
                            stratum])


def q5(schedule: MortalitySchedule, year: int, region: int,
       stratum: int = 0) -> float:
    """Synthetic-cohort U5MR: all five age hazards taken from the same year."""
    if not schedule.window.contains(year):
        raise HazardError(f"year {year} outside the modeled window")
    surv = 1.0
    for a in range(5):
        surv *= 1.0 - schedule.rate(a, year, region, stratum)
    return 1.0 - surv


def q_star(schedule: MortalitySchedule, age: int, birth_year: int, region: int,
           stratum: int = 0) -> float:
    """Real-cohort probability of dying within ``age`` years of a birth.

    Hazards advance in calendar time: the age-i hazard is taken from year
    birth_year + i.
    """
    if age == 0:
        return 0.0
    last = birth_year + age - 1
    if not schedule.window.contains(birth_year) or not schedule.window.contains(last):
        missing = birth_year if not schedule.window.contains(birth_year) else last
        raise HazardError(f"cohort born {birth_year} needs hazards for year "
                          f"{missing}, outside the modeled window")
    surv = 1.0
    for i in range(age):
        surv *= 1.0 - schedule.rate(i, birth_year + i, region, stratum)
    return 1.0 - surv


def birth_shares(fertility: FertilitySchedule, m_s: int, survey_year: int,
                 region: int, stratum: int = 0, *,
                 include_survey_year: bool = True) -> np.ndarray:
    """Probabilities that a reported birth occurred a years before the survey.

    Entry a of the returned vector is proportional to the mother's fertility
    at age m_s - a in year survey_year - a; ages below the fertility minimum
    contribute zero.  ``include_survey_year=False`` zeroes the a = 0 entry,
    matching data conventions that exclude survey-year births.
    """
    shares = np.zeros(m_s + 1)
    a_min = 0 if include_survey_year else 1
    for a in range(a_min, m_s + 1):
        m = m_s - a
        if m < fertility.m_min:
            break
        shares[a] = fertility.rate(m, survey_year - a, region, stratum)
    total = shares.sum()
    if total <= 0:
        raise HazardError(f"all-zero fertility window for m_s={m_s}")
    return shares / total


def estimate_fertility(panel, spec: HazardModelSpec, window: TimeWindow,
                       **kwargs):
    """Fit the fertility model to the panel's FBH woman-year exposures.

    Thin wrapper over the shared inference engine; returns its FitResult,
    whose ``fertility_schedule()`` gives fitted rates.
    """
    from . import inference
    return inference.fit_fertility(panel, spec, window, **kwargs)
