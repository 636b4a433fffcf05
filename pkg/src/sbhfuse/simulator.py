"""Microsimulation of birth histories on a yearly grid.

Women are simulated forward from age 15: a Bernoulli birth draw each year up
to the year before the survey, and for each child a death draw at each
completed age until the survey.  Full histories are kept; a survey can then
be degraded to summary form (totals only) without touching the truth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data_model import (BirthHistoryPanel, FbhChildRecord, RegionGraph,
                         SbhRecord, SurveyMeta, WomanRecord)
from .hazards import (FERTILITY_BAND_CLASSES, MIN_MOTHER_AGE,
                      MORTALITY_RW2_CLASSES, MORTALITY_SIM_INTERCEPT_CLASSES,
                      FertilitySchedule, HazardModelSpec, HazardParams,
                      MortalitySchedule, TimeWindow)
from .priors import icar_structure, sample_constrained

log = logging.getLogger(__name__)

FBH_SURVEY = "sim_fbh"
SBH_SURVEY = "sim_sbh"

# defaults sized for quick runs; scale n_fbh/n_sbh up for full studies
DEFAULT_BETAS = (np.log(0.150), np.log(0.053), np.log(0.005))
DEFAULT_BANDS = (0.13, 0.27, 0.25, 0.20, 0.10)


def _default_phi(n_periods: int) -> np.ndarray:
    """Smooth declining time trends per age class, centered on zero.

    Literal paths rather than draws from a random walk: the odds of death
    fall steadily over the window, fastest for infants.
    """
    t = np.linspace(1.0, -1.0, n_periods)
    return np.vstack([0.45 * t, 0.30 * t, 0.15 * t])


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to regenerate a synthetic study deterministically."""

    graph: RegionGraph
    window: TimeWindow
    survey_year: int
    seed: int
    n_fbh_per_region: int = 4000
    n_sbh_per_region: int = 20000
    fertility_bands: tuple = DEFAULT_BANDS
    mortality_betas: tuple = DEFAULT_BETAS
    phi: np.ndarray | None = None       # [3, n_periods] literal time paths
    kappa_S: float = 45.0
    kappa_eps: float = 90.0
    S: np.ndarray | None = None         # fixed spatial effects, else sampled
    eps: np.ndarray | None = None       # fixed iid effects, else sampled
    urban_fraction: float = 0.0
    mother_age_range: tuple = (MIN_MOTHER_AGE, 49)
    fbh_survey_year: int | None = None  # defaults to survey_year

    def __post_init__(self):
        if self.survey_year != self.window.end_year + 1:
            raise ValueError(
                f"the survey year {self.survey_year} must follow the window "
                f"({self.window.start_year}-{self.window.end_year}): births "
                "up to the prior year need in-window hazards")
        if self.fbh_survey_year is not None and not (
                self.window.start_year < self.fbh_survey_year
                <= self.survey_year):
            raise ValueError(
                f"the full-history survey year {self.fbh_survey_year} must "
                f"fall inside ({self.window.start_year}, {self.survey_year}]")
        if any(not 0.0 < f < 1.0 for f in self.fertility_bands):
            raise ValueError("fertility band probabilities must be in (0,1)")
        if not 0.0 <= self.urban_fraction < 1.0:
            raise ValueError("urban fraction must be in [0,1)")
        lo, hi = self.mother_age_range
        if not MIN_MOTHER_AGE <= lo <= hi:
            raise ValueError(f"bad mother age range {self.mother_age_range}")


def mortality_truth_spec() -> HazardModelSpec:
    return HazardModelSpec(
        kind="mortality",
        intercept_classes=MORTALITY_SIM_INTERCEPT_CLASSES,
        rw2_classes=MORTALITY_RW2_CLASSES,
        urban_effect=False, sbh_bias=False, spatial=True, iid="region")


def fertility_truth_spec() -> HazardModelSpec:
    return HazardModelSpec(
        kind="fertility", intercept_classes=FERTILITY_BAND_CLASSES,
        rw2_classes=None, urban_effect=False, sbh_bias=False,
        spatial=False, iid=None)


def truth_params(config: ScenarioConfig):
    """(mortality spec, params, fertility spec, params), effects resolved.

    Random effects are drawn from their stated distributions on the stream
    (seed, 0); woman streams start at index 1, so adding women never shifts
    the truth.
    """
    rng = np.random.default_rng([config.seed, 0])
    n_regions = len(config.graph.regions)
    phi = config.phi
    if phi is None:
        phi = _default_phi(config.window.n_periods)
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (3, config.window.n_periods):
        raise ValueError(f"phi must have shape (3, {config.window.n_periods})")
    S = config.S
    if S is None:
        st = icar_structure(config.graph).with_kappa(config.kappa_S)
        S = sample_constrained(st, 1, rng)[0]
    eps = config.eps
    if eps is None:
        eps = rng.normal(0.0, 1.0 / np.sqrt(config.kappa_eps), n_regions)
        # center like the spatial effects: with few regions a nonzero mean
        # would shift the identifiable intercepts away from the nominal truth
        eps = eps - eps.mean()
    mort_spec = mortality_truth_spec()
    mort_params = HazardParams(
        intercepts=np.asarray(config.mortality_betas, dtype=float),
        phi=phi, S=np.asarray(S, dtype=float), eps=np.asarray(eps, dtype=float))
    fert_spec = fertility_truth_spec()
    bands = np.asarray(config.fertility_bands, dtype=float)
    fert_params = HazardParams(intercepts=np.log(bands / (1.0 - bands)))
    return mort_spec, mort_params, fert_spec, fert_params


def truth_schedules(config: ScenarioConfig):
    """(MortalitySchedule, FertilitySchedule) at the truth parameters."""
    mspec, mpar, fspec, fpar = truth_params(config)
    n_regions = len(config.graph.regions)
    mort = MortalitySchedule.from_params(mspec, mpar, config.window, n_regions)
    fert = FertilitySchedule.from_params(fspec, fpar, config.window, n_regions)
    return mort, fert


def simulate_women(config: ScenarioConfig) -> BirthHistoryPanel:
    """Simulate the full panel; every woman carries her complete history.

    Women intended as summary respondents are assigned to the SBH survey but
    their child records are retained, so the truth can be tabulated before
    ``degrade_to_sbh`` strips the dates.
    """
    mort, fert = truth_schedules(config)
    fbh_year = (config.survey_year if config.fbh_survey_year is None
                else config.fbh_survey_year)
    lo, hi = config.mother_age_range
    women, children = [], []
    idx = 0
    for r, region in enumerate(config.graph.regions):
        for survey_id, count, t_s in (
                (FBH_SURVEY, config.n_fbh_per_region, fbh_year),
                (SBH_SURVEY, config.n_sbh_per_region, config.survey_year)):
            for _ in range(count):
                idx += 1
                rng = np.random.default_rng([config.seed, idx])
                m_s = int(rng.integers(lo, hi + 1))
                if config.urban_fraction > 0:
                    stratum = ("urban" if rng.random() < config.urban_fraction
                               else "rural")
                else:
                    stratum = "rural"
                s = 1 if stratum == "urban" else 0
                wid = f"w{idx:07d}"
                women.append(WomanRecord(
                    woman_id=wid, age_at_survey=m_s, region=region,
                    stratum=stratum, survey_id=survey_id, source_kind="FBH"))
                # one birth draw per age up to the year before the survey
                for m in range(MIN_MOTHER_AGE, m_s):
                    year = t_s - (m_s - m)
                    if rng.random() >= fert.rate(m, year, r, s):
                        continue
                    aad = None
                    for i in range(t_s - year):
                        if rng.random() < mort.rate(i, year + i, r, s):
                            aad = i
                            break
                    children.append(FbhChildRecord(
                        woman_id=wid, birth_year=year, age_at_death=aad))
    surveys = {
        FBH_SURVEY: SurveyMeta(FBH_SURVEY, fbh_year, "FBH", "fbh"),
        SBH_SURVEY: SurveyMeta(SBH_SURVEY, config.survey_year, "FBH", "sbh"),
    }
    return BirthHistoryPanel(women=tuple(women), children=tuple(children),
                             sbh=(), graph=config.graph, surveys=surveys)


def tabulate_true_births(panel: BirthHistoryPanel,
                         survey_id: str = SBH_SURVEY) -> dict:
    """True births-by-age vectors per (survey, region, stratum, mother age).

    Keys match the summary-cell key convention; values have length m_s + 1
    with entry a counting births a years before the survey.  Must run on the
    pre-degradation panel, while dates still exist.
    """
    out: dict = {}
    for w in panel.women:
        if w.survey_id != survey_id:
            continue
        t_s = panel.surveys[w.survey_id].survey_year
        key = (w.survey_id, w.region, w.stratum, w.age_at_survey)
        vec = out.setdefault(key, np.zeros(w.age_at_survey + 1))
        for c in panel.children_of(w.woman_id):
            vec[t_s - c.birth_year] += 1
    return out


def degrade_to_sbh(panel: BirthHistoryPanel,
                   survey_id: str = SBH_SURVEY) -> BirthHistoryPanel:
    """Replace one survey's child records with per-woman totals.

    Totals are preserved exactly: births become total_born, deaths become
    total_died.
    """
    if survey_id not in panel.surveys:
        raise ValueError(f"no survey {survey_id!r} in the panel")
    target = {w.woman_id for w in panel.women if w.survey_id == survey_id}
    women = tuple(
        replace(w, source_kind="SBH") if w.survey_id == survey_id else w
        for w in panel.women)
    kept, totals = [], {wid: [0, 0] for wid in target}
    for c in panel.children:
        if c.woman_id in target:
            totals[c.woman_id][0] += 1
            totals[c.woman_id][1] += int(c.age_at_death is not None)
        else:
            kept.append(c)
    sbh = list(panel.sbh) + [
        SbhRecord(woman_id=wid, total_born=tb, total_died=td)
        for wid, (tb, td) in sorted(totals.items())]
    surveys = dict(panel.surveys)
    surveys[survey_id] = replace(surveys[survey_id], source_kind="SBH")
    return BirthHistoryPanel(women=women, children=tuple(kept),
                             sbh=tuple(sbh), graph=panel.graph,
                             surveys=surveys)


def true_q5_surface(config: ScenarioConfig) -> np.ndarray:
    """Synthetic-cohort U5MR of the truth over [period, region] (rural)."""
    mort, _ = truth_schedules(config)
    P = config.window.n_periods
    R = len(config.graph.regions)
    out = np.empty((P, R))
    from .hazards import q5
    for p in range(P):
        year = config.window.period_years(p)[0]
        for r in range(R):
            out[p, r] = q5(mort, year, r, 0)
    return out


def grid_graph(n_regions: int, prefix: str = "r") -> RegionGraph:
    """Synthetic geography: n regions on a near-square grid, rook adjacency."""
    if n_regions < 1:
        raise ValueError("need at least one region")
    rows = int(np.floor(np.sqrt(n_regions)))
    cols = int(np.ceil(n_regions / rows))
    names = [f"{prefix}{i + 1:02d}" for i in range(n_regions)]
    adj = {name: set() for name in names}
    for i in range(n_regions):
        ri, ci = divmod(i, cols)
        for j in (i - 1, i + 1, i - cols, i + cols):
            if not 0 <= j < n_regions:
                continue
            rj, cj = divmod(j, cols)
            if abs(ri - rj) + abs(ci - cj) == 1:
                adj[names[i]].add(names[j])
    return RegionGraph(regions=tuple(names),
                       adjacency={k: frozenset(v) for k, v in adj.items()})
