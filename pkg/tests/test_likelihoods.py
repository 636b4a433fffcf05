"""Bernoulli/Poisson likelihood terms and the exact enumeration oracles."""

import itertools
import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from sbhfuse.data_model import SbhCell, tabulate_sbh
from sbhfuse.hazards import (FERTILITY_BAND_CLASSES, HazardModelSpec,
                             HazardParams, FertilitySchedule,
                             MortalitySchedule, TimeWindow)
from sbhfuse.likelihoods import (LikelihoodError, SbhCellLik, child_life_years,
                                 fbh_loglik, pmf_mean, poisson_logpmf,
                                 poisson_pmf_vector, sbh_cell_liks,
                                 sbh_exact_convolution, sbh_exact_mixture,
                                 sbh_loglik, tv_distance_to_poisson)

WINDOW = TimeWindow(1990, 2009)


def _constant_mortality(q):
    spec = HazardModelSpec(kind="mortality", intercept_classes=(0,),
                           rw2_classes=None, spatial=False, iid=None)
    params = HazardParams(intercepts=np.array([np.log(q / (1 - q))]))
    return MortalitySchedule.from_params(spec, params, WINDOW, 2)


def _flat_fertility(f=0.2):
    spec = HazardModelSpec(kind="fertility",
                           intercept_classes=FERTILITY_BAND_CLASSES,
                           rw2_classes=None, spatial=False, iid=None)
    params = HazardParams(
        intercepts=np.full(5, np.log(f / (1 - f))))
    return FertilitySchedule.from_params(spec, params, WINDOW, 2)


def test_poisson_logpmf_matches_scipy():
    ks = np.array([0, 1, 5, 20])
    mus = np.array([0.3, 1.0, 4.5, 19.0])
    assert np.allclose(poisson_logpmf(ks, mus),
                       scipy.stats.poisson.logpmf(ks, mus))
    assert poisson_logpmf(0, 0.0) == 0.0
    assert poisson_logpmf(2, 0.0) == -np.inf


class TestChildLifeYears:
    def test_indicators(self, tiny_panel):
        rows = list(child_life_years(tiny_panel,
                                     lambda sid: tiny_panel.surveys[sid].survey_year))
        # f1: child born 2004 alive -> ages 0..5; child born 2007 died at 1
        # -> survival at 0, death at 1; f2: child born 2009 alive -> age 0
        assert len(rows) == 6 + 2 + 1
        deaths = [(c.birth_year, a) for _, c, a, _, d in rows if d]
        assert deaths == [(2007, 1)]
        years = [(c.birth_year, a, y) for _, c, a, y, _ in rows]
        assert all(y == by + a for by, a, y in years)

    def test_sbh_women_skipped(self, tiny_panel):
        rows = list(child_life_years(tiny_panel,
                                     lambda sid: tiny_panel.surveys[sid].survey_year))
        assert all(w.source_kind == "FBH" for w, *_ in rows)


def test_fbh_loglik_matches_direct_computation(tiny_panel):
    q = 0.03
    spec = HazardModelSpec(kind="mortality", intercept_classes=(0,),
                           rw2_classes=None, spatial=False, iid=None)
    params = HazardParams(intercepts=np.array([np.log(q / (1 - q))]))
    ll = fbh_loglik(tiny_panel, spec, params, WINDOW,
                    {"north": 0, "south": 1})
    # 8 survival years and 1 death year at constant hazard
    assert np.isclose(ll, 8 * math.log(1 - q) + math.log(q))


class TestSbhCells:
    def test_mu_is_weighted_qstar(self):
        cell = SbhCell("s", "north", "rural", 30, 10, 2, 4)
        mort = _constant_mortality(0.05)
        fert = _flat_fertility()
        liks = sbh_cell_liks([cell], mort, {"north": 0, "south": 1},
                             lambda sid: 2010, fertility=fert)
        assert len(liks) == 1
        cl = liks[0]
        assert np.isclose(cl.weights.sum(), 10.0)
        expect = sum(cl.weights[a] * (1 - 0.95 ** a)
                     for a in range(len(cl.weights)))
        assert np.isclose(cl.mu, expect)

    def test_empty_cells_dropped(self):
        cell = SbhCell("s", "north", "rural", 30, 0, 0, 4)
        liks = sbh_cell_liks([cell], _constant_mortality(0.05),
                             {"north": 0}, lambda sid: 2010,
                             fertility=_flat_fertility())
        assert liks == []

    def test_true_births_override(self):
        cell = SbhCell("s", "north", "rural", 20, 3, 1, 2)
        tb = {("s", "north", "rural", 20): np.array([0.0, 1.0, 2.0]
                                                    + [0.0] * 18)}
        liks = sbh_cell_liks([cell], _constant_mortality(0.05), {"north": 0},
                             lambda sid: 2010, true_births=tb)
        cl = liks[0]
        q1 = 1 - 0.95
        q2 = 1 - 0.95 ** 2
        assert np.isclose(cl.mu, 1.0 * q1 + 2.0 * q2)

    def test_missing_true_births_raises(self):
        cell = SbhCell("s", "north", "rural", 20, 3, 1, 2)
        with pytest.raises(LikelihoodError, match="no true birth counts"):
            sbh_cell_liks([cell], _constant_mortality(0.05), {"north": 0},
                          lambda sid: 2010, true_births={})

    def test_loglik_zero_mean_with_deaths(self):
        cell = SbhCell("s", "north", "rural", 20, 3, 1, 2)
        cl = SbhCellLik(cell, np.zeros(21), np.zeros(21))
        assert sbh_loglik([cl]) == -np.inf


class TestExactOracles:
    def test_convolution_vs_brute_force(self):
        # enumerate all death outcome combinations directly
        births = [2, 1, 3]
        qs = [0.1, 0.3, 0.05]
        pmf = sbh_exact_convolution(births, qs)
        brute = np.zeros(sum(births) + 1)
        for deaths in itertools.product(*(range(b + 1) for b in births)):
            p = 1.0
            for d, b, q in zip(deaths, births, qs):
                p *= math.comb(b, d) * q ** d * (1 - q) ** (b - d)
            brute[sum(deaths)] += p
        assert np.allclose(pmf, brute, atol=1e-14)

    def test_convolution_guard(self):
        with pytest.raises(LikelihoodError, match="guard"):
            sbh_exact_convolution([31], [0.1])

    def test_mixture_sums_to_one(self):
        shares = np.array([0.1, 0.2, 0.3, 0.4])
        qs = np.array([0.0, 0.05, 0.1, 0.2])
        pmf = sbh_exact_mixture(5, shares, qs)
        assert np.isclose(pmf.sum(), 1.0, atol=1e-12)
        assert np.all(pmf >= 0)

    def test_mixture_single_slot_is_binomial(self):
        # all mass on one birth age: the mixture collapses to one binomial
        pmf = sbh_exact_mixture(4, [0.0, 1.0], [0.5, 0.2])
        expect = [math.comb(4, k) * 0.2 ** k * 0.8 ** (4 - k)
                  for k in range(5)]
        assert np.allclose(pmf, expect)

    def test_mixture_guards(self):
        with pytest.raises(LikelihoodError, match="guard"):
            sbh_exact_mixture(9, np.full(3, 1 / 3), np.zeros(3))
        with pytest.raises(LikelihoodError, match="guard"):
            sbh_exact_mixture(2, np.full(8, 1 / 8), np.zeros(8))

    def test_mixture_shares_must_normalize(self):
        with pytest.raises(LikelihoodError, match="sum to 1"):
            sbh_exact_mixture(2, [0.5, 0.6], [0.1, 0.1])

    @settings(max_examples=30, deadline=None)
    @given(tb=st.integers(min_value=1, max_value=6),
           seed=st.integers(min_value=0, max_value=10 ** 6))
    def test_mixture_mean_identity_property(self, tb, seed):
        rng = np.random.default_rng(seed)
        m_s = rng.integers(1, 7)
        raw = rng.random(m_s + 1)
        shares = raw / raw.sum()
        qs = rng.random(m_s + 1) * 0.5
        pmf = sbh_exact_mixture(tb, shares, qs)
        assert math.isclose(pmf_mean(pmf), tb * float(shares @ qs),
                            rel_tol=0, abs_tol=1e-10)


def test_tv_distance_zero_against_itself():
    mu = 1.3
    pmf = poisson_pmf_vector(mu, 50)
    tv = tv_distance_to_poisson(pmf, mu)
    # only the negligible truncated tail remains
    assert tv < 1e-12


def test_tv_distance_counts_poisson_tail():
    # a pmf concentrated at zero vs Poisson(5): distance is near 1
    tv = tv_distance_to_poisson(np.array([1.0]), 5.0)
    assert tv > 0.99
