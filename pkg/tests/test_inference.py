"""Nested optimization engine, model assembly, and posterior summaries."""

import math

import numpy as np
import pytest

from sbhfuse import inference, simulator
from sbhfuse.data_model import tabulate_sbh
from sbhfuse.hazards import (FERTILITY_BAND_CLASSES, HazardModelSpec,
                             HazardParams, TimeWindow, q5)
from sbhfuse.inference import (InferenceError, NestedObjective,
                               ParameterLayout, aggregate_strata,
                               build_hazard_model, draw_posterior,
                               fertility_rows, fit_fertility, fit_mortality,
                               inner_optimize, laplace_neg_log_marginal,
                               mortality_rows, neg_log_posterior,
                               outer_optimize, q5_draws, sbh_arrays,
                               sbh_cell_weights, summarize_q5)
from sbhfuse.likelihoods import fbh_loglik
from sbhfuse.priors import HyperPrior, log_hyperprior
from sbhfuse.simulator import ScenarioConfig, grid_graph

WINDOW = TimeWindow(1990, 2009)


# ---------------------------------------------------------------------------
# the generic engine on analytic problems

def _quadratic_objective(A, b):
    """f(theta, beta) = 0.5 theta'A theta - b(beta)'theta with known minimum."""
    import jax.numpy as jnp

    def f(theta, beta):
        rhs = b(beta)
        return 0.5 * theta @ (A @ theta) - rhs @ theta
    return NestedObjective.from_function(f)


class TestInnerOptimize:
    def test_quadratic_one_step(self):
        rng = np.random.default_rng(0)
        M = rng.normal(size=(4, 4))
        A = M @ M.T + 4.0 * np.eye(4)
        rhs = rng.normal(size=4)
        obj = _quadratic_objective(A, lambda beta: rhs + beta)
        beta = np.array([0.3, -0.1, 0.0, 1.0])
        theta, H, fval = inner_optimize(obj, beta, np.zeros(4))
        expect = np.linalg.solve(A, rhs + beta)
        assert np.allclose(theta, expect, atol=1e-10)
        assert np.allclose(H, A)

    def test_empty_theta(self):
        import jax.numpy as jnp
        obj = NestedObjective.from_function(
            lambda theta, beta: jnp.sum(beta ** 2))
        theta, H, fval = inner_optimize(obj, np.array([2.0]), np.zeros(0))
        assert theta.size == 0 and H.shape == (0, 0)
        assert np.isclose(fval, 4.0)


class TestLaplace:
    def test_gaussian_exact(self):
        # f = -log N(y | theta, s2) - log N(theta | beta, t2): the marginal
        # is N(y | beta, s2 + t2) and the Laplace value must equal it exactly
        import jax.numpy as jnp
        y, s2, t2 = 1.3, 0.5, 2.0

        def f(theta, beta):
            ll = 0.5 * (y - theta[0]) ** 2 / s2 + 0.5 * jnp.log(2 * jnp.pi * s2)
            pr = (0.5 * (theta[0] - beta[0]) ** 2 / t2
                  + 0.5 * jnp.log(2 * jnp.pi * t2))
            return ll + pr

        obj = NestedObjective.from_function(f)
        for b in [-1.0, 0.0, 0.7, 2.5]:
            value, theta_hat, H = laplace_neg_log_marginal(
                obj, np.array([b]), np.zeros(1))
            exact = 0.5 * (y - b) ** 2 / (s2 + t2) \
                + 0.5 * math.log(2 * math.pi * (s2 + t2))
            assert abs(value - exact) < 1e-10
            # the conditional mode is the precision-weighted average
            expect = (y / s2 + b / t2) / (1 / s2 + 1 / t2)
            assert np.isclose(theta_hat[0], expect)

    def test_non_pd_hessian_raises(self):
        import jax.numpy as jnp
        obj = NestedObjective.from_function(
            lambda theta, beta: -jnp.sum(theta ** 2) + jnp.sum(beta ** 2))
        with pytest.raises(InferenceError):
            laplace_neg_log_marginal(obj, np.zeros(1), np.array([0.1]))


def test_outer_optimize_recovers_gaussian_mle():
    # marginal N(y | beta, s2 + t2): the outer minimum is beta = y
    import jax.numpy as jnp
    y, s2, t2 = 0.8, 0.3, 1.1

    def f(theta, beta):
        ll = 0.5 * (y - theta[0]) ** 2 / s2 + 0.5 * jnp.log(2 * jnp.pi * s2)
        pr = (0.5 * (theta[0] - beta[0]) ** 2 / t2
              + 0.5 * jnp.log(2 * jnp.pi * t2))
        return ll + pr

    obj = NestedObjective.from_function(f)
    res = outer_optimize(obj, np.zeros(1), np.zeros(1))
    assert np.isclose(res.beta_hat[0], y, atol=1e-5)
    # the outer curvature is the marginal precision
    assert np.isclose(res.hessian[0, 0], 1.0 / (s2 + t2), rtol=1e-3)


# ---------------------------------------------------------------------------
# layout

class TestParameterLayout:
    @pytest.fixture
    def spec(self):
        return HazardModelSpec(
            kind="mortality", intercept_classes=(0, 1, 1, 1, 1, 2),
            rw2_classes=(0, 1, 1, 1, 1, 2), urban_effect=True, sbh_bias=True,
            spatial=True, iid="region")

    def test_dimensions(self, spec):
        layout = ParameterLayout.for_spec(spec, WINDOW, 5)
        # 3 intercepts + urb + sbh + sbh_urb + 3 log-precisions
        assert layout.dim_beta == 9
        assert layout.n_fixed_effects == 6
        # 3 rw2 curves x 4 periods + spatial + iid
        assert layout.dim_theta == 12 + 5 + 5

    def test_pack_unpack_round_trip(self, spec):
        layout = ParameterLayout.for_spec(spec, WINDOW, 5)
        rng = np.random.default_rng(1)
        params = HazardParams(
            intercepts=rng.normal(size=3), beta_urb=0.3, beta_sbh=-0.2,
            beta_sbh_urb=0.1, phi=rng.normal(size=(3, 4)),
            S=rng.normal(size=5), eps=rng.normal(size=5))
        beta, theta = layout.pack(params, {"log_kappa_T": 1.5})
        back = layout.unpack(beta, theta)
        assert np.allclose(back.intercepts, params.intercepts)
        assert back.beta_urb == params.beta_urb
        assert np.allclose(back.phi, params.phi)
        assert np.allclose(back.S, params.S)
        assert np.allclose(back.eps, params.eps)
        assert beta[layout.beta_slices["log_kappa_T"]][0] == 1.5

    def test_minimal_spec(self):
        spec = HazardModelSpec(kind="fertility",
                               intercept_classes=FERTILITY_BAND_CLASSES,
                               rw2_classes=None, spatial=False, iid=None)
        layout = ParameterLayout.for_spec(spec, WINDOW, 3)
        assert layout.dim_beta == 5
        assert layout.dim_theta == 0
        assert layout.n_fixed_effects == 5


# ---------------------------------------------------------------------------
# data preparation

class TestRows:
    def test_mortality_rows_conserve_counts(self, small_panel):
        spec = simulator.mortality_truth_spec()
        region_index = {r: i for i, r in enumerate(small_panel.graph.regions)}
        rows = mortality_rows(small_panel, spec, WINDOW, region_index)
        from sbhfuse.likelihoods import child_life_years
        years = list(child_life_years(
            small_panel, lambda sid: small_panel.surveys[sid].survey_year))
        in_window = [(w, c, a, y, d) for w, c, a, y, d in years
                     if WINDOW.contains(y)]
        assert rows.n.sum() == len(in_window)
        assert rows.k.sum() == sum(d for *_, d in in_window)

    def test_fertility_rows_exposures(self, small_panel):
        spec = simulator.fertility_truth_spec()
        region_index = {r: i for i, r in enumerate(small_panel.graph.regions)}
        rows = fertility_rows(small_panel, spec, WINDOW, region_index)
        # successes equal in-window births of FBH women
        fbh_ids = {w.woman_id for w in small_panel.women
                   if w.source_kind == "FBH"}
        births = sum(1 for c in small_panel.children
                     if c.woman_id in fbh_ids and WINDOW.contains(c.birth_year))
        assert rows.k.sum() == births
        assert np.all(rows.k <= rows.n)


@pytest.fixture(scope="module")
def narrow_panel():
    # mothers young enough that every birth year is inside the window
    cfg = ScenarioConfig(graph=grid_graph(4), window=WINDOW,
                         survey_year=2010, seed=13, n_fbh_per_region=30,
                         n_sbh_per_region=60, mother_age_range=(15, 34))
    return simulator.simulate_women(cfg)


class TestSbhArrays:
    def test_weights_and_cells(self, narrow_panel):
        degraded = simulator.degrade_to_sbh(narrow_panel)
        cells = tabulate_sbh(degraded)
        tb = simulator.tabulate_true_births(narrow_panel)
        region_index = {r: i for i, r in enumerate(degraded.graph.regions)}
        sy = lambda sid: degraded.surveys[sid].survey_year
        cw = sbh_cell_weights(cells, sy, region_index, true_births=tb)
        spec = simulator.mortality_truth_spec()
        arrays = sbh_arrays(cw, sy, region_index, spec, WINDOW)
        n = int(arrays.cell_valid.sum())
        assert n == len(cw)
        # total weighted births in the arrays match the tabulated truth
        assert np.isclose(arrays.row_w.sum(),
                          sum(v.sum() for v in tb.values()))
        # count vectors sum to the cohort age (one hazard draw per year)
        used = np.unique(arrays.row_q[:np.count_nonzero(arrays.row_w)])
        assert np.all(arrays.uq_cnt[used].sum(axis=1) >= 1)

    def test_survey_beyond_window_raises(self, narrow_panel):
        degraded = simulator.degrade_to_sbh(narrow_panel)
        cells = tabulate_sbh(degraded)
        tb = simulator.tabulate_true_births(narrow_panel)
        region_index = {r: i for i, r in enumerate(degraded.graph.regions)}
        sy = lambda sid: degraded.surveys[sid].survey_year
        cw = sbh_cell_weights(cells, sy, region_index, true_births=tb)
        spec = simulator.mortality_truth_spec()
        with pytest.raises(InferenceError, match="window"):
            sbh_arrays(cw, sy, region_index, spec, TimeWindow(1990, 2004))


# ---------------------------------------------------------------------------
# the bound posterior

def test_posterior_matches_bernoulli_loglik(small_panel):
    """With no random effects the objective is -loglik plus the fe priors."""
    spec = HazardModelSpec(kind="mortality",
                           intercept_classes=(0, 1, 1, 1, 1, 2),
                           rw2_classes=None, spatial=False, iid=None)
    region_index = {r: i for i, r in enumerate(small_panel.graph.regions)}
    bern = mortality_rows(small_panel, spec, WINDOW, region_index)
    model = build_hazard_model(spec, WINDOW, small_panel.graph, bern)
    beta = np.array([-1.6, -3.0, -5.0])
    value = neg_log_posterior(model, np.zeros(0), beta)
    # direct Bernoulli sum over the in-window child-years
    from sbhfuse.likelihoods import child_life_years
    q = 1.0 / (1.0 + np.exp(-beta))
    ll = 0.0
    for w, c, a, year, died in child_life_years(
            small_panel, lambda sid: small_panel.surveys[sid].survey_year):
        if not WINDOW.contains(year):
            continue
        p = q[spec.intercept_classes[min(a, 5)]]
        ll += math.log(p) if died else math.log1p(-p)
    prior = sum(log_hyperprior(HyperPrior(kind="normal", mean=0.0, sd=10.0), b)
                for b in beta)
    assert np.isclose(value, -ll - prior, rtol=1e-10)


def test_posterior_gradient_against_finite_differences(small_panel):
    spec = simulator.mortality_truth_spec()
    region_index = {r: i for i, r in enumerate(small_panel.graph.regions)}
    bern = mortality_rows(small_panel, spec, WINDOW, region_index)
    model = build_hazard_model(spec, WINDOW, small_panel.graph, bern)
    rng = np.random.default_rng(2)
    theta = rng.normal(0, 0.05, model.layout.dim_theta)
    beta = np.array([-1.6, -3.0, -5.0, 2.0, 3.0, 3.5])
    g = np.asarray(model.objective.grad_theta(theta, beta))
    h = 1e-6
    for i in rng.choice(model.layout.dim_theta, 5, replace=False):
        e = np.zeros_like(theta)
        e[i] = h
        fd = (model.objective.value(theta + e, beta)
              - model.objective.value(theta - e, beta)) / (2 * h)
        assert np.isclose(g[i], fd, rtol=1e-5, atol=1e-6)


# ---------------------------------------------------------------------------
# fitting and summaries (small scale, session fixtures)

@pytest.fixture(scope="module")
def small_fit(small_panel):
    degraded = simulator.degrade_to_sbh(small_panel)
    spec = simulator.mortality_truth_spec()
    return fit_mortality(degraded, spec, TimeWindow(1990, 2009),
                         strategy="fbh_only", seed=5, n_draws=400)


class TestFitMortality:
    def test_estimates_plausible(self, small_fit, small_scenario):
        exp_beta = np.exp(small_fit.beta_hat[:3])
        truth = np.exp(simulator.DEFAULT_BETAS)
        # loose sanity bounds at this sample size
        assert np.all(exp_beta > truth * 0.5)
        assert np.all(exp_beta < truth * 2.0)
        assert small_fit.q5_summary is not None
        med = small_fit.q5_summary["median"]
        assert med.shape == (4, 4, 2)
        assert np.all((med > 0) & (med < 1))

    def test_hyper_intervals_contain_estimates(self, small_fit):
        for name, iv in small_fit.hyper_intervals.items():
            assert iv["lower"] <= iv["estimate"] <= iv["upper"]

    def test_draws_deterministic(self, small_fit):
        d1 = draw_posterior(small_fit, 50, seed=99)
        d2 = draw_posterior(small_fit, 50, seed=99)
        assert np.array_equal(d1, d2)
        d3 = draw_posterior(small_fit, 50, seed=100)
        assert not np.array_equal(d1, d3)

    def test_q5_draws_at_mean_match_schedule(self, small_fit):
        draws = small_fit.joint_mean[None, :]
        q5d = q5_draws(small_fit, draws)
        sched = small_fit.mortality_schedule()
        for p, year in [(0, 1990), (3, 2005)]:
            for r in range(4):
                assert np.isclose(q5d[0, p, r, 0], q5(sched, year, r, 0))

    def test_unknown_strategy(self, small_panel):
        with pytest.raises(InferenceError, match="unknown strategy"):
            fit_mortality(small_panel, simulator.mortality_truth_spec(),
                          WINDOW, strategy="bogus")

    def test_strategy_needs_inputs(self, small_panel):
        spec = simulator.mortality_truth_spec()
        with pytest.raises(InferenceError, match="true_births"):
            fit_mortality(small_panel, spec, WINDOW,
                          strategy="fbh_sbh_true_births")
        with pytest.raises(InferenceError, match="fertility"):
            fit_mortality(small_panel, spec, WINDOW,
                          strategy="fbh_sbh_true_shares")


def test_fit_fertility_recovers_bands(small_panel):
    spec = simulator.fertility_truth_spec()
    fit = fit_fertility(small_panel, spec, TimeWindow(1990, 2009), seed=1)
    est = 1.0 / (1.0 + np.exp(-fit.beta_hat[:5]))
    assert np.allclose(est, simulator.DEFAULT_BANDS, atol=0.03)


class TestSummaries:
    def test_summarize_q5_quantiles(self):
        rng = np.random.default_rng(0)
        q5d = rng.uniform(0.01, 0.5, size=(800, 2, 3, 2))
        s = summarize_q5(q5d)
        assert np.all(s["lower"] <= s["median"])
        assert np.all(s["median"] <= s["upper"])
        logit = np.log(q5d) - np.log1p(-q5d)
        assert np.allclose(s["sd_logit"], logit.std(axis=0, ddof=1))

    def test_aggregate_strata(self):
        q5d = np.zeros((10, 2, 3, 2))
        q5d[..., 0] = 0.2
        q5d[..., 1] = 0.1
        comb = aggregate_strata(q5d, np.array([0.0, 0.5, 1.0]))
        assert np.allclose(comb[:, :, 0], 0.2)
        assert np.allclose(comb[:, :, 1], 0.15)
        assert np.allclose(comb[:, :, 2], 0.1)

    def test_aggregate_strata_validation(self):
        q5d = np.zeros((10, 2, 3, 2))
        with pytest.raises(InferenceError, match="required"):
            aggregate_strata(q5d, None)
        with pytest.raises(InferenceError, match="proportions"):
            aggregate_strata(q5d, np.array([0.5, 1.5, 0.2]))
        with pytest.raises(InferenceError, match="shape"):
            aggregate_strata(q5d, np.array([0.5, 0.5]))
