"""Batch command line interface.

Subcommands: ``simulate`` (scenario to panel + truth files), ``fit`` (panel to
estimate tables), ``brass`` (summary tabulations to indirect estimates),
``oracle`` (exact vs approximate likelihood comparison tables), and
``report`` (join estimates with truth into plot-ready tables).  Every run
directory gets a ``run.yaml`` with the config hash, seed, and schema version
so outputs are traceable.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, brass, inference, likelihoods, simulator
from .data_model import load_panel, write_panel
from .hazards import (FERTILITY_BAND_CLASSES, MORTALITY_INTERCEPT_CLASSES,
                      MORTALITY_RW2_CLASSES, FertilitySchedule,
                      HazardModelSpec, HazardParams, TimeWindow)
from .priors import HyperPrior
from .simulator import ScenarioConfig, grid_graph

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class CliError(SystemExit):
    def __init__(self, message):
        super().__init__(f"error: {message}")


def _setup_logging():
    level = os.environ.get("SBHFUSE_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_stamp(outdir: Path, args, config_paths) -> None:
    stamp = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "configs": {str(p): _sha256(p) for p in config_paths if p},
    }
    with open(outdir / "run.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(stamp, fh, sort_keys=False)


def _load_yaml(path):
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise CliError(f"{path}: expected a mapping at the top level")
    return doc


def _window_from(doc, where) -> TimeWindow:
    try:
        w = doc["window"]
        return TimeWindow(int(w["start_year"]), int(w["end_year"]),
                          int(w.get("period_length", 5)))
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{where}: bad or missing window: {exc}")


# ---------------------------------------------------------------------------
# simulate

def _scenario_from_yaml(path, seed_override=None) -> ScenarioConfig:
    doc = _load_yaml(path)
    window = _window_from(doc, path)
    if "graph" in doc:
        from .data_model import load_region_graph
        graph = load_region_graph(Path(path).parent / doc["graph"])
    else:
        graph = grid_graph(int(doc.get("regions", 47)))
    seed = seed_override if seed_override is not None else doc.get("seed")
    if seed is None:
        raise CliError(f"{path}: a seed is required (set 'seed' or --seed)")
    kwargs = {}
    if "mortality_betas_exp" in doc:
        kwargs["mortality_betas"] = tuple(
            float(np.log(v)) for v in doc["mortality_betas_exp"])
    elif "mortality_betas" in doc:
        kwargs["mortality_betas"] = tuple(map(float, doc["mortality_betas"]))
    if "fertility_bands" in doc:
        kwargs["fertility_bands"] = tuple(map(float, doc["fertility_bands"]))
    if "phi" in doc:
        kwargs["phi"] = np.asarray(doc["phi"], dtype=float)
    for key in ("n_fbh_per_region", "n_sbh_per_region", "fbh_survey_year"):
        if key in doc:
            kwargs[key] = int(doc[key])
    for key in ("kappa_S", "kappa_eps", "urban_fraction"):
        if key in doc:
            kwargs[key] = float(doc[key])
    try:
        return ScenarioConfig(graph=graph, window=window,
                              survey_year=int(doc["survey_year"]),
                              seed=int(seed), **kwargs)
    except (KeyError, ValueError) as exc:
        raise CliError(f"{path}: {exc}")


def cmd_simulate(args) -> int:
    config = _scenario_from_yaml(args.scenario, args.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    panel = simulator.simulate_women(config)
    true_births = simulator.tabulate_true_births(panel)
    degraded = simulator.degrade_to_sbh(panel)
    write_panel(degraded, outdir / "fbh.csv", outdir / "sbh.csv",
                outdir / "graph.txt", outdir / "surveys.yaml")
    _write_truth_births(true_births, outdir / "truth_births.csv")
    q5 = simulator.true_q5_surface(config)
    with open(outdir / "truth_q5.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["region", "period", "q5"])
        for p in range(q5.shape[0]):
            for r, rid in enumerate(config.graph.regions):
                wr.writerow([rid, config.window.period_label(p),
                             f"{q5[p, r]:.8f}"])
    mspec, mpar, fspec, fpar = simulator.truth_params(config)
    truth = {
        "mortality_betas": [float(b) for b in mpar.intercepts],
        "fertility_bands": [float(b) for b in config.fertility_bands],
        "phi": np.asarray(mpar.phi).tolist(),
        "S": np.asarray(mpar.S).tolist(),
        "eps": np.asarray(mpar.eps).tolist(),
        "kappa_S": config.kappa_S,
        "kappa_eps": config.kappa_eps,
    }
    with open(outdir / "truth_params.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(truth, fh, sort_keys=False)
    _write_run_stamp(outdir, args, [args.scenario])
    log.info("wrote panel and truth files to %s", outdir)
    return 0


def _write_truth_births(true_births: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["survey_id", "region", "stratum", "mother_age_at_survey",
                     "years_before_survey", "births"])
        for (sid, region, stratum, m_s), vec in sorted(true_births.items()):
            for a, b in enumerate(vec):
                if b:
                    wr.writerow([sid, region, stratum, m_s, a, int(b)])


def _read_truth_births(path) -> dict:
    out: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            key = (row["survey_id"], row["region"], row["stratum"],
                   int(row["mother_age_at_survey"]))
            vec = out.setdefault(key, np.zeros(key[3] + 1))
            vec[int(row["years_before_survey"])] = float(row["births"])
    return out


# ---------------------------------------------------------------------------
# fit

def _hyperprior_from(doc) -> HyperPrior:
    kind = doc.get("kind")
    if kind == "pc":
        return HyperPrior(kind="pc", u=float(doc["u"]),
                          alpha=float(doc["alpha"]))
    if kind == "gamma":
        return HyperPrior(kind="gamma", shape=float(doc["shape"]),
                          scale=float(doc["scale"]))
    if kind == "normal":
        return HyperPrior(kind="normal", mean=float(doc.get("mean", 0.0)),
                          sd=float(doc["sd"]))
    raise CliError(f"unknown prior kind {kind!r}")


def _spec_from_yaml(doc, kind, hiv=None) -> HazardModelSpec:
    defaults = {
        "intercept_classes": list(MORTALITY_INTERCEPT_CLASSES),
        "rw2_classes": list(MORTALITY_RW2_CLASSES),
        "urban_effect": False,
        "sbh_bias": False,
        "spatial": True,
        "iid": "region",
    }
    merged = {**defaults, **(doc or {})}
    priors = {name: _hyperprior_from(p)
              for name, p in (merged.pop("priors", None) or {}).items()}
    rw2 = merged["rw2_classes"]
    return HazardModelSpec(
        kind=kind,
        intercept_classes=tuple(merged["intercept_classes"]),
        rw2_classes=None if rw2 is None else tuple(rw2),
        urban_effect=bool(merged["urban_effect"]),
        sbh_bias=bool(merged["sbh_bias"]),
        spatial=bool(merged["spatial"]),
        iid=merged["iid"],
        hiv=hiv,
        priors=priors)


def _read_hiv_table(path, window: TimeWindow):
    if path is None:
        return None
    mult = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            mult[int(row["period"])] = float(row["multiplier"])
    missing = [p for p in range(window.n_periods) if p not in mult]
    if missing:
        raise CliError(f"HIV table missing periods {missing}")
    return tuple(mult[p] for p in range(window.n_periods))


def _read_urban_weights(path, regions):
    if path is None:
        return None
    w = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            w[row["region"]] = float(row["weight"])
    missing = [r for r in regions if r not in w]
    if missing:
        raise CliError(f"urban weights missing regions {missing}")
    return np.array([w[r] for r in regions])


def cmd_fit(args) -> int:
    doc = _load_yaml(args.model)
    window = _window_from(doc, args.model)
    panel = load_panel(args.fbh, args.sbh, args.graph, args.meta)
    hiv = _read_hiv_table(args.hiv_table, window)
    mort_spec = _spec_from_yaml(doc.get("mortality"), "mortality", hiv)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    fertility = None
    true_births = None
    fert_fit = None
    if args.strategy == "fbh_sbh_estimated_shares":
        fert_spec = _spec_from_yaml(
            doc.get("fertility",
                    {"intercept_classes": list(FERTILITY_BAND_CLASSES),
                     "rw2_classes": None, "spatial": False, "iid": None}),
            "fertility")
        fert_fit = inference.fit_fertility(panel, fert_spec, window,
                                           seed=args.seed)
        fertility = fert_fit.fertility_schedule()
    elif args.strategy == "fbh_sbh_true_shares":
        ft = doc.get("fertility_truth")
        if not ft or "bands" not in ft:
            raise CliError("strategy fbh_sbh_true_shares needs "
                           "fertility_truth.bands in the model config")
        bands = np.asarray(ft["bands"], dtype=float)
        fspec = simulator.fertility_truth_spec()
        fpar = HazardParams(intercepts=np.log(bands / (1.0 - bands)))
        fertility = FertilitySchedule.from_params(
            fspec, fpar, window, len(panel.graph.regions))
    elif args.strategy == "fbh_sbh_true_births":
        if args.truth_births is None:
            raise CliError("strategy fbh_sbh_true_births needs --truth-births")
        true_births = _read_truth_births(args.truth_births)

    fit = inference.fit_mortality(
        panel, mort_spec, window, strategy=args.strategy,
        fertility=fertility, true_births=true_births, seed=args.seed)

    _write_estimates(fit, outdir / "estimates.csv",
                     _read_urban_weights(args.urban_weights,
                                         panel.graph.regions))
    _write_hyperparameters(fit, outdir / "hyperparameters.csv")
    _write_fit_report(fit, fert_fit, outdir / "fit.yaml")
    np.savez_compressed(outdir / "draws.npz", draws=fit.draws,
                        q5=inference.q5_draws(fit, fit.draws))
    _write_run_stamp(outdir, args, [args.model])
    log.info("wrote estimates to %s", outdir)
    return 0


def _write_estimates(fit, path, urban_weights=None) -> None:
    s = fit.q5_summary
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["region", "period", "stratum", "q5_median",
                     "q5_sd_logit", "q5_lower", "q5_upper"])
        strata = ["rural", "urban"]
        for p in range(fit.window.n_periods):
            label = fit.window.period_label(p)
            for r, rid in enumerate(fit.regions):
                for si, stratum in enumerate(strata):
                    wr.writerow([rid, label, stratum,
                                 f"{s['median'][p, r, si]:.8f}",
                                 f"{s['sd_logit'][p, r, si]:.8f}",
                                 f"{s['lower'][p, r, si]:.8f}",
                                 f"{s['upper'][p, r, si]:.8f}"])
        if urban_weights is not None:
            q5d = inference.q5_draws(fit, fit.draws)
            comb = inference.aggregate_strata(q5d, urban_weights)
            med = np.median(comb, axis=0)
            lo = np.quantile(comb, 0.025, axis=0)
            hi = np.quantile(comb, 0.975, axis=0)
            sd = np.std(np.log(comb) - np.log1p(-comb), axis=0, ddof=1)
            for p in range(fit.window.n_periods):
                label = fit.window.period_label(p)
                for r, rid in enumerate(fit.regions):
                    wr.writerow([rid, label, "combined",
                                 f"{med[p, r]:.8f}", f"{sd[p, r]:.8f}",
                                 f"{lo[p, r]:.8f}", f"{hi[p, r]:.8f}"])


def _write_hyperparameters(fit, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["parameter", "estimate", "lower", "upper"])
        layout = fit.layout
        icsl = layout.beta_slices["intercepts"]
        for i in range(icsl.start, icsl.stop):
            se = float(np.sqrt(max(fit.cov_beta[i, i], 0.0)))
            b = fit.beta_hat[i]
            wr.writerow([f"exp_beta_{i - icsl.start}",
                         f"{np.exp(b):.6f}",
                         f"{np.exp(b - 1.96 * se):.6f}",
                         f"{np.exp(b + 1.96 * se):.6f}"])
        for name, iv in fit.hyper_intervals.items():
            wr.writerow([name, f"{iv['estimate']:.4f}", f"{iv['lower']:.4f}",
                         f"{iv['upper']:.4f}"])


def _write_fit_report(fit, fert_fit, path) -> None:
    doc = {
        "strategy": fit.strategy,
        "seed": fit.seed,
        "neg_log_marginal": float(fit.neg_log_marginal),
        "n_outer_evals": fit.n_outer_evals,
        "beta_hat": {name: np.asarray(
            fit.beta_hat[fit.layout.beta_slices[name]]).tolist()
            for name in fit.layout.beta_names},
        "hyper_intervals": fit.hyper_intervals,
    }
    if fert_fit is not None:
        doc["fertility"] = {
            "neg_log_marginal": float(fert_fit.neg_log_marginal),
            "band_odds": np.exp(fert_fit.beta_hat[
                fert_fit.layout.beta_slices["intercepts"]]).tolist(),
        }
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


# ---------------------------------------------------------------------------
# brass

def cmd_brass(args) -> int:
    table = brass.load_brass_table(args.table)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    if args.input:
        inp = brass.load_brass_input(args.input)
    else:
        from .data_model import tabulate_sbh
        panel = load_panel(None, args.sbh, args.graph, args.meta)
        inp = brass.brass_input_from_cells(tabulate_sbh(panel))
    est = brass.brass_pipeline(inp, table)
    brass.write_brass_estimate(est, outdir / "brass_estimates.csv")
    _write_run_stamp(outdir, args, [args.table])
    log.info("wrote Brass estimates to %s", outdir)
    return 0


# ---------------------------------------------------------------------------
# oracle

def cmd_oracle(args) -> int:
    """Compare the exact death-total law with its Poisson approximation.

    Uses a single-age-profile toy: T_B births spread over m_s + 1 birth
    slots with uniform shares and cohort death probabilities scaled by
    ``--q-scale`` factors.
    """
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    m_s = args.ms
    shares = np.ones(m_s + 1) / (m_s + 1)
    base = np.array([min(0.05 * a, 0.4) for a in range(m_s + 1)])
    with open(outdir / "oracle.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["q_scale", "total_born", "mean_exact", "mean_poisson",
                     "tv_distance"])
        for scale in args.q_scale:
            qstar = np.clip(base * scale, 0.0, 0.95)
            mu = args.tb * float(shares @ qstar)
            pmf = likelihoods.sbh_exact_mixture(args.tb, shares, qstar)
            tv = likelihoods.tv_distance_to_poisson(pmf, mu)
            wr.writerow([scale, args.tb,
                         f"{likelihoods.pmf_mean(pmf):.10f}", f"{mu:.10f}",
                         f"{tv:.10f}"])
    _write_run_stamp(outdir, args, [])
    log.info("wrote oracle comparison to %s", outdir)
    return 0


# ---------------------------------------------------------------------------
# report

def cmd_report(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    truth = {}
    if args.truth:
        with open(args.truth, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                truth[(row["region"], row["period"])] = float(row["q5"])
    n_cov = n_tot = 0
    with open(args.estimates, newline="", encoding="utf-8") as fh, \
            open(outdir / "report.csv", "w", newline="",
                 encoding="utf-8") as out:
        reader = csv.DictReader(fh)
        wr = csv.writer(out)
        wr.writerow(["region", "period", "stratum", "q5_median", "q5_sd_logit",
                     "q5_lower", "q5_upper", "q5_true", "covered"])
        for row in reader:
            key = (row["region"], row["period"])
            t = truth.get(key)
            covered = ""
            if t is not None and row["stratum"] == args.stratum:
                covered = int(float(row["q5_lower"]) <= t
                              <= float(row["q5_upper"]))
                n_cov += covered
                n_tot += 1
            wr.writerow([row["region"], row["period"], row["stratum"],
                         row["q5_median"], row["q5_sd_logit"],
                         row["q5_lower"], row["q5_upper"],
                         "" if t is None else f"{t:.8f}", covered])
    if n_tot:
        log.info("coverage: %d/%d (%.3f)", n_cov, n_tot, n_cov / n_tot)
        with open(outdir / "coverage.yaml", "w", encoding="utf-8") as fh:
            yaml.safe_dump({"covered": n_cov, "total": n_tot,
                            "fraction": n_cov / n_tot}, fh)
    _write_run_stamp(outdir, args, [])
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sbhfuse",
        description="small-area U5MR estimation from full and summary birth "
                    "histories")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic panel + truth")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the mortality model to a panel")
    p.add_argument("--fbh", required=True)
    p.add_argument("--sbh", default=None)
    p.add_argument("--graph", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", default="fbh_only",
                   choices=inference.STRATEGIES)
    p.add_argument("--truth-births", default=None)
    p.add_argument("--hiv-table", default=None)
    p.add_argument("--urban-weights", default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("brass", help="indirect estimates from summary totals")
    p.add_argument("--table", required=True)
    p.add_argument("--input", default=None,
                   help="age-group tabulation CSV (bypasses panel loading)")
    p.add_argument("--sbh", default=None)
    p.add_argument("--graph", default=None)
    p.add_argument("--meta", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_brass)

    p = sub.add_parser("oracle",
                       help="exact vs Poisson death-total comparison")
    p.add_argument("--tb", type=int, default=6)
    p.add_argument("--ms", type=int, default=6)
    p.add_argument("--q-scale", type=float, nargs="+",
                   default=[1.0, 0.1, 0.01])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="join estimates with truth")
    p.add_argument("--estimates", required=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--stratum", default="rural",
                   help="stratum compared against the truth surface")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.command == "brass" and not args.input:
        if not (args.sbh and args.graph and args.meta):
            raise CliError("brass needs either --input or --sbh/--graph/--meta")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
