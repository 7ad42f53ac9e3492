"""Command-line front-end.

Subcommands::

    penmig fit             --data d.csv --model m.cfg --out results/
    penmig pem-fit         --data surv.csv --model m.cfg --cutpoints 0,5,15,25 --out results/
    penmig simulate        --replicates 10 --out sim/
    penmig shrinkage-study --out shrink/
    penmig mixing-study    --out mixing/

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 sampler failure (partial results are still written).
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .config import ConfigError, ModelConfig, parse_model_config, render_model_config
from .io import (
    DataError,
    check_writable,
    effect_curves,
    emit_results,
    ingest_csv,
    samples_frame,
    write_json,
)
from .model import Hyperparams, ModelError
from .sampler import SamplerConfig, SamplerError, run_chains
from .shrinkage import (
    CONTOUR_MODES,
    log_prior_contours,
    nmig_marginal_density,
    nmig_transition_curve,
    penmig_marginal_density,
)
from .simlab import ScenarioSpec, fit_scenario, generate_scenario, pem_expand
from .terms import TermError, TermSpec

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SAMPLER = 0, 1, 2, 3

logger = logging.getLogger("penmig")


class UsageError(Exception):
    """Bad invocation; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_sampler_args(p, iters=5000, burnin=500, chains=8):
    g = p.add_argument_group("sampler")
    g.add_argument("--chains", type=_positive_int, default=chains)
    g.add_argument("--iters", type=_positive_int, default=iters, help="post burn-in iterations")
    g.add_argument("--burnin", type=_nonneg_int, default=burnin)
    g.add_argument("--thin", type=_positive_int, default=5)
    g.add_argument("--jobs", type=_positive_int, default=1, help="parallel chain processes")


def _add_hyper_args(p):
    g = p.add_argument_group("prior (overrides the model file)")
    g.add_argument("--v0", type=float)
    g.add_argument("--atau", type=float)
    g.add_argument("--btau", type=float)
    g.add_argument("--aw", type=float)
    g.add_argument("--bw", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="penmig", description="peNMIG spike-and-slab function selection")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = sub.add_parser("fit", help="fit a model to a CSV file")
    fit.add_argument("--data", required=True)
    fit.add_argument("--model", required=True, help="model configuration file")
    fit.add_argument("--out", required=True)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--preprocess", choices=["none", "uci"], default="none")
    fit.add_argument("--ci-level", type=float, default=0.8)
    _add_sampler_args(fit)
    _add_hyper_args(fit)

    pem = sub.add_parser("pem-fit", help="piecewise exponential survival model")
    pem.add_argument("--data", required=True)
    pem.add_argument("--model", required=True)
    pem.add_argument("--out", required=True)
    pem.add_argument("--cutpoints", type=_float_list, required=True)
    pem.add_argument("--time-col", default="time")
    pem.add_argument("--event-col", default="event")
    pem.add_argument("--seed", type=int, default=0)
    pem.add_argument("--preprocess", choices=["none", "uci"], default="none")
    pem.add_argument("--ci-level", type=float, default=0.8)
    _add_sampler_args(pem)
    _add_hyper_args(pem)

    sim = sub.add_parser("simulate", help="simulation replicates with selection metrics")
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int, default=0, help="first replicate seed")
    sim.add_argument("--replicates", type=_positive_int, default=10)
    sim.add_argument("--family", choices=["gaussian", "poisson"], default="gaussian")
    sim.add_argument("--sparsity", choices=["low", "high"], default="high")
    sim.add_argument("--correlation", choices=["iid_uniform", "ar1"], default="iid_uniform")
    sim.add_argument("--rho", type=float, default=0.7)
    sim.add_argument("--n", type=_positive_int, default=200)
    sim.add_argument("--snr", type=float, default=5.0)
    sim.add_argument("--no-overdispersion", action="store_true")
    sim.add_argument("--concurvity", type=_float_list, help="scenario,c e.g. 1,0.6")
    sim.add_argument("--write-data", action="store_true", help="also write training sets")
    _add_sampler_args(sim, iters=2000, burnin=500, chains=4)
    _add_hyper_args(sim)

    shr = sub.add_parser("shrinkage-study", help="marginal prior densities and contours")
    shr.add_argument("--out", required=True)
    shr.add_argument("--grid-size", type=_positive_int, default=301)
    shr.add_argument("--range", type=float, default=3.0, dest="half_width")
    shr.add_argument("--modes", default=",".join(CONTOUR_MODES))
    shr.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    _add_hyper_args(shr)

    mix = sub.add_parser("mixing-study", help="NMIG indicator transition curves")
    mix.add_argument("--out", required=True)
    mix.add_argument("--dims", type=_int_list, default=[1, 5, 20])
    mix.add_argument("--quantiles", type=_float_list, default=[0.1, 0.5, 0.9])
    mix.add_argument("--ratio-max", type=float, default=3.0)
    mix.add_argument("--n-ratios", type=_positive_int, default=301)
    mix.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    _add_hyper_args(mix)
    return parser


# ---------------------------------------------------------------------------


def _hyper(args, base: Hyperparams) -> Hyperparams:
    values = base.as_dict()
    for flag, name in (("v0", "v0"), ("atau", "a_tau"), ("btau", "b_tau"), ("aw", "a_w"), ("bw", "b_w")):
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            return Hyperparams(**values)
    except ModelError as exc:
        raise UsageError(str(exc)) from None


def _sampler_config(args) -> SamplerConfig:
    try:
        return SamplerConfig(
            n_chains=args.chains,
            burn_in=args.burnin,
            iterations=args.iters,
            thin=args.thin,
            seed=args.seed,
            n_jobs=args.jobs,
            ci_level=getattr(args, "ci_level", 0.8),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _read_model(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read model file {path}: {exc.strerror or exc}") from None


def _prepare_out(path) -> Path:
    try:
        check_writable(path)
    except OSError as exc:
        raise UsageError(str(exc)) from None
    return Path(path)


def _fit_and_emit(args, cfg: ModelConfig, data: pd.DataFrame, log: list, extra: dict) -> int:
    spec = cfg.build(data)
    config = _sampler_config(args)
    chains, summary = run_chains(spec, config)
    for c in chains:
        log.append(("I_RUNTIME", f"chain {c.chain_id}: {c.runtime:.2f} s, {c.n_saved} draws"))
        for label, rate in c.acceptance.items():
            log.append(("I_ACCEPT", f"chain {c.chain_id}: {label} acceptance {rate:.3f}"))
        log.extend(c.warnings)
    out = dict(summary)
    if "pincl" in summary:
        out["pincl"] = dict(zip(spec.labels, summary["pincl"]))
    out["config"] = {
        "model": render_model_config(cfg),
        "sampler": config.as_dict(),
        "hyper": cfg.hyper.as_dict(),
        "data": str(args.data),
        "n": spec.n,
        **extra,
    }
    table, meta = samples_frame(spec, chains)
    meta["config"] = out["config"]
    plots = {f"effect_{k}": v for k, v in effect_curves(spec, chains, data, config.ci_level).items()}
    emit_results(args.out, out, table, meta, plots, log)
    failed = [c.chain_id for c in chains if c.failed]
    if failed:
        logger.error("chains %s failed; partial results written to %s", failed, args.out)
        return EXIT_SAMPLER
    return EXIT_OK


def cmd_fit(args) -> int:
    text = _read_model(args.model)
    _prepare_out(args.out)
    cfg = parse_model_config(text)
    pre = None if args.preprocess == "none" else args.preprocess
    exclude = [cfg.response] + ([cfg.offset] if cfg.offset else [])
    data, report = ingest_csv(args.data, preprocess=pre, exclude=exclude)
    cfg = parse_model_config(text, columns=list(data.columns))
    cfg.hyper = _hyper(args, cfg.hyper)
    log = [("I_INGEST", s) for s in report.steps]
    log.append(("I_INGEST", f"{report.n_rows_read} rows read, {report.n_rows_dropped} dropped"))
    extra = {"preprocess": args.preprocess, "rows_dropped": report.n_rows_dropped}
    return _fit_and_emit(args, cfg, data, log, extra)


def cmd_pem_fit(args) -> int:
    text = _read_model(args.model)
    _prepare_out(args.out)
    cuts = np.asarray(args.cutpoints, dtype=float)
    cfg = parse_model_config(text)
    pre = None if args.preprocess == "none" else args.preprocess
    data, report = ingest_csv(
        args.data, preprocess=pre, exclude=[args.time_col, args.event_col]
    )
    for col in (args.time_col, args.event_col):
        if col not in data.columns:
            raise DataError(f"column {col!r} not found in {args.data}")
    covs = data.drop(columns=[args.time_col, args.event_col])
    try:
        ds = pem_expand(data[args.time_col], data[args.event_col], cuts, covs)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    frame = ds.to_frame()
    log = [("I_INGEST", s) for s in report.steps]
    log.append(("I_PEM", f"{len(data)} subjects expanded to {ds.n_rows} pseudo-observations"))
    if cfg.response != "delta" or cfg.family != "poisson" or cfg.offset not in (None, "log_offset"):
        log.append(("I_PEM", "family, response and offset set to poisson, delta, log_offset"))
    cfg.family, cfg.response, cfg.offset = "poisson", "delta", "log_offset"
    if "interval" not in [c for t in cfg.terms for c in t.covariates]:
        # log-baseline: first-order random walk over the intervals
        cfg.terms = [TermSpec("baseline", "mrf", ["interval"], penalty_order=1)] + cfg.terms
    cfg = parse_model_config(render_model_config(cfg), columns=list(frame.columns))
    cfg.hyper = _hyper(args, cfg.hyper)
    extra = {"cutpoints": cuts.tolist(), "pseudo_observations": ds.n_rows}
    return _fit_and_emit(args, cfg, frame, log, extra)


def cmd_simulate(args) -> int:
    out = _prepare_out(args.out)
    hyper = _hyper(args, Hyperparams())
    concurvity = None
    if args.concurvity is not None:
        if len(args.concurvity) != 2:
            raise UsageError("--concurvity takes 'scenario,c'")
        concurvity = (int(args.concurvity[0]), args.concurvity[1])
    rows, reps, log = [], [], []
    failed = False
    for r in range(args.replicates):
        seed = args.seed + r
        try:
            scen = ScenarioSpec(
                family=args.family,
                sparsity=args.sparsity,
                correlation=args.correlation,
                rho=args.rho,
                n=args.n,
                snr=args.snr,
                overdispersion=not args.no_overdispersion,
                concurvity=concurvity,
                replicate_seed=seed,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        config = SamplerConfig(
            n_chains=args.chains,
            burn_in=args.burnin,
            iterations=args.iters,
            thin=args.thin,
            seed=seed,
            n_jobs=args.jobs,
        )
        try:
            res = fit_scenario(scen, config, hyper=hyper)
        except ModelError as exc:
            log.append(("E_REPLICATE_FAILED", f"replicate {seed}: {exc}"))
            failed = True
            continue
        for wn in res["summary"]["warnings"]:
            log.append((wn[0], f"replicate {seed}: {wn[1]}"))
        m = res["metrics"]
        rows.append({"replicate": seed, **m, "mse_eta": res["mse_eta"]})
        for lab, truth, p, g in zip(res["labels"], res["truth"], res["pincl"], res["gamma_fraction"]):
            reps.append(
                {"replicate": seed, "block": lab, "truth": bool(truth), "pincl": p, "gamma_fraction": g}
            )
        log.append(("I_REPLICATE", f"replicate {seed}: accuracy {m['accuracy']:.3f}"))
        if args.write_data:
            train, _ = generate_scenario(scen)
            (out / "data").mkdir(exist_ok=True)
            train.to_csv(out / "data" / f"train_{seed}.csv", index=False, float_format="%.17g")
    metrics = pd.DataFrame(rows)
    summary = {
        "scenario": {k: v for k, v in scen.as_dict().items() if k != "replicate_seed"},
        "replicate_seeds": [int(s) for s in metrics.get("replicate", [])],
        "mean": {k: float(metrics[k].mean()) for k in metrics.columns if k != "replicate"}
        if len(metrics)
        else {},
        "replicates": rows,
        "config": {"sampler": config.as_dict(), "hyper": hyper.as_dict()},
    }
    manifest = {
        "scenario": summary["scenario"],
        "seeds": [args.seed + r for r in range(args.replicates)],
        "truth": generate_scenario(scen)[0].attrs["truth"],
    }
    emit_results(
        out,
        summary,
        plotdata={"metrics": metrics, "inclusion": pd.DataFrame(reps)},
        log=log,
    )
    write_json(out / "manifest.json", manifest)
    return EXIT_SAMPLER if failed else EXIT_OK


def cmd_shrinkage(args) -> int:
    out = _prepare_out(args.out)
    # defaults of the contour figure: a_tau = 5, b_tau = 50, v0 = 0.005
    hyper = _hyper(args, Hyperparams(a_tau=5.0, b_tau=50.0, v0=0.005))
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in CONTOUR_MODES]
    if bad:
        raise UsageError(f"unknown contour modes {bad}; expected {CONTOUR_MODES}")
    h = args.half_width
    if not h > 0:
        raise UsageError("--range must be positive")
    grid = np.linspace(-h, h, args.grid_size)
    beta = grid[grid > 0]
    marg = penmig_marginal_density(beta, hyper)
    plots = {
        "marginal_density": pd.DataFrame(
            {
                "beta": beta,
                "penmig": np.exp(marg.log_density),
                "nmig": nmig_marginal_density(beta, hyper),
            }
        )
    }
    b1, b2 = np.meshgrid(grid, grid, indexing="ij")
    for mode in modes:
        lp = log_prior_contours(grid, hyper, mode)
        plots[f"contours_{mode}"] = pd.DataFrame(
            {"beta1": b1.ravel(), "beta2": b2.ravel(), "log_density": lp.ravel()}
        )
    summary = {
        "hyper": hyper.as_dict(),
        "normalization": marg.normalization,
        "grid": {"half_width": h, "size": args.grid_size},
        "modes": modes,
    }
    emit_results(out, summary, plotdata=plots, log=[("I_SHRINKAGE", f"{len(modes)} contour grids")])
    return EXIT_OK


def cmd_mixing(args) -> int:
    out = _prepare_out(args.out)
    hyper = _hyper(args, Hyperparams(a_tau=5.0, b_tau=50.0))
    if any(d < 1 for d in args.dims):
        raise UsageError("--dims must be positive")
    if any(not 0 < q < 1 for q in args.quantiles):
        raise UsageError("--quantiles must lie in (0, 1)")
    ratio = np.linspace(0.0, args.ratio_max, args.n_ratios)
    rows = []
    thresholds = {}
    for d in args.dims:
        for g0, g_name in ((1.0, "1"), (hyper.v0, "v0")):
            for q in args.quantiles:
                p1 = nmig_transition_curve(d, g0, q, ratio, hyper)
                rows.append(
                    pd.DataFrame(
                        {"d": d, "gamma0": g_name, "quantile": q, "ratio": ratio,
                         "p_gamma1": p1, "p_gamma_v0": 1 - p1}
                    )
                )
                cross = ratio[np.argmax(p1 >= 0.5)] if np.any(p1 >= 0.5) else None
                thresholds[f"d={d},gamma0={g_name},q={q}"] = cross
    table = pd.concat(rows, ignore_index=True)
    summary = {
        "hyper": hyper.as_dict(),
        "dims": args.dims,
        "quantiles": args.quantiles,
        "ratio_at_p_half": thresholds,
    }
    emit_results(out, summary, plotdata={"transition_curves": table},
                 log=[("I_MIXING", f"{len(rows)} curves")])
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "pem-fit": cmd_pem_fit,
    "simulate": cmd_simulate,
    "shrinkage-study": cmd_shrinkage,
    "mixing-study": cmd_mixing,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"penmig: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ModelError, TermError) as exc:
        print(f"penmig: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SamplerError as exc:
        print(f"penmig: sampler failure: {exc}", file=sys.stderr)
        return EXIT_SAMPLER
    except OSError as exc:
        print(f"penmig: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
