"""Command-line front end.

Five subcommands: ``simulate`` draws synthetic panels with their ground
truth, ``fit`` runs maximum likelihood on a panel file, ``forecast``
produces scenario predictions from a fit document, ``select`` sweeps
latent-state counts by AIC, and ``benchmark`` compares the panel model
against the autoregression baselines over a settings grid. Outputs land
under ``--out`` as CSV tables and JSON documents, plus a ``manifest.json``
describing the run; given the same inputs and seed, outputs are
byte-identical across runs.

Exit codes: 0 success, 2 invalid inputs or configuration, 3 numeric
failure, 4 non-convergence (suppressed by ``--allow-partial``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import io
from .errors import (
    DegenerateWeights,
    DimensionMismatch,
    FileFormatError,
    InitFailed,
    LayoutMismatch,
    ModeDiverged,
    NonPSDInnovation,
    NotConverged,
    NotNested,
    RankDeficient,
    ScenarioIncomplete,
    SingularJointCovariance,
    UnknownGroup,
    UnsupportedValue,
    UntreatedGroup,
    ZeroPredVariance,
)
from .estimator import OptimConfig, cbcd_fit, lrt
from .model import Scenario, forecast, smoothed_states
from .simbench import (
    SimConfig,
    generate_dataset,
    make_sim_spec,
    replicate_estimation,
    replicate_prediction,
)

_VALIDATION_ERRORS = (
    FileFormatError, UnsupportedValue, LayoutMismatch, DimensionMismatch,
    ScenarioIncomplete, NotNested, UnknownGroup, UntreatedGroup,
    FileNotFoundError,
)
_NUMERIC_ERRORS = (
    NonPSDInnovation, SingularJointCovariance, ModeDiverged,
    DegenerateWeights, InitFailed, RankDeficient, ZeroPredVariance,
)

_SIM_CHANNELS = ("y1", "y2", "y3")
_SIM_COVARIATES = ("x1", "x2", "t")
_SWEEP_CELLS = ((1, 1), (0, 1), (1, 0), (1, 2), (2, 1))
_BENCH_METHODS = ("mrss", "var_individual", "var_pooled")
_BENCH_TABLES = ("coefficients", "prediction")
_TRUE_BETA = np.tile([1.0, 2.0, 0.03], (3, 1))


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        import numba
        numba.set_num_threads(args.threads)
    start = time.perf_counter()
    try:
        result = args.handler(args)
    except NotConverged as err:
        print(f"error: {err}", file=sys.stderr)
        return 4
    except _VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    io.write_manifest(
        args.out, command=args.command, config=result["config"],
        seed=result.get("seed"), inputs=result["inputs"],
        outputs=result["outputs"],
        wall_time=time.perf_counter() - start)
    return 0


# ----------------------------------------------------------------------
# argument plumbing
# ----------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrss",
        description="Mixed-response state-space panels: simulate, fit, "
                    "forecast, select, benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True,
                        help="output directory (created if absent)")
    common.add_argument("--seed", type=int, default=None,
                        help="override the configured seed")
    common.add_argument("--threads", type=int, default=None,
                        help="compiled-kernel thread count")

    opt = argparse.ArgumentParser(add_help=False)
    opt.add_argument("--opt-config", default=None,
                     help="optimizer configuration JSON")
    opt.add_argument("--tol", type=float, default=None,
                     help="override the convergence tolerance")
    opt.add_argument("--max-outer", type=int, default=None,
                     help="override the outer iteration cap")
    opt.add_argument("--is-samples", type=int, default=None,
                     help="importance samples for the final likelihood")

    p = sub.add_parser("simulate", parents=[common],
                       help="draw synthetic panels with ground truth")
    p.add_argument("--config", required=True,
                   help="simulation configuration JSON")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("fit", parents=[common, opt],
                       help="maximum-likelihood fit on a panel file")
    p.add_argument("--spec", required=True, help="model spec JSON")
    p.add_argument("--data", required=True, help="long-format panel CSV")
    p.add_argument("--lrt", default=None, metavar="NESTED_SPEC",
                   help="also fit this nested spec and test against it")
    p.add_argument("--allow-partial", action="store_true",
                   help="write the best parameters even without "
                        "convergence")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("forecast", parents=[common],
                       help="scenario predictions from a fit document")
    p.add_argument("--fit", required=True, help="fit document JSON")
    p.add_argument("--data", required=True, help="long-format panel CSV")
    p.add_argument("--scenario", default=None,
                   help="future indicators/covariates CSV")
    p.add_argument("--horizon", type=int, required=True,
                   help="grid steps past each subject's last record")
    p.add_argument("--treatment-effect", action="store_true",
                   help="also write treated-minus-untreated predictions")
    p.set_defaults(handler=cmd_forecast)

    p = sub.add_parser("select", parents=[common, opt],
                       help="AIC sweep over latent-state counts "
                            "(synthetic-panel layout)")
    p.add_argument("--data", required=True, help="long-format panel CSV")
    p.add_argument("--cells", nargs="+", default=None, metavar="B,V",
                   help="state-count cells, e.g. 1,1 0,1 2,1")
    p.set_defaults(handler=cmd_select)

    p = sub.add_parser("benchmark", parents=[common],
                       help="model vs autoregression error tables")
    p.add_argument("--config", required=True,
                   help="benchmark configuration JSON")
    p.set_defaults(handler=cmd_benchmark)
    return parser


def _optim_config(args, base: dict | None = None) -> OptimConfig:
    cfg = OptimConfig.from_dict(base or {})
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "tol", None) is not None:
        updates["tol"] = args.tol
    if getattr(args, "max_outer", None) is not None:
        updates["max_outer"] = args.max_outer
    if getattr(args, "is_samples", None) is not None:
        updates["n_final"] = args.is_samples
    return cfg.replace(**updates) if updates else cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return Path(path)


def _cell(v: float) -> str:
    return format(float(v), ".17g")


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_simulate(args) -> dict:
    config = io.sim_config_from_dict(io.read_json(args.config))
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    out = _out_dir(args)
    data = generate_dataset(config)

    outputs = io.write_panels(out / "sim", data.subjects,
                              channel_names=_SIM_CHANNELS,
                              covariate_names=_SIM_COVARIATES)
    state_names = ("b1", "v1")
    rows = [(s.subject_id, int(t), name, _cell(data.alpha[i, k, m]))
            for i, s in enumerate(data.subjects)
            for k, t in enumerate(s.times)
            for m, name in enumerate(state_names)]
    outputs.append(_write_csv(out / "sim_states.csv",
                              ["subject_id", "t", "state", "value"], rows))
    rows = [(s.subject_id, int(t), ch, _cell(data.mu[i, k, j]))
            for i, s in enumerate(data.subjects)
            for k, t in enumerate(s.times)
            for j, ch in enumerate(_SIM_CHANNELS)]
    outputs.append(_write_csv(out / "sim_signal.csv",
                              ["subject_id", "t", "channel", "value"],
                              rows))
    outputs.append(io.write_json(out / "sim_spec.json",
                                 io.spec_to_dict(make_sim_spec(1, 1))))
    return {"config": dataclasses.asdict(config), "seed": config.seed,
            "inputs": [args.config], "outputs": outputs}


def _read_spec_panels(spec_path, data_path):
    spec = io.spec_from_dict(io.read_json(spec_path))
    subjects = io.read_panels(
        data_path,
        channel_names=[c.name for c in spec.channels],
        covariate_names=spec.covariates,
        stream_names=spec.indicators)
    return spec, subjects


def cmd_fit(args) -> dict:
    spec, subjects = _read_spec_panels(args.spec, args.data)
    base = io.read_json(args.opt_config) if args.opt_config else {}
    cfg = _optim_config(args, base)
    out = _out_dir(args)
    inputs = [args.spec, args.data]
    if args.opt_config:
        inputs.append(args.opt_config)

    fit = _run_fit(spec, subjects, cfg, args.allow_partial)
    doc = io.fit_to_dict(fit, spec)
    doc["optimizer"] = cfg.to_dict()
    outputs = [io.write_json(out / "fit.json", doc)]

    rows = []
    for s in subjects:
        post = smoothed_states(spec, s, fit.psi_hat, kappa=cfg.kappa)
        for i, t in enumerate(post.times):
            for k, name in enumerate(post.state_names):
                rows.append((s.subject_id, int(t), name,
                             _cell(post.mean[i, k]),
                             _cell(post.var[i, k, k])))
    outputs.append(_write_csv(out / "states.csv",
                              ["subject_id", "t", "state", "mean", "var"],
                              rows))

    if args.lrt:
        nested_spec = io.spec_from_dict(io.read_json(args.lrt))
        nested_subjects = io.read_panels(
            args.data,
            channel_names=[c.name for c in nested_spec.channels],
            covariate_names=nested_spec.covariates,
            stream_names=nested_spec.indicators)
        nested = _run_fit(nested_spec, nested_subjects, cfg,
                          args.allow_partial)
        test = lrt(fit, nested)
        outputs.append(io.write_json(out / "lrt.json", {
            "statistic": test.statistic, "df": test.df,
            "p_value": test.p_value,
            "nested_loglik": nested.loglik, "full_loglik": fit.loglik}))
        inputs.append(args.lrt)

    return {"config": cfg.to_dict(), "seed": cfg.seed, "inputs": inputs,
            "outputs": outputs}


def _run_fit(spec, subjects, cfg, allow_partial):
    try:
        return cbcd_fit(spec, subjects, cfg)
    except NotConverged as err:
        if allow_partial:
            return err.result
        raise


def cmd_forecast(args) -> dict:
    if args.horizon < 1:
        raise UnsupportedValue("horizon must be at least 1")
    doc = io.read_json(args.fit)
    spec, psi, meta = io.fit_from_dict(doc)
    kappa = meta.get("optimizer", {}).get("kappa", 1e7)
    subjects = io.read_panels(
        args.data,
        channel_names=[c.name for c in spec.channels],
        covariate_names=spec.covariates,
        stream_names=spec.indicators)
    scenarios = {}
    inputs = [args.fit, args.data]
    if args.scenario:
        scenarios = io.read_scenarios(args.scenario, args.horizon,
                                      covariate_names=spec.covariates,
                                      stream_names=spec.indicators)
        inputs.append(args.scenario)

    out = _out_dir(args)
    header = ["subject_id", "t", "channel", "theta", "theta_se",
              "theta_lo", "theta_hi", "response", "response_lo",
              "response_hi"]
    rows, effect_rows = [], []
    for s in subjects:
        sc = scenarios.get(s.subject_id)
        fc = forecast(spec, s, psi, args.horizon, sc, kappa=kappa)
        for i, t in enumerate(fc.times):
            for j, ch in enumerate(fc.channel_names):
                rows.append((s.subject_id, int(t), ch,
                             *(map(_cell, (fc.theta[i, j],
                                           fc.theta_se[i, j],
                                           fc.theta_lo[i, j],
                                           fc.theta_hi[i, j],
                                           fc.response[i, j],
                                           fc.response_lo[i, j],
                                           fc.response_hi[i, j])))))
        if args.treatment_effect:
            effect_rows.extend(
                _effect_rows(spec, s, psi, args.horizon, sc, kappa))

    outputs = [_write_csv(out / "forecast.csv", header, rows)]
    if args.treatment_effect:
        outputs.append(_write_csv(
            out / "forecast_effect.csv",
            ["subject_id", "t", "channel", "effect", "theta_treated",
             "theta_untreated", "response_treated",
             "response_untreated"], effect_rows))
    return {"config": {"horizon": args.horizon,
                       "treatment_effect": bool(args.treatment_effect),
                       "kappa": kappa},
            "seed": meta.get("seed"), "inputs": inputs,
            "outputs": outputs}


def _effect_rows(spec, subj, psi, horizon, scenario, kappa):
    """Per-step treated vs untreated forecasts, all else shared."""
    base = scenario or Scenario()
    on = dataclasses.replace(base, treatment=np.ones(horizon))
    off = dataclasses.replace(base, treatment=np.zeros(horizon))
    fc1 = forecast(spec, subj, psi, horizon, on, kappa=kappa)
    fc0 = forecast(spec, subj, psi, horizon, off, kappa=kappa)
    rows = []
    for i, t in enumerate(fc1.times):
        for j, ch in enumerate(fc1.channel_names):
            rows.append((subj.subject_id, int(t), ch,
                         _cell(fc1.theta[i, j] - fc0.theta[i, j]),
                         _cell(fc1.theta[i, j]), _cell(fc0.theta[i, j]),
                         _cell(fc1.response[i, j]),
                         _cell(fc0.response[i, j])))
    return rows


def _parse_cells(texts):
    cells = []
    for text in texts:
        parts = text.split(",")
        try:
            pair = tuple(int(p) for p in parts)
        except ValueError:
            raise UnsupportedValue(
                f"cell {text!r} is not a B,V integer pair") from None
        if len(pair) != 2:
            raise UnsupportedValue(
                f"cell {text!r} is not a B,V integer pair")
        cells.append(pair)
    return tuple(cells)


def cmd_select(args) -> dict:
    cells = _parse_cells(args.cells) if args.cells else _SWEEP_CELLS
    subjects = io.read_panels(args.data,
                              channel_names=_SIM_CHANNELS,
                              covariate_names=_SIM_COVARIATES)
    base = io.read_json(args.opt_config) if args.opt_config else {}
    cfg = _optim_config(args, base)
    out = _out_dir(args)

    rows = []
    best = None
    for m_b, m_v in cells:
        spec = make_sim_spec(m_b, m_v)
        start = time.perf_counter()
        try:
            fit = cbcd_fit(spec, subjects, cfg)
            converged = True
        except NotConverged as err:
            fit, converged = err.result, False
        wall = time.perf_counter() - start
        rows.append((m_b, m_v, fit.n_params, _cell(fit.loglik),
                     _cell(fit.mc_se), _cell(fit.aic), int(converged),
                     fit.n_outer, _cell(wall)))
        if best is None or fit.aic < best[2]:
            best = (m_b, m_v, fit.aic)

    outputs = [
        _write_csv(out / "selection.csv",
                   ["m_b", "m_v", "n_params", "loglik", "mc_se", "aic",
                    "converged", "n_outer", "wall_time"], rows),
        io.write_json(out / "selected.json",
                      {"m_b": best[0], "m_v": best[1], "aic": best[2]}),
    ]
    inputs = [args.data]
    if args.opt_config:
        inputs.append(args.opt_config)
    return {"config": {"cells": [list(c) for c in cells],
                       "optimizer": cfg.to_dict()},
            "seed": cfg.seed, "inputs": inputs, "outputs": outputs}


def _benchmark_config(raw: dict) -> dict:
    allowed = ("n_subjects", "n_times", "p_treat", "reps", "seed",
               "split", "methods", "tables", "optimizer")
    extra = sorted(set(raw) - set(allowed))
    if extra:
        raise FileFormatError(
            f"benchmark config: unknown keys {extra}; "
            f"allowed: {sorted(allowed)}")
    for key in ("n_subjects", "n_times", "p_treat"):
        if key not in raw:
            raise FileFormatError(f"benchmark config: missing {key!r}")
    sizes = raw["n_subjects"]
    sizes = [sizes] if isinstance(sizes, int) else list(sizes)
    methods = tuple(raw.get("methods") or _BENCH_METHODS)
    unknown = sorted(set(methods) - set(_BENCH_METHODS))
    if unknown:
        raise UnsupportedValue(
            f"unknown benchmark methods {unknown}; "
            f"known: {list(_BENCH_METHODS)}")
    tables = tuple(raw.get("tables") or _BENCH_TABLES)
    unknown = sorted(set(tables) - set(_BENCH_TABLES))
    if unknown:
        raise UnsupportedValue(
            f"unknown benchmark tables {unknown}; "
            f"known: {list(_BENCH_TABLES)}")
    return {
        "sizes": sizes, "n_times": raw["n_times"],
        "p_treat": raw["p_treat"], "reps": int(raw.get("reps", 1)),
        "seed": int(raw.get("seed", 0)),
        "split": float(raw.get("split", 5.0 / 6.0)),
        "methods": methods, "tables": tables,
        "optimizer": dict(raw.get("optimizer") or {}),
    }


def cmd_benchmark(args) -> dict:
    cfg = _benchmark_config(io.read_json(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    opt = OptimConfig.from_dict(cfg["optimizer"])
    out = _out_dir(args)
    outputs = []

    pred_rows, beta_rows = [], []
    for n in cfg["sizes"]:
        for rep in range(cfg["reps"]):
            sim = SimConfig(n_subjects=n, n_times=cfg["n_times"],
                            p_treat=cfg["p_treat"],
                            seed=cfg["seed"] + rep, split=cfg["split"])
            if "prediction" in cfg["tables"]:
                res = replicate_prediction(sim, opt)
                for method in cfg["methods"]:
                    errs = res[method]
                    for j, ch in enumerate(_SIM_CHANNELS):
                        for window, arr in (("in", errs.in_sample),
                                            ("out", errs.out_sample)):
                            pred_rows.append({
                                "n_subjects": n,
                                "n_times": cfg["n_times"],
                                "p_treat": cfg["p_treat"], "rep": rep,
                                "method": method, "channel": ch,
                                "window": window, "mse": arr[j],
                                "n_clamped": errs.n_clamped,
                                "converged": int(res["converged"])})
            if "coefficients" in cfg["tables"]:
                res = replicate_estimation(sim, opt, cells=((1, 1),))
                rec = res["cells"][(1, 1)]
                for j, ch in enumerate(_SIM_CHANNELS):
                    for k, cov in enumerate(_SIM_COVARIATES):
                        beta_rows.append({
                            "n_subjects": n, "rep": rep, "channel": ch,
                            "covariate": cov,
                            "estimate": rec["beta"][j, k],
                            "sq_error": (rec["beta"][j, k]
                                         - _TRUE_BETA[j, k]) ** 2,
                            "converged": int(rec["converged"])})

    if "prediction" in cfg["tables"]:
        pred = pd.DataFrame(pred_rows)
        path = out / "prediction_errors.csv"
        pred.to_csv(path, index=False)
        outputs.append(path)
        summary = (pred.groupby(["n_subjects", "method", "channel",
                                 "window"], sort=True)["mse"]
                   .agg(mean_mse="mean", n_reps="size").reset_index())
        path = out / "prediction_summary.csv"
        summary.to_csv(path, index=False)
        outputs.append(path)

    if "coefficients" in cfg["tables"]:
        beta = pd.DataFrame(beta_rows)
        summary = (beta.groupby(["n_subjects", "channel", "covariate"],
                                sort=True)
                   .agg(mse=("sq_error", "mean"),
                        mean_estimate=("estimate", "mean"),
                        n_reps=("estimate", "size")).reset_index())
        path = out / "coefficient_mse.csv"
        summary.to_csv(path, index=False)
        outputs.append(path)

    manifest_cfg = dict(cfg)
    manifest_cfg["methods"] = list(cfg["methods"])
    manifest_cfg["tables"] = list(cfg["tables"])
    return {"config": manifest_cfg, "seed": cfg["seed"],
            "inputs": [args.config], "outputs": outputs}


if __name__ == "__main__":
    sys.exit(main())
