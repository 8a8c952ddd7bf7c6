"""Command-line interface.

Every subcommand reads a plain-text key-value configuration file
(``--config``) and writes its outputs under ``--out``. Exit codes: 0 on
success, 1 on fatal input errors, 2 when an evaluation grid completes but
contains at least one errored cell.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd

from .changepoint import DetectorConfig, detect, filter_rising, promote_outbreaks
from .did import design_from_groups, fit_ols, fitted_lines
from .panel import (
    Window,
    correlation_matrix,
    extract_window,
    load_covariates,
    summarize,
)
from .pipeline import (
    EvaluationConfig,
    cells_to_frame,
    cells_to_records,
    load_panel_auto,
    rank_policies,
    read_config,
    render_table,
    run_grid,
)
from .psm import assign_treatment, balance_report, fit_propensity, optimal_pair_match, \
    predict_propensity, propensity_histogram
from .synth import SynthSpec, bias_study, generate


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_window_csv(window: Window, path: Path) -> None:
    rows = []
    for country in window.countries:
        vals = window.series[country]
        for off in range(1, 61):
            rows.append({
                "country": country,
                "offset": off,
                "date": window.offset_date(off).isoformat(),
                "value": vals[off - 1],
            })
    pd.DataFrame(rows).to_csv(path, index=False)


def _read_window_csv(path) -> Window:
    frame = pd.read_csv(path, dtype={"country": str})
    needed = {"country", "offset", "date", "value"}
    if not needed <= set(frame.columns):
        raise ValueError(f"window CSV needs columns {sorted(needed)}")
    series = {}
    anchor = None
    for country, grp in frame.groupby("country"):
        grp = grp.sort_values("offset")
        if list(grp["offset"]) != list(range(1, 61)):
            raise ValueError(f"window for {country} must cover offsets 1..60")
        series[country] = grp["value"].to_numpy(dtype=float)
        anchor = date.fromisoformat(str(grp.loc[grp["offset"] == 30, "date"].iloc[0]))
    if not series:
        raise ValueError("window CSV has no rows")
    return Window(anchor_date=anchor, countries=sorted(series), series=series)


def cmd_ingest(args) -> int:
    cfg = read_config(args.config)
    base = Path(args.config).parent
    panel = load_panel_auto(_resolve(cfg["panel"], base), cfg.get("panel_format", "auto"))
    out = _outdir(args)

    stats = summarize(panel)
    stats.to_csv(out / "summary.csv", index=False)
    print(stats.to_string(index=False))

    variables = [v.strip() for v in cfg.get("correlation_variables", "").split(",") if v.strip()]
    if not variables:
        variables = [
            v for v in panel.variable_names
            if v not in ("NCSM", "R") and int(np.isfinite(panel.values[v]).sum()) >= 2
        ]
    if len(variables) >= 2:
        corr = correlation_matrix(panel, variables)
        corr.to_csv(out / "correlation.csv")

    if "covariates" in cfg:
        covs = load_covariates(_resolve(cfg["covariates"], base))
        top = sorted(covs, key=lambda c: -covs[c].population)[:10]
        from .panel import center_by_date
        centered = center_by_date(panel, cfg.get("outcome", "NCSM"), top)
        centered.to_csv(out / "centered_cases.csv")
    print(f"wrote outputs under {out}")
    return 0


def _resolve(p, base: Path) -> str:
    q = Path(p)
    return str(q if q.is_absolute() else base / q)


def _aggregate_rate(cfg: dict, base: Path):
    """Series for detection: a date,value CSV or the panel's cross-country mean."""
    if "series" in cfg:
        frame = pd.read_csv(_resolve(cfg["series"], base))
        if not {"date", "value"} <= set(frame.columns):
            raise ValueError("series CSV needs 'date' and 'value' columns")
        dates = [date.fromisoformat(str(d)) for d in frame["date"]]
        return frame["value"].to_numpy(dtype=float), dates, None
    panel = load_panel_auto(_resolve(cfg["panel"], base), cfg.get("panel_format", "auto"))
    variable = cfg.get("rate_variable", "R")
    values = panel.date_mean(variable)
    mask = np.isfinite(values)
    dates = [d for d, ok in zip(panel.dates, mask) if ok]
    return values[mask], dates, panel


def cmd_changepoints(args) -> int:
    cfg = read_config(args.config)
    base = Path(args.config).parent
    series, dates, panel = _aggregate_rate(cfg, base)
    det = DetectorConfig(
        arl0=int(cfg.get("arl0", 500)),
        warmup=int(cfg.get("warmup", 20)),
        restart=cfg.get("restart", "true").lower() != "false",
    )
    points = detect(series, det, dates=dates)
    out = _outdir(args)
    pd.DataFrame([
        {"index": p.index, "date": p.date.isoformat(), "direction": p.direction,
         "statistic": p.statistic}
        for p in points
    ]).to_csv(out / "changepoints.csv", index=False)

    rising = filter_rising(points, series)
    print(f"{len(points)} change points detected, {len(rising)} rising")

    if rising:
        if panel is not None:
            ncsm = panel.date_mean(cfg.get("outcome", "NCSM"))
            # promotion ranks by case growth, aligned to the detection dates
            pos = {d: i for i, d in enumerate(panel.dates)}
            ncsm_aligned = np.array([ncsm[pos[d]] for d in dates])
        else:
            ncsm_aligned = np.asarray(series)
        anchors = promote_outbreaks(rising, ncsm_aligned, int(cfg.get("max_anchors", 3)))
        pd.DataFrame([
            {"anchor_date": a.anchor_date.isoformat(), "source": a.source, "index": a.index}
            for a in anchors
        ]).to_csv(out / "outbreaks.csv", index=False)
        for a in anchors:
            print(f"outbreak anchor: {a.anchor_date}")
    return 0


def cmd_match(args) -> int:
    cfg = read_config(args.config)
    base = Path(args.config).parent
    panel = load_panel_auto(_resolve(cfg["panel"], base), cfg.get("panel_format", "auto"))
    covs = load_covariates(_resolve(cfg["covariates"], base))
    anchor = date.fromisoformat(cfg["anchor"])
    policy = cfg["policy"]
    threshold = float(cfg["threshold"])
    outcome = cfg.get("outcome", "NCSM")

    window = extract_window(panel, anchor, outcome)
    assignment = assign_treatment(panel, covs, policy, anchor, threshold,
                                  eligible=window.countries)
    data = [(covs[c], assignment.label(c)) for c in assignment.countries]
    model = fit_propensity(data, ridge=float(cfg.get("ridge", 1e-6)))
    scores = {c: predict_propensity(model, covs[c]) for c in assignment.countries}
    caliper = cfg.get("caliper")
    result = optimal_pair_match(assignment, scores,
                                caliper=float(caliper) if caliper else None)

    out = _outdir(args)
    pd.DataFrame(
        [{"control": c, "treated": t, "distance": d} for c, t, d in result.pairs]
    ).to_csv(out / "pairs.csv", index=False)
    balance_report(assignment, covs, result).to_frame().to_csv(out / "balance.csv", index=False)
    propensity_histogram(scores, assignment).to_csv(out / "propensity_hist.csv", index=False)
    _write_window_csv(window, out / "window.csv")
    print(f"{policy} at {anchor}: {len(assignment.control)} control, "
          f"{len(assignment.treated)} treated, {len(result.pairs)} pairs")
    return 0


def cmd_did(args) -> int:
    cfg = read_config(args.config)
    base = Path(args.config).parent
    pairs = pd.read_csv(_resolve(cfg["pairs"], base), dtype=str)
    if not {"control", "treated"} <= set(pairs.columns):
        raise ValueError("pairs CSV needs 'control' and 'treated' columns")
    window = _read_window_csv(_resolve(cfg["window"], base))

    design = design_from_groups(window, list(pairs["control"]), list(pairs["treated"]))
    fit = fit_ols(design)

    out = _outdir(args)
    record = {
        "beta": [float(b) for b in fit.beta],
        "se": [float(s) for s in fit.se],
        "t": [float(t) for t in fit.t_stats],
        "p": [float(p) for p in fit.p_values],
        "stars": fit.stars,
        "cr": None if fit.cr is None else float(fit.cr),
        "cr_note": fit.cr_note,
        "n": fit.n,
    }
    (out / "fit.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    fitted_lines(fit).to_csv(out / "fitted_lines.csv", index=False)
    cr_text = f"{fit.cr:.2f}%" if fit.cr is not None else fit.cr_note
    print(f"effect {fit.beta[4]:.4f}{fit.stars[4]} (se {fit.se[4]:.4f}), CR {cr_text}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = EvaluationConfig.from_file(args.config)
    panel = load_panel_auto(cfg.panel_path, cfg.panel_format)
    covs = load_covariates(cfg.covariates_path)
    cells = run_grid(cfg, panel=panel, covariates=covs)

    out = _outdir(args)
    text = render_table(cells)
    (out / "report.txt").write_text(text)
    cells_to_frame(cells).to_csv(out / "report.csv", index=False)
    records = {
        "anchors": [a.anchor_date.isoformat() for a in cfg.anchors],
        "policies": [p for p, _ in cfg.policies],
        "cells": cells_to_records(cells),
        "ranking": [{"policy": p, "mean_cr": cr} for p, cr in rank_policies(cells)],
    }
    (out / "report.json").write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")

    # figure data: correlations over indicators, centered cases, per-cell artifacts
    indicator_vars = [
        v for v in panel.variable_names
        if v not in ("NCSM", "R") and int(np.isfinite(panel.values[v]).sum()) >= 2
    ]
    if len(indicator_vars) >= 2:
        correlation_matrix(panel, indicator_vars).to_csv(out / "correlation.csv")
    top = sorted(covs, key=lambda c: -covs[c].population)[:10]
    from .panel import center_by_date
    if len(top) >= 2:
        center_by_date(panel, cfg.outcome, top).to_csv(out / "centered_cases.csv")

    cells_dir = out / "cells"
    cells_dir.mkdir(exist_ok=True)
    for cell in cells:
        if cell.status != "fit":
            continue
        tag = f"{cell.policy}_{cell.anchor.isoformat()}"
        arts = cell.artifacts
        pd.DataFrame(
            [{"control": c, "treated": t, "distance": d} for c, t, d in arts["match"].pairs]
        ).to_csv(cells_dir / f"{tag}_pairs.csv", index=False)
        arts["balance"].to_frame().to_csv(cells_dir / f"{tag}_balance.csv", index=False)
        propensity_histogram(arts["scores"], arts["assignment"]).to_csv(
            cells_dir / f"{tag}_propensity_hist.csv", index=False)
        fitted_lines(cell.fit).to_csv(cells_dir / f"{tag}_fitted_lines.csv", index=False)

    print(text)
    ranking = rank_policies(cells)
    if ranking:
        print("mean containment ratio ranking:")
        for policy, cr in ranking:
            print(f"  {policy}: {cr:.2f}%")

    errored = [c for c in cells if c.status == "error"]
    for cell in errored:
        print(f"cell {cell.policy}/{cell.anchor} failed: {cell.reason}", file=sys.stderr)
    return 2 if errored else 0


def cmd_simulate(args) -> int:
    cfg = read_config(args.config)
    beta = tuple(float(cfg.get(f"beta{i}", d)) for i, d in enumerate((50.0, 1.5, 5.0, 2.5, -2.0)))
    spec = SynthSpec(
        n_control=int(cfg.get("n_control", 10)),
        n_treated=int(cfg.get("n_treated", 20)),
        true_beta=beta,
        noise_sd=float(cfg.get("noise_sd", 1.0)),
        confounding_strength=float(cfg.get("confounding_strength", 0.0)),
        covariate_effect=float(cfg.get("covariate_effect", 0.0)),
        seed=int(cfg.get("seed", 0)),
    )
    out = _outdir(args)
    window, covs, assignment = generate(spec)
    _write_window_csv(window, out / "synthetic_window.csv")
    pd.DataFrame(
        [{"country": c, **covs[c].as_dict()} for c in sorted(covs)]
    ).to_csv(out / "synthetic_covariates.csv", index=False)
    pd.DataFrame(
        [{"country": c, "treated": assignment.label(c)} for c in assignment.countries]
    ).to_csv(out / "synthetic_assignment.csv", index=False)

    replications = int(cfg.get("replications", 200))
    table = bias_study(spec, replications)
    table.to_csv(out / "bias_study.csv", index=False)
    print(table.to_string(index=False))
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "changepoints": cmd_changepoints,
    "match": cmd_match,
    "did": cmd_did,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="psmdid",
        description="Policy evaluation on epidemic panels via matched difference-in-differences",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True, help="key=value configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(handler=fn)
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
