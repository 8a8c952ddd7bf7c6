"""Evaluation grid: every configured policy at every outbreak anchor.

Each (policy, anchor) cell runs the full chain -- treatment split,
propensity model, optimal pairing, matched piecewise-linear fit -- and the
grid is rendered as a three-line-per-cell text table plus flat records.
Cells with a degenerate or undersized split are reported as "/" (the
skip marker); unexpected per-cell failures are captured in the cell and
never abort the grid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd

from .changepoint import OutbreakPoint
from .did import DidFit, build_design, fit_ols
from .panel import (
    PanelDataset,
    POLICY_INDICATORS,
    extract_window,
    impute_forward,
    load_covariates,
    load_panel,
    load_panel_wide,
)
from .psm import (
    DegenerateSplit,
    assign_treatment,
    balance_report,
    fit_propensity,
    optimal_pair_match,
    predict_propensity,
)

__all__ = [
    "EvaluationConfig",
    "GridCell",
    "read_config",
    "load_panel_auto",
    "default_threshold",
    "run_grid",
    "render_table",
    "cells_to_frame",
    "cells_to_records",
    "rank_policies",
]

SKIP_MARK = "/"


def read_config(path) -> dict[str, str]:
    """Parse a plain-text key-value configuration file.

    One ``key = value`` pair per line; blank lines and ``#`` comments are
    ignored; later keys override earlier ones.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass
class EvaluationConfig:
    panel_path: str
    covariates_path: str
    policies: list[tuple[str, float | None]]
    anchors: list[OutbreakPoint]
    min_group_size: int = 3
    max_gap: int = 3
    outcome: str = "NCSM"
    caliper: float | None = None
    ridge: float = 1e-6
    panel_format: str = "auto"

    def __post_init__(self):
        if self.min_group_size < 1:
            raise ValueError("min_group_size must be >= 1")
        if not self.policies:
            raise ValueError("no policies configured")
        if not self.anchors:
            raise ValueError("no anchors configured")

    @classmethod
    def from_file(cls, path) -> "EvaluationConfig":
        raw = read_config(path)
        base = Path(path).parent

        def resolve(p):
            q = Path(p)
            return str(q if q.is_absolute() else base / q)

        policies = []
        for item in raw.get("policies", "").split(","):
            item = item.strip()
            if not item:
                continue
            if ":" in item:
                code, thr = item.split(":", 1)
                policies.append((code.strip(), float(thr)))
            else:
                policies.append((item, None))

        anchors = [
            OutbreakPoint(anchor_date=date.fromisoformat(d.strip()), source="configured")
            for d in raw.get("anchors", "").split(",") if d.strip()
        ]

        caliper = raw.get("caliper")
        return cls(
            panel_path=resolve(raw["panel"]),
            covariates_path=resolve(raw["covariates"]),
            policies=policies,
            anchors=anchors,
            min_group_size=int(raw.get("min_group_size", 3)),
            max_gap=int(raw.get("max_gap", 3)),
            outcome=raw.get("outcome", "NCSM"),
            caliper=float(caliper) if caliper else None,
            ridge=float(raw.get("ridge", 1e-6)),
            panel_format=raw.get("panel_format", "auto"),
        )


def load_panel_auto(path, panel_format: str = "auto") -> PanelDataset:
    """Load long or wide panel CSV, sniffing the header when format is auto."""
    if panel_format == "long":
        return load_panel(path)
    if panel_format == "wide":
        return load_panel_wide(path)
    header = pd.read_csv(path, nrows=0).columns
    if {"country", "date", "variable", "value"} <= set(header):
        return load_panel(path)
    return load_panel_wide(path)


def default_threshold(ds: PanelDataset, policy: str, anchors) -> float:
    """Fallback split threshold: floor of the cross-country median of the
    policy's values pooled over the anchor dates (one fixed value for all
    anchors, so the split criterion is consistent across them)."""
    values = []
    for anchor in anchors:
        d = anchor.anchor_date if isinstance(anchor, OutbreakPoint) else anchor
        j = ds.date_position(d)
        col = ds.values[policy][:, j]
        values.extend(col[np.isfinite(col)].tolist())
    if not values:
        raise ValueError(f"no observed values of {policy} at the anchor dates")
    return float(math.floor(float(np.median(values))))


@dataclass
class GridCell:
    policy: str
    anchor: date
    status: str                      # "fit" | "skipped" | "error"
    reason: str = ""
    threshold: float | None = None
    n_control: int = 0
    n_treated: int = 0
    n_pairs: int = 0
    fit: DidFit | None = None
    artifacts: dict = field(default_factory=dict)

    @property
    def skipped(self) -> bool:
        return self.status == "skipped"


def _evaluate_cell(panel, covs, window, policy, anchor, threshold, cfg) -> GridCell:
    cell = GridCell(policy=policy, anchor=anchor, status="fit", threshold=threshold)
    try:
        assignment = assign_treatment(
            panel, covs, policy, anchor, threshold, eligible=window.countries,
        )
    except DegenerateSplit as exc:
        cell.status = "skipped"
        cell.reason = f"degenerate split ({exc.n_treated} treated, {exc.n_control} control)"
        return cell

    cell.n_control = len(assignment.control)
    cell.n_treated = len(assignment.treated)
    if min(cell.n_control, cell.n_treated) < cfg.min_group_size:
        cell.status = "skipped"
        cell.reason = (
            f"group below minimum size {cfg.min_group_size} "
            f"({cell.n_treated} treated, {cell.n_control} control)"
        )
        return cell

    try:
        data = [(covs[c], assignment.label(c)) for c in assignment.countries]
        model = fit_propensity(data, ridge=cfg.ridge)
        scores = {c: predict_propensity(model, covs[c]) for c in assignment.countries}
        result = optimal_pair_match(assignment, scores, caliper=cfg.caliper)
        fit = fit_ols(build_design(window, result))
        # numerical self-check on every accepted fit
        ortho = fit.diagnostics["residual_orthogonality"]
        scale = max(fit.diagnostics["xty_scale"], 1e-12)
        if ortho > 1e-7 * scale:
            raise RuntimeError(f"fit failed the residual-orthogonality check ({ortho:.2e})")
    except Exception as exc:  # captured in the cell, the grid moves on
        cell.status = "error"
        cell.reason = str(exc)
        return cell

    cell.n_pairs = len(result.pairs)
    cell.fit = fit
    cell.artifacts = {
        "assignment": assignment,
        "model": model,
        "scores": scores,
        "match": result,
        "balance": balance_report(assignment, covs, result),
    }
    return cell


def run_grid(cfg: EvaluationConfig, panel=None, covariates=None) -> list[GridCell]:
    """Evaluate every (policy, anchor) cell; deterministic given inputs.

    Degenerate or undersized splits become "/" cells; any other per-cell
    failure is captured as an error cell. The cell list always has
    len(policies) * len(anchors) entries in configuration order.
    """
    if panel is None:
        panel = load_panel_auto(cfg.panel_path, cfg.panel_format)
    if covariates is None:
        covariates = load_covariates(cfg.covariates_path)

    known = set(panel.variable_names)
    for code, _ in cfg.policies:
        if code not in known:
            raise ValueError(f"policy {code} not in panel schema")
    if cfg.outcome not in known:
        raise ValueError(f"outcome variable {cfg.outcome} not in panel schema")

    panel = impute_forward(panel, cfg.max_gap, variables=[
        v for v in POLICY_INDICATORS if v in known
    ])

    windows = {}
    for anchor in cfg.anchors:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            windows[anchor.anchor_date] = extract_window(panel, anchor.anchor_date, cfg.outcome)

    cells = []
    for code, threshold in cfg.policies:
        thr = threshold if threshold is not None else default_threshold(panel, code, cfg.anchors)
        for anchor in cfg.anchors:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                cells.append(_evaluate_cell(
                    panel, covariates, windows[anchor.anchor_date],
                    code, anchor.anchor_date, thr, cfg,
                ))
    return cells


def _cell_lines(cell: GridCell) -> list[str]:
    if cell.status == "skipped":
        return [SKIP_MARK, "", ""]
    if cell.status == "error":
        return ["error", "", ""]
    f = cell.fit
    effect = f"{f.beta[4]:.4f}{f.stars[4]}"
    se = f"({f.se[4]:.4f})"
    cr = f"{f.cr:.2f}%" if f.cr is not None else "n/a"
    return [effect, se, cr]


def render_table(cells: list[GridCell]) -> str:
    """Three-line-per-cell text table (effect+stars / (se) / CR%)."""
    policies = list(dict.fromkeys(c.policy for c in cells))
    anchors = list(dict.fromkeys(c.anchor for c in cells))
    by_key = {(c.policy, c.anchor): c for c in cells}

    grid = {
        p: {a: _cell_lines(by_key[(p, a)]) for a in anchors}
        for p in policies
    }
    widths = {}
    for a in anchors:
        w = len(a.isoformat())
        for p in policies:
            w = max(w, *(len(s) for s in grid[p][a]))
        widths[a] = w
    pol_w = max(6, *(len(p) for p in policies))

    def fmt_row(label, parts):
        return (label.ljust(pol_w) + " | "
                + " | ".join(s.center(widths[a]) for a, s in zip(anchors, parts)))

    lines = [fmt_row("policy", [a.isoformat() for a in anchors])]
    sep = "-" * len(lines[0])
    lines.append(sep)
    for p in policies:
        for row in range(3):
            label = p if row == 0 else ""
            lines.append(fmt_row(label, [grid[p][a][row] for a in anchors]))
        lines.append(sep)
    return "\n".join(lines) + "\n"


def cells_to_records(cells: list[GridCell]) -> list[dict]:
    """Flat machine-readable records, one per cell, in grid order."""
    records = []
    for c in cells:
        rec = {
            "policy": c.policy,
            "anchor": c.anchor.isoformat(),
            "status": c.status,
            "reason": c.reason,
            "threshold": c.threshold,
            "n_control": c.n_control,
            "n_treated": c.n_treated,
            "n_pairs": c.n_pairs,
        }
        if c.fit is not None:
            f = c.fit
            rec.update({
                "n_obs": f.n,
                "beta": [float(b) for b in f.beta],
                "se": [float(s) for s in f.se],
                "t": [float(t) for t in f.t_stats],
                "p": [float(p) for p in f.p_values],
                "stars": f.stars[4],
                "beta4": float(f.beta[4]),
                "se4": float(f.se[4]),
                "p4": float(f.p_values[4]),
                "cr": None if f.cr is None else float(f.cr),
                "cr_note": f.cr_note,
                "residual_orthogonality": f.diagnostics.get("residual_orthogonality"),
            })
        records.append(rec)
    return records


def cells_to_frame(cells: list[GridCell]) -> pd.DataFrame:
    cols = ["policy", "anchor", "status", "reason", "threshold",
            "n_control", "n_treated", "n_pairs", "beta4", "se4", "p4", "stars", "cr"]
    rows = []
    for rec in cells_to_records(cells):
        rows.append({k: rec.get(k) for k in cols})
    return pd.DataFrame(rows, columns=cols)


def rank_policies(cells: list[GridCell]) -> list[tuple[str, float]]:
    """Policies ordered by mean containment ratio over their fitted cells.

    Skipped and errored cells are excluded from the mean, as are fits with
    an undefined ratio; policies with nothing left are dropped. Descending
    mean, ties broken alphabetically.
    """
    buckets: dict[str, list[float]] = {}
    for c in cells:
        buckets.setdefault(c.policy, [])
        if c.status == "fit" and c.fit is not None and c.fit.cr is not None:
            buckets[c.policy].append(c.fit.cr)
    ranking = [
        (policy, float(np.mean(values)))
        for policy, values in buckets.items() if values
    ]
    ranking.sort(key=lambda item: (-item[1], item[0]))
    return ranking
