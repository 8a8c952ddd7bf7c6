"""Country-level panel of policy indicators and epidemic outcomes.

The panel is a rectangular (country x date x variable) store backed by dense
numpy arrays, one array per variable, with NaN marking missing cells. Data
arrives either as long-format CSV (``country,date,variable,value``, the
canonical layout) or as wide-format CSV (one column per variable).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "VariableDescriptor",
    "PanelDataset",
    "MacroCovariates",
    "Window",
    "OXCGRT_SCHEMA",
    "COVARIATE_NAMES",
    "POLICY_INDICATORS",
    "load_panel",
    "load_panel_wide",
    "save_panel",
    "load_covariates",
    "impute_forward",
    "summarize",
    "correlation_matrix",
    "extract_window",
    "center_by_date",
]


@dataclass(frozen=True)
class VariableDescriptor:
    """Declared panel variable with its admissible value range."""

    name: str
    description: str
    min_allowed: float
    max_allowed: float

    def __post_init__(self):
        if self.min_allowed > self.max_allowed:
            raise ValueError(
                f"{self.name}: min_allowed {self.min_allowed} exceeds "
                f"max_allowed {self.max_allowed}"
            )


# OxCGRT-style indicator schema plus composite indices and outcome series.
OXCGRT_SCHEMA: list[VariableDescriptor] = [
    VariableDescriptor("C1", "Closings of schools and universities", 0, 3),
    VariableDescriptor("C2", "Closings of workplaces", 0, 3),
    VariableDescriptor("C3", "Canceling public events", 0, 2),
    VariableDescriptor("C4", "Limits on gatherings", 0, 4),
    VariableDescriptor("C5", "Closing of public transport", 0, 2),
    VariableDescriptor("C6", "Requirements of staying at home", 0, 3),
    VariableDescriptor("C7", "Restrictions on internal movement", 0, 2),
    VariableDescriptor("C8", "Restrictions on international travel", 0, 4),
    VariableDescriptor("E1", "Income support", 0, 2),
    VariableDescriptor("E2", "Debt and contract relief", 0, 2),
    VariableDescriptor("H1", "Public information campaigns", 0, 2),
    VariableDescriptor("H2", "Testing policy", 0, 3),
    VariableDescriptor("H3", "Contact tracing", 0, 2),
    VariableDescriptor("H6", "Facial coverings", 0, 4),
    VariableDescriptor("H7", "Vaccination policy", 0, 5),
    VariableDescriptor("H8", "Protection of elderly people", 0, 3),
    VariableDescriptor("GRI", "Government response index", 0, 100),
    VariableDescriptor("SI", "Stringency index", 0, 100),
    VariableDescriptor("CHI", "Containment and health index", 0, 100),
    VariableDescriptor("ESI", "Economic support index", 0, 100),
    VariableDescriptor("NCSM", "New confirmed cases, 7-day smoothed, per million", 0, math.inf),
    VariableDescriptor("R", "Effective reproduction rate estimate", 0, math.inf),
]

# Indicators are step functions of announced policy and may be forward-filled;
# outcome series (NCSM, R) and the composite indices are never imputed.
POLICY_INDICATORS = [
    "C1", "C2", "C3", "C4", "C5", "C6", "C7", "C8",
    "E1", "E2", "H1", "H2", "H3", "H6", "H7", "H8",
]


@dataclass(frozen=True)
class MacroCovariates:
    """Country-level matching covariates."""

    population: float
    population_density: float
    aged_65_older: float
    gdp_per_capita: float
    cardiovasc_death_rate: float
    diabetes_prevalence: float
    hospital_beds_per_thousand: float
    life_expectancy: float
    human_development_index: float

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not value > 0:
                raise ValueError(f"covariate {name} must be strictly positive, got {value}")
        if not self.human_development_index <= 1:
            raise ValueError(
                f"human_development_index must lie in (0, 1], got {self.human_development_index}"
            )

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in COVARIATE_NAMES}

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in COVARIATE_NAMES], dtype=float)


COVARIATE_NAMES = [
    "population",
    "population_density",
    "aged_65_older",
    "gdp_per_capita",
    "cardiovasc_death_rate",
    "diabetes_prevalence",
    "hospital_beds_per_thousand",
    "life_expectancy",
    "human_development_index",
]


@dataclass
class PanelDataset:
    """Immutable country x date x variable panel.

    ``values`` maps each variable name to a dense (n_countries, n_dates)
    float array with NaN for missing cells, so every declared cell exists.
    """

    countries: list[str]
    dates: list[date]
    variables: list[VariableDescriptor]
    values: dict[str, np.ndarray]

    def __post_init__(self):
        self._country_index = {c: i for i, c in enumerate(self.countries)}
        self._date_index = {d: i for i, d in enumerate(self.dates)}
        self._validate()

    def _validate(self):
        if len(self._country_index) != len(self.countries):
            raise ValueError("duplicate country identifiers")
        for prev, nxt in zip(self.dates, self.dates[1:]):
            if (nxt - prev).days != 1:
                raise ValueError(
                    f"dates must be strictly increasing and daily: {prev} -> {nxt}"
                )
        shape = (len(self.countries), len(self.dates))
        for var in self.variables:
            arr = self.values.get(var.name)
            if arr is None or arr.shape != shape:
                raise ValueError(f"variable {var.name} missing dense value array {shape}")
            finite = arr[np.isfinite(arr)]
            if finite.size and (finite.min() < var.min_allowed or finite.max() > var.max_allowed):
                bad = np.argwhere(
                    np.isfinite(arr) & ((arr < var.min_allowed) | (arr > var.max_allowed))
                )[0]
                raise ValueError(
                    f"variable {var.name}: value {arr[bad[0], bad[1]]} for "
                    f"{self.countries[bad[0]]} on {self.dates[bad[1]]} outside "
                    f"[{var.min_allowed}, {var.max_allowed}]"
                )

    @property
    def variable_names(self) -> list[str]:
        return [v.name for v in self.variables]

    def descriptor(self, variable: str) -> VariableDescriptor:
        for v in self.variables:
            if v.name == variable:
                return v
        raise KeyError(f"unknown variable {variable!r}")

    def value(self, country: str, day: date, variable: str) -> float:
        """Single cell; NaN when missing."""
        return float(self.values[variable][self._country_index[country], self._date_index[day]])

    def series(self, country: str, variable: str) -> np.ndarray:
        return self.values[variable][self._country_index[country]].copy()

    def date_mean(self, variable: str) -> np.ndarray:
        """Cross-country mean per date, ignoring missing cells."""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmean(self.values[variable], axis=0)

    def has_date(self, day: date) -> bool:
        return day in self._date_index

    def date_position(self, day: date) -> int:
        return self._date_index[day]

    def country_position(self, country: str) -> int:
        return self._country_index[country]


def _schema_map(schema: Sequence[VariableDescriptor]) -> dict[str, VariableDescriptor]:
    return {v.name: v for v in schema}


def _parse_dates(column: pd.Series) -> list[date]:
    cache: dict[str, date] = {}
    out = []
    for raw in column:
        parsed = cache.get(raw)
        if parsed is None:
            try:
                parsed = date.fromisoformat(str(raw).strip())
            except ValueError as exc:
                raise ValueError(f"malformed date {raw!r}") from exc
            cache[raw] = parsed
        out.append(parsed)
    return out


def _assemble(
    frame: pd.DataFrame,
    schema: Sequence[VariableDescriptor],
) -> PanelDataset:
    """Build a PanelDataset from a long frame with country/date/variable/value."""
    by_name = _schema_map(schema)

    unknown = sorted(set(frame["variable"]) - set(by_name))
    if unknown:
        warnings.warn(f"ignoring unknown variables: {', '.join(unknown)}")
        frame = frame[~frame["variable"].isin(unknown)]

    countries = sorted(frame["country"].unique())
    days = sorted(frame["date"].unique())
    if not days:
        raise ValueError("no data rows")
    first, last = days[0], days[-1]
    dates = [first + timedelta(days=k) for k in range((last - first).days + 1)]
    date_pos = {d: i for i, d in enumerate(dates)}
    country_pos = {c: i for i, c in enumerate(countries)}

    shape = (len(countries), len(dates))
    values = {v.name: np.full(shape, np.nan) for v in schema}

    ci = frame["country"].map(country_pos).to_numpy()
    di = frame["date"].map(date_pos).to_numpy()
    for name, grp in frame.groupby("variable", sort=False):
        pos = grp.index.to_numpy()
        values[name][ci[pos], di[pos]] = grp["value"].to_numpy()

    # Bound check before constructing, so we can cite the offending row.
    for name, arr in values.items():
        desc = by_name[name]
        mask = np.isfinite(arr) & ((arr < desc.min_allowed) | (arr > desc.max_allowed))
        if mask.any():
            i, j = np.argwhere(mask)[0]
            raise ValueError(
                f"bound violation: {name}={arr[i, j]} for {countries[i]} on {dates[j]} "
                f"(allowed [{desc.min_allowed}, {desc.max_allowed}])"
            )

    return PanelDataset(countries=countries, dates=dates, variables=list(schema), values=values)


def load_panel(path, schema: Sequence[VariableDescriptor] | None = None) -> PanelDataset:
    """Load the canonical long-format CSV (``country,date,variable,value``).

    Blank values become missing cells; values outside a variable's declared
    bounds are fatal; columns not in the schema are dropped with a warning.
    """
    schema = list(OXCGRT_SCHEMA if schema is None else schema)
    try:
        frame = pd.read_csv(path, dtype={"country": str, "variable": str},
                            float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise ValueError("no data rows") from None
    required = {"country", "date", "variable", "value"}
    missing = required - set(frame.columns)
    if missing:
        raise ValueError(f"long-format panel requires columns {sorted(required)}; missing {sorted(missing)}")
    if frame.empty:
        raise ValueError("no data rows")
    frame["date"] = _parse_dates(frame["date"])
    frame["value"] = pd.to_numeric(frame["value"], errors="coerce")
    frame = frame[np.isfinite(frame["value"])]
    if frame.empty:
        raise ValueError("no data rows")
    return _assemble(frame.reset_index(drop=True), schema)


def load_panel_wide(path, schema: Sequence[VariableDescriptor] | None = None) -> PanelDataset:
    """Load a wide CSV: ``country,date`` plus one column per variable."""
    schema = list(OXCGRT_SCHEMA if schema is None else schema)
    try:
        frame = pd.read_csv(path, dtype={"country": str}, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise ValueError("no data rows") from None
    if "country" not in frame.columns or "date" not in frame.columns:
        raise ValueError("wide-format panel requires 'country' and 'date' columns")
    if frame.empty:
        raise ValueError("no data rows")
    frame["date"] = _parse_dates(frame["date"])

    known = {v.name for v in schema}
    var_cols = [c for c in frame.columns if c not in ("country", "date")]
    unknown = sorted(set(var_cols) - known)
    if unknown:
        warnings.warn(f"ignoring unknown variables: {', '.join(unknown)}")
        var_cols = [c for c in var_cols if c in known]

    long = frame.melt(
        id_vars=["country", "date"], value_vars=var_cols,
        var_name="variable", value_name="value",
    )
    long["value"] = pd.to_numeric(long["value"], errors="coerce")
    long = long[np.isfinite(long["value"])].reset_index(drop=True)
    if long.empty:
        raise ValueError("no data rows")
    return _assemble(long, schema)


def save_panel(ds: PanelDataset, path) -> None:
    """Serialize to the canonical long format; exact float round-trip."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("country,date,variable,value\n")
        for name in ds.variable_names:
            arr = ds.values[name]
            for i, country in enumerate(ds.countries):
                row = arr[i]
                for j, day in enumerate(ds.dates):
                    v = row[j]
                    if np.isfinite(v):
                        fh.write(f"{country},{day.isoformat()},{name},{float(v)!r}\n")


def load_covariates(path) -> dict[str, MacroCovariates]:
    """Read a covariates CSV (``country`` plus the nine covariate columns)."""
    frame = pd.read_csv(path, dtype={"country": str})
    missing = {"country", *COVARIATE_NAMES} - set(frame.columns)
    if missing:
        raise ValueError(f"covariates file missing columns: {sorted(missing)}")
    out: dict[str, MacroCovariates] = {}
    for _, row in frame.iterrows():
        out[row["country"]] = MacroCovariates(**{k: float(row[k]) for k in COVARIATE_NAMES})
    return out


def impute_forward(
    ds: PanelDataset,
    max_gap: int,
    variables: Iterable[str] | None = None,
) -> PanelDataset:
    """Forward-fill missing runs of length <= max_gap per (country, variable).

    Leading gaps have no predecessor and stay missing; runs longer than
    max_gap are preserved untouched. Returns a new dataset.
    """
    if max_gap < 0:
        raise ValueError("max_gap must be >= 0")
    names = list(variables) if variables is not None else ds.variable_names
    new_values = {k: v.copy() for k, v in ds.values.items()}
    for name in names:
        arr = new_values[name]
        for i in range(arr.shape[0]):
            row = arr[i]
            j = 0
            n = row.size
            while j < n:
                if np.isnan(row[j]):
                    start = j
                    while j < n and np.isnan(row[j]):
                        j += 1
                    run = j - start
                    if start > 0 and run <= max_gap:
                        row[start:j] = row[start - 1]
                else:
                    j += 1
    return PanelDataset(
        countries=list(ds.countries),
        dates=list(ds.dates),
        variables=list(ds.variables),
        values=new_values,
    )


def summarize(ds: PanelDataset) -> pd.DataFrame:
    """Per-variable moments over non-missing cells (sample sd, n-1 denominator).

    Variables with no observations get n=0 and NaN moments; a single
    observation leaves sd undefined (NaN).
    """
    if not ds.countries or not ds.dates:
        raise ValueError("dataset is empty")
    rows = []
    for name in ds.variable_names:
        arr = ds.values[name]
        obs = arr[np.isfinite(arr)]
        n = int(obs.size)
        if n == 0:
            rows.append({"variable": name, "mean": np.nan, "sd": np.nan,
                         "min": np.nan, "max": np.nan, "n": 0})
            continue
        rows.append({
            "variable": name,
            "mean": float(obs.mean()),
            "sd": float(obs.std(ddof=1)) if n > 1 else np.nan,
            "min": float(obs.min()),
            "max": float(obs.max()),
            "n": n,
        })
    return pd.DataFrame(rows, columns=["variable", "mean", "sd", "min", "max", "n"])


def correlation_matrix(ds: PanelDataset, variables: Sequence[str]) -> pd.DataFrame:
    """Pairwise-complete Pearson correlations between panel variables.

    Cells are pooled over all (country, date) pairs where both variables are
    observed. Constant variables get NaN in their row and column.
    """
    variables = list(variables)
    if len(variables) < 2:
        raise ValueError("need at least two variables")
    flat = {}
    for name in variables:
        flat[name] = ds.values[name].ravel()
    n_vars = len(variables)
    out = np.full((n_vars, n_vars), np.nan)
    for a in range(n_vars):
        xa = flat[variables[a]]
        for b in range(a, n_vars):
            xb = flat[variables[b]]
            mask = np.isfinite(xa) & np.isfinite(xb)
            if mask.sum() < 2:
                raise ValueError(
                    f"variables {variables[a]} and {variables[b]} share fewer than "
                    "2 paired observations"
                )
            va, vb = xa[mask], xb[mask]
            sa, sb = va.std(), vb.std()
            if sa == 0 or sb == 0:
                r = np.nan
            else:
                r = float(np.corrcoef(va, vb)[0, 1])
                r = min(1.0, max(-1.0, r))
            out[a, b] = r
            out[b, a] = r
    return pd.DataFrame(out, index=variables, columns=variables)


@dataclass
class Window:
    """A 60-day evaluation window: offsets 1..60, offset 30 = anchor date."""

    anchor_date: date
    countries: list[str]
    series: dict[str, np.ndarray]
    dropped: list[str] = field(default_factory=list)

    OFFSETS = np.arange(1, 61)
    T0 = 30

    def values(self, country: str) -> np.ndarray:
        return self.series[country]

    def offset_date(self, offset: int) -> date:
        return self.anchor_date + timedelta(days=offset - self.T0)


def extract_window(ds: PanelDataset, anchor: date, variable: str) -> Window:
    """60-day slice of one variable around an anchor date.

    Offsets 1..60 map to anchor-29 .. anchor+30. Countries with any missing
    value inside the window are dropped and reported in ``Window.dropped``.
    """
    lo = anchor - timedelta(days=29)
    hi = anchor + timedelta(days=30)
    if not (ds.has_date(lo) and ds.has_date(hi)):
        raise ValueError(
            f"anchor {anchor} needs data from {lo} through {hi}; panel covers "
            f"{ds.dates[0]} through {ds.dates[-1]}"
        )
    j0 = ds.date_position(lo)
    arr = ds.values[variable][:, j0:j0 + 60]
    kept, dropped, series = [], [], {}
    for i, country in enumerate(ds.countries):
        row = arr[i]
        if np.isfinite(row).all():
            kept.append(country)
            series[country] = row.copy()
        else:
            dropped.append(country)
    return Window(anchor_date=anchor, countries=kept, series=series, dropped=dropped)


def center_by_date(
    ds: PanelDataset,
    variable: str,
    countries: Sequence[str],
) -> pd.DataFrame:
    """Subtract the cross-country mean of ``variable`` from each date's row.

    Output rows sum to zero per date over the given countries (missing cells
    propagate as NaN and are excluded from the mean).
    """
    countries = list(countries)
    if len(countries) < 2:
        raise ValueError("need at least two countries")
    idx = [ds.country_position(c) for c in countries]
    arr = ds.values[variable][idx]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        centered = arr - np.nanmean(arr, axis=0, keepdims=True)
    return pd.DataFrame(centered.T, index=pd.Index(ds.dates, name="date"), columns=countries)
