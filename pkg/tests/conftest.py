import sys
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from psmdid.panel import (
    MacroCovariates,
    PanelDataset,
    VariableDescriptor,
    load_covariates,
    load_panel_wide,
)

REPO = Path(__file__).resolve().parent.parent
DATA = REPO / "data"
SNAPSHOT = DATA / "snapshot.csv.gz"
COVARIATES = DATA / "macro_covariates.csv"
BENCHMARK_CFG = DATA / "benchmark.cfg"


def make_covariates(rng=None, scale=1.0):
    """One plausible covariate record, optionally jittered."""
    jitter = (lambda: 1.0) if rng is None else (lambda: float(rng.uniform(0.7, 1.4)))
    return MacroCovariates(
        population=8e6 * scale * jitter(),
        population_density=100.0 * jitter(),
        aged_65_older=18.0 * jitter(),
        gdp_per_capita=30000.0 * jitter(),
        cardiovasc_death_rate=250.0 * jitter(),
        diabetes_prevalence=6.0 * jitter(),
        hospital_beds_per_thousand=4.0 * jitter(),
        life_expectancy=79.0 * jitter() ** 0.1,
        human_development_index=min(0.98, 0.85 * jitter() ** 0.1),
    )


def toy_panel(n_countries=4, n_days=90, start=date(2021, 1, 1), seed=0,
              schema=None, fill=None):
    """Small dense panel for unit tests."""
    rng = np.random.default_rng(seed)
    if schema is None:
        schema = [
            VariableDescriptor("C3", "events", 0, 2),
            VariableDescriptor("NCSM", "cases", 0, float("inf")),
            VariableDescriptor("R", "rate", 0, float("inf")),
        ]
    countries = [f"A{i:02d}" for i in range(n_countries)]
    dates = [start + timedelta(days=k) for k in range(n_days)]
    values = {}
    for var in schema:
        if fill is not None and var.name in fill:
            values[var.name] = np.array(fill[var.name], dtype=float)
        elif np.isfinite(var.max_allowed):
            values[var.name] = rng.integers(
                int(var.min_allowed), int(var.max_allowed) + 1,
                size=(n_countries, n_days)).astype(float)
        else:
            values[var.name] = rng.uniform(50, 150, size=(n_countries, n_days))
    return PanelDataset(countries=countries, dates=dates, variables=schema, values=values)


@pytest.fixture(scope="session")
def snapshot_panel():
    if not SNAPSHOT.exists():
        pytest.fail(f"pinned snapshot missing: {SNAPSHOT}")
    return load_panel_wide(SNAPSHOT)


@pytest.fixture(scope="session")
def snapshot_covariates():
    if not COVARIATES.exists():
        pytest.fail(f"covariates fixture missing: {COVARIATES}")
    return load_covariates(COVARIATES)
