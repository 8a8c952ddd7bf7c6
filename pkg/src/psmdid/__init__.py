"""Policy evaluation on epidemic panel data.

Pipeline: detect outbreak anchors in a reproduction-rate stream, split
countries into treatment/control by policy intensity, match on propensity
scores over macro covariates, and estimate the piecewise-linear
difference-in-differences effect with its containment ratio.
"""

from .changepoint import (
    ChangePoint,
    DetectorConfig,
    OutbreakPoint,
    detect,
    filter_rising,
    mann_whitney_split,
    promote_outbreaks,
)
from .did import (
    DidDesign,
    DidFit,
    build_design,
    containment_ratio,
    design_from_groups,
    fit_ols,
    fitted_lines,
)
from .panel import (
    MacroCovariates,
    PanelDataset,
    VariableDescriptor,
    Window,
    OXCGRT_SCHEMA,
    center_by_date,
    correlation_matrix,
    extract_window,
    impute_forward,
    load_covariates,
    load_panel,
    load_panel_wide,
    save_panel,
    summarize,
)
from .pipeline import (
    EvaluationConfig,
    GridCell,
    default_threshold,
    rank_policies,
    render_table,
    run_grid,
)
from .psm import (
    BalanceReport,
    DegenerateSplit,
    MatchResult,
    PropensityModel,
    TreatmentAssignment,
    assign_treatment,
    balance_report,
    fit_propensity,
    optimal_pair_match,
    predict_propensity,
)
from .synth import SynthSpec, bias_study, generate

__version__ = "0.1.0"
