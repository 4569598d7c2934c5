"""Spatial microsimulation: IPF reweighting, integerisation and fit metrics."""
from .ingest import (
    Bins,
    CategoryMap,
    Constraint,
    ConstraintSet,
    Indicator,
    SurveyMicrodata,
    build_indicator,
    load_category_map,
    load_constraints,
    load_survey,
)
from .integerise import (
    METHODS,
    IntegerisedZone,
    RunEnsemble,
    WeightDecomposition,
    decompose,
    integerise_weights,
    integerise_counterweight,
    integerise_pp,
    integerise_rounding,
    integerise_threshold,
    integerise_trs,
    run_ensemble,
)
from .ipf import FitTrace, WeightMatrix, aggregate, constrain, initialize_weights, ipf_run
from .metrics import FitReport, full_report, pearson_r, sae, tae, zm_cells, zm_summary

__version__ = "0.1.0"
