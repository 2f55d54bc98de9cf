"""Calibrated ensemble estimation of mean potential outcomes with auxiliary data."""
from .data import (AuxDataset, LearnerKind, LearnerSpec, MainDataset, StudyConfig,
                   ValidationError, WorkingFunction, load_aux_csv, load_main_csv,
                   validate_study)
from .el import ConvexHullViolation, ELError, ELSolution, RankDeficiency, solve_el
from .estimators import (bootstrap_inference, cml, cmlib, cross_fit_estimate,
                         integration_scores, integration_theta)
from .learners import assemble_candidates, fit_cm, fit_ps, predict

__version__ = "0.1.0"

__all__ = [
    "AuxDataset", "ConvexHullViolation", "ELError", "ELSolution", "LearnerKind",
    "LearnerSpec", "MainDataset", "RankDeficiency", "StudyConfig", "ValidationError",
    "WorkingFunction", "assemble_candidates", "bootstrap_inference", "cml", "cmlib",
    "cross_fit_estimate", "fit_cm", "fit_ps", "integration_scores", "integration_theta",
    "load_aux_csv", "load_main_csv", "predict", "solve_el", "validate_study",
]
