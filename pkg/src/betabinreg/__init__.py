"""Beta-binomial regression for differential abundance and variability of microbiome counts."""

from .batch import BatchResult, CountTable, bh_adjust, fdr_curve, filter_taxa, run_batch, test_taxon
from .bootstrap import RngStream, pb_lr_test, pb_tests, pb_wald_test, sample_beta_binomial
from .inference import (
    SingularInformationError,
    TestResult,
    detect_separation,
    fit_pair,
    lr_test,
    lrt_uninformative,
    observed_information,
    wald_test,
)
from .model import Dataset, DesignPair, EvaluationError, Theta, evaluate, gradient, hessian, log_likelihood, moments
from .optimize import ConstraintSpec, FitResult, TrustConfig, fit, fit_restricted, trust_region_maximize
from .simulation import SimReport, SimScenario, design_half_split, draw_depths, run_scenario

__version__ = "0.1.0"
