"""Photothermal super-resolution reconstruction.

Thermal PSF synthesis, structured-illumination pattern design, forward
simulation of thermogram stacks, group-sparse ADMM inversion, quality
scores, regularization search and conventional thermographic baselines.
"""

__version__ = "0.1.0"

from .field import (F_CAM, STEEL_316L, Field2D, GridSpec, MaterialSpec, ThermogramStack, crop_roi,
                    estimate_t0, load_field, load_stack, save_stack, subtract_t0)
from .psf import PsfSpec, PsfStack, psf_instant, psf_pulse, sigma_psf
from .patterns import (HomogeneityReport, PatternSet, cluster_to_field, generate_patterns, homogeneity,
                       min_patterns)
from .forward import DefectMap, ForwardSpec, fit_zeta, r_squared, simulate_measurement
from .solver import ReconstructionResult, SolverConfig, admm_reconstruct, l21_norm, objective
from .metrics import PenaltyMask, nmse, penalty_mask, reconstruction_cost
from .autotune import SearchConfig, TuneResult, differential_evolution, tune_regularization
from .baselines import PptResult, difference_thermogram, ppt, pristine_subtracted

__all__ = [
    "F_CAM", "STEEL_316L", "Field2D", "GridSpec", "MaterialSpec", "ThermogramStack", "crop_roi",
    "estimate_t0", "load_field", "load_stack", "save_stack", "subtract_t0",
    "PsfSpec", "PsfStack", "psf_instant", "psf_pulse", "sigma_psf",
    "HomogeneityReport", "PatternSet", "cluster_to_field", "generate_patterns", "homogeneity", "min_patterns",
    "DefectMap", "ForwardSpec", "fit_zeta", "r_squared", "simulate_measurement",
    "ReconstructionResult", "SolverConfig", "admm_reconstruct", "l21_norm", "objective",
    "PenaltyMask", "nmse", "penalty_mask", "reconstruction_cost",
    "SearchConfig", "TuneResult", "differential_evolution", "tune_regularization",
    "PptResult", "difference_thermogram", "ppt", "pristine_subtracted",
]
