"""Motion-blur velocimetry toolkit: forward optics, datasets, estimators."""

from .optics import ConfigurationError, Kernel2D, MotionParams, OpticsConfig, motion_psf, static_psf, zernike_eval
from .scene_flow import MaskSet, VelocityField, cylinder_flow_field, field_from_masks, generate_masks, sample_motion_params
from .imaging import apply_noise, form_image, validity_map
from .dataset import DatasetManifest, DatasetRequest, LossConfig, TargetMaps, build_dataset, loss, to_cylindrical
from .estimator import (
    EstimationReport,
    estimate_field_blind,
    estimate_field_nonblind,
    evaluate_r2,
    fit_kernel_nonblind,
    fit_params_to_kernel,
)

__all__ = [
    "ConfigurationError", "Kernel2D", "MotionParams", "OpticsConfig",
    "motion_psf", "static_psf", "zernike_eval",
    "MaskSet", "VelocityField", "cylinder_flow_field", "field_from_masks",
    "generate_masks", "sample_motion_params",
    "apply_noise", "form_image", "validity_map",
    "DatasetManifest", "DatasetRequest", "LossConfig", "TargetMaps",
    "build_dataset", "loss", "to_cylindrical",
    "EstimationReport", "estimate_field_blind", "estimate_field_nonblind",
    "evaluate_r2", "fit_kernel_nonblind", "fit_params_to_kernel",
]

__version__ = "0.1.0"
