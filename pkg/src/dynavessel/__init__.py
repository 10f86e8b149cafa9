"""Artery/vein separation for dynamic 4D-CTA, with phantoms, metrics and a batch pipeline."""

from .errors import DynaVesselError
from .metrics import MetricsReport, Phase, adhd, classify_phase, evaluate_case, mdc, tsens
from .nifti import read_labels, read_volume, write_volume
from .phantom import PhantomSpec, PhantomStudy, TimeAttenuationCurve, default_spec, generate_study, tac_eval
from .registration import RegistrationOptions, ncc, register_affine, register_rigid, resample_with_transform
from .segmentation import (
    PhansalkarParams,
    VoxelSet,
    connected_components,
    extract_surface,
    kapur_threshold,
    phansalkar_threshold,
    skeletonize,
)
from .suppression import SeparationOptions, head_roi_mask, subtract_baseline, suppress_voxelwise, vessel_separate
from .transforms import AffineTransform, RigidParams, compose, invert, transform_point
from .volume import LabelVolume, ScalarVolume, VolumeGeometry, mip_render, resample_isotropic, trilinear_sample

__version__ = "0.1.0"

__all__ = [
    "AffineTransform", "DynaVesselError", "LabelVolume", "MetricsReport", "PhansalkarParams",
    "PhantomSpec", "PhantomStudy", "Phase", "RegistrationOptions", "RigidParams", "ScalarVolume",
    "SeparationOptions", "TimeAttenuationCurve", "VolumeGeometry", "VoxelSet", "adhd",
    "classify_phase", "compose", "connected_components", "default_spec", "evaluate_case",
    "extract_surface", "generate_study", "head_roi_mask", "invert", "kapur_threshold", "mdc",
    "mip_render", "ncc", "phansalkar_threshold", "read_labels", "read_volume", "register_affine",
    "register_rigid", "resample_isotropic", "resample_with_transform", "skeletonize",
    "subtract_baseline", "suppress_voxelwise", "tac_eval", "transform_point", "trilinear_sample",
    "tsens", "vessel_separate", "write_volume",
]
