"""Baseline subtraction, head-ROI masking and artery/vein separation.

Separation compares each subtracted phase against the other phase brought
into its space by rigid registration: a voxel keeps its value only where it
is strictly brighter than its counterpart.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _parallel
from .errors import ArgumentError, GeometryError
from .registration import (
    RegistrationOptions,
    register_affine,
    register_rigid,
    resample_labels_with_transform,
    resample_with_transform,
)
from .transforms import RigidParams
from .volume import LabelVolume, ScalarVolume

log = logging.getLogger(__name__)

OPERANDS = ("subtracted", "raw")


def subtract_baseline(post: ScalarVolume, baseline: ScalarVolume, pre_register: bool = False,
                      opts: RegistrationOptions | None = None) -> ScalarVolume:
    """``max(post - baseline, 0)``, optionally after rigidly aligning the baseline to ``post``."""
    if pre_register:
        T, _ = register_rigid(post, baseline, opts)
        baseline = resample_with_transform(baseline, T, post.geometry)
    elif not post.geometry.matches(baseline.geometry):
        raise GeometryError("post and baseline geometries differ; pass pre_register=True")
    diff = post.data.astype(np.float32) - baseline.data.astype(np.float32)
    return post.with_data(np.maximum(diff, np.float32(0.0)))


def head_roi_mask(patient: ScalarVolume, template: ScalarVolume, template_roi: LabelVolume,
                  opts: RegistrationOptions | None = None) -> LabelVolume:
    """Carry a template's head ROI into patient space through an affine registration."""
    if not template.geometry.matches(template_roi.geometry):
        raise GeometryError("template and template ROI must share geometry")
    if not template_roi.data.any():
        return LabelVolume(patient.geometry, np.zeros(patient.geometry.dims, np.uint8), {1: "head"})
    T, _ = register_affine(patient, template, opts)
    warped = resample_labels_with_transform(template_roi, T, patient.geometry)
    return LabelVolume(patient.geometry, (warped.data != 0).astype(np.uint8), {1: "head"})


def suppress_voxelwise(s_ref, s_other, tie_rule: str = "suppress"):
    """Keep ``s_ref`` where it is strictly greater than ``s_other``, else 0.

    Works on scalars and arrays alike.
    """
    if tie_rule != "suppress":
        raise ArgumentError(f"unsupported tie rule {tie_rule!r}")
    ref = np.asarray(s_ref)
    out = np.where(ref > np.asarray(s_other), ref, np.zeros((), dtype=ref.dtype))
    return out.item() if out.ndim == 0 else out


def _suppress_volume(ref: ScalarVolume, other: ScalarVolume) -> ScalarVolume:
    out = np.empty(ref.geometry.dims, dtype=np.float32)

    def work(k0, k1):
        out[:, :, k0:k1] = suppress_voxelwise(ref.data[:, :, k0:k1], other.data[:, :, k0:k1])

    _parallel.run_slabs(work, ref.geometry.dims[2])
    return ref.with_data(out)


@dataclass
class SeparationOptions:
    alg1_operand: str = "subtracted"
    registration: RegistrationOptions = field(default_factory=RegistrationOptions)
    register: bool = True
    """When False the phases are assumed aligned and identity transforms are used."""

    def __post_init__(self):
        if self.alg1_operand not in OPERANDS:
            raise ArgumentError(f"alg1_operand must be one of {OPERANDS}, got {self.alg1_operand!r}")


@dataclass
class SeparationResult:
    s_star_a: ScalarVolume
    s_star_v: ScalarVolume
    g_ra: RigidParams
    """X_v moving, X_a fixed: maps arterial-space points into venous space."""
    g_rv: RigidParams
    """X_a moving, X_v fixed: maps venous-space points into arterial space."""
    ncc_ra: float = float("nan")
    ncc_rv: float = float("nan")

    def __iter__(self):
        return iter((self.s_star_a, self.s_star_v, self.g_ra, self.g_rv))


def vessel_separate(s_a: ScalarVolume, s_v: ScalarVolume, x_a: ScalarVolume, x_v: ScalarVolume,
                    opts: SeparationOptions | None = None) -> SeparationResult:
    """Split subtracted arterial/venous phases into artery-only and vein-only volumes.

    Both rigid transforms are estimated on the CTA images; the counterpart
    that gets warped is the subtracted volume by default (``alg1_operand``
    set to ``"raw"`` warps the CTA itself).
    """
    opts = opts or SeparationOptions()
    if not s_a.geometry.matches(x_a.geometry) or not s_v.geometry.matches(x_v.geometry):
        raise GeometryError("each subtracted image must share geometry with its CTA")
    if not np.allclose(s_a.geometry.spacing, s_v.geometry.spacing, atol=1e-6):
        raise GeometryError("arterial and venous phases must share voxel spacing")

    if opts.register:
        with ThreadPoolExecutor(max_workers=2 if _parallel.get_threads() > 1 else 1) as pool:
            f_rv = pool.submit(register_rigid, x_v, x_a, opts.registration)
            f_ra = pool.submit(register_rigid, x_a, x_v, opts.registration)
            g_rv, ncc_rv = f_rv.result()
            g_ra, ncc_ra = f_ra.result()
    else:
        if not s_a.geometry.matches(s_v.geometry):
            raise GeometryError("unregistered separation needs identical geometries")
        g_rv = g_ra = RigidParams()
        ncc_rv = ncc_ra = float("nan")

    if opts.alg1_operand == "subtracted":
        src_v, src_a, fill = s_v, s_a, 0.0
    else:
        src_v, src_a, fill = x_v, x_a, -1024.0
    s_v_to_a = resample_with_transform(src_v, g_ra, s_a.geometry, fill=fill)
    s_a_to_v = resample_with_transform(src_a, g_rv, s_v.geometry, fill=fill)
    log.info("separation: NCC(ra)=%.5f NCC(rv)=%.5f", ncc_ra, ncc_rv)
    return SeparationResult(
        _suppress_volume(s_a, s_v_to_a),
        _suppress_volume(s_v, s_a_to_v),
        g_ra, g_rv, ncc_ra, ncc_rv,
    )
