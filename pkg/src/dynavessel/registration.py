"""Intensity-based rigid and affine registration.

The similarity is normalized cross-correlation over fixed-image voxels above
an intensity floor.  Parameters are optimized by cyclic coordinate search
with per-parameter step halving on a Gaussian pyramid.  Everything is
deterministic: sampling is stratified (every k-th voxel) and sums use
numpy's pairwise float64 reduction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, DegenerateMetricError, GeometryError, RegistrationFailedError
from .transforms import AffineTransform, RigidParams, euler_zyx
from .volume import AIR_HU, LabelVolume, ScalarVolume, VolumeGeometry, _sample_voxel_coords, sample_on_grid

log = logging.getLogger(__name__)

_DEG = np.pi / 180.0


@dataclass
class RegistrationOptions:
    pyramid_levels: int = 3
    metric: str = "ncc"
    max_iterations: int = 200
    convergence_tol: float = 1e-4
    sampling_fraction: float = 0.25
    max_samples: int | None = 262144
    """Upper bound on samples per level; the stride grows to respect it."""
    intensity_floor: float = -500.0
    smoothing_mm: float = 2.0
    rotation_step: float = 2.0 * _DEG
    translation_step: float = 2.0
    scale_step: float = 0.05
    shear_step: float = 0.05

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ArgumentError("pyramid_levels must be >= 1")
        if self.metric.lower() != "ncc":
            raise ArgumentError(f"unsupported metric {self.metric!r}")
        if not 0 < self.sampling_fraction <= 1:
            raise ArgumentError("sampling_fraction must be in (0, 1]")
        if self.max_samples is not None and self.max_samples < 2:
            raise ArgumentError("max_samples must be >= 2")
        if self.max_iterations < 1:
            raise ArgumentError("max_iterations must be >= 1")
        if self.convergence_tol <= 0:
            raise ArgumentError("convergence_tol must be positive")


@dataclass
class RegistrationResult:
    transform: RigidParams | AffineTransform
    ncc: float
    history: list[list[float]] = field(default_factory=list)
    """Best NCC after every iteration, one list per pyramid level (coarse first)."""


def ncc(a: ScalarVolume | np.ndarray, b: ScalarVolume | np.ndarray, mask=None) -> float:
    """Pearson correlation of the intensities of ``a`` and ``b`` over ``mask``."""
    da = a.data if isinstance(a, ScalarVolume) else np.asarray(a)
    db = b.data if isinstance(b, ScalarVolume) else np.asarray(b)
    if da.shape != db.shape:
        raise GeometryError(f"shape mismatch {da.shape} vs {db.shape}")
    if mask is not None:
        m = mask.data != 0 if isinstance(mask, LabelVolume) else np.asarray(mask, dtype=bool)
        if m.shape != da.shape:
            raise GeometryError("mask shape does not match the volumes")
        da, db = da[m], db[m]
    return _ncc_values(da.ravel(), db.ravel())


def _ncc_values(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2:
        raise DegenerateMetricError("NCC needs at least two voxels")
    x = x.astype(np.float64) - np.mean(x, dtype=np.float64)
    y = y.astype(np.float64) - np.mean(y, dtype=np.float64)
    sxx = np.dot(x, x)
    syy = np.dot(y, y)
    if sxx <= 0 or syy <= 0:
        raise DegenerateMetricError("NCC is undefined for a constant image")
    return float(np.clip(np.dot(x, y) / np.sqrt(sxx * syy), -1.0, 1.0))


def resample_with_transform(moving: ScalarVolume, T, reference: VolumeGeometry,
                            fill: float = AIR_HU) -> ScalarVolume:
    """``out[v] = moving(T(world(v)))`` with trilinear interpolation."""
    m = T.to_matrix()
    g = moving.geometry

    def index_map(world):
        return g.world_to_voxel(world @ m[:3, :3].T + m[:3, 3])

    return ScalarVolume(reference, sample_on_grid(moving.data, reference, index_map, fill))


def resample_labels_with_transform(moving: LabelVolume, T, reference: VolumeGeometry) -> LabelVolume:
    """Nearest-neighbour pull-back of a label volume; 0 outside the moving grid."""
    m = T.to_matrix()
    g = moving.geometry

    def index_map(world):
        return g.world_to_voxel(world @ m[:3, :3].T + m[:3, 3])

    data = sample_on_grid(moving.data, reference, index_map, fill=0, order=0)
    return LabelVolume(reference, data.astype(np.uint8), moving.label_names)


# --------------------------------------------------------------------------
# parametrizations

def rigid_from_params(p, center) -> RigidParams:
    return RigidParams(tuple(p[:3]), tuple(p[3:6]), tuple(center))


def affine_from_params(p, center) -> AffineTransform:
    """12 parameters: 3 angles, 3 translations, 3 scales, 3 shears (xy, xz, yz).

    ``x -> R @ H @ S @ (x - c) + c + t``.
    """
    r = euler_zyx(p[:3])
    s = np.diag(p[6:9])
    h = np.array([[1.0, p[9], p[10]], [0.0, 1.0, p[11]], [0.0, 0.0, 1.0]])
    a = r @ h @ s
    c = np.asarray(center, dtype=np.float64)
    m = np.eye(4)
    m[:3, :3] = a
    m[:3, 3] = c + np.asarray(p[3:6]) - a @ c
    return AffineTransform(m)


# --------------------------------------------------------------------------
# pyramid and objective

@dataclass
class _Level:
    factor: int
    fixed_pts: np.ndarray  # (N, 3) world
    fixed_vals: np.ndarray  # (N,)
    moving: np.ndarray
    moving_geom: VolumeGeometry


def _smooth(vol: ScalarVolume, sigma_mm: float) -> np.ndarray:
    if sigma_mm <= 0:
        return vol.data.astype(np.float32)
    sigma = [sigma_mm / s for s in vol.geometry.spacing]
    return ndimage.gaussian_filter(vol.data.astype(np.float32), sigma, mode="nearest")


def _downsample(vol: ScalarVolume, factor: int, sigma_mm: float) -> tuple[np.ndarray, VolumeGeometry]:
    data = _smooth(vol, sigma_mm)[::factor, ::factor, ::factor]
    g = vol.geometry
    geom = VolumeGeometry(data.shape, tuple(s * factor for s in g.spacing), g.origin, g.direction)
    return np.ascontiguousarray(data), geom


def _stratified(mask: np.ndarray, fraction: float, max_samples: int | None = None) -> np.ndarray:
    """Flat (x-fastest) indices of every k-th voxel in ``mask``."""
    idx = np.flatnonzero(mask.ravel(order="F"))
    k = max(1, int(round(1.0 / fraction)))
    if max_samples is not None:
        k = max(k, -(-idx.size // max_samples))
    return idx[::k]


def foreground_centroid(vol: ScalarVolume, floor: float) -> np.ndarray:
    m = vol.data > floor
    if not m.any():
        return vol.geometry.center()
    ijk = np.argwhere(m).astype(np.float64)
    return vol.geometry.voxel_to_world(ijk.mean(axis=0))


def _build_levels(fixed: ScalarVolume, moving: ScalarVolume, opts: RegistrationOptions) -> list[_Level]:
    levels = []
    for li in reversed(range(opts.pyramid_levels)):
        f = 2 ** li
        fdata, fgeom = _downsample(fixed, f, opts.smoothing_mm)
        mdata, mgeom = _downsample(moving, f, opts.smoothing_mm)
        flat = _stratified(fdata > opts.intensity_floor, opts.sampling_fraction, opts.max_samples)
        ijk = np.column_stack(np.unravel_index(flat, fdata.shape, order="F")).astype(np.float64)
        levels.append(_Level(
            factor=f,
            fixed_pts=fgeom.voxel_to_world(ijk),
            fixed_vals=fdata.ravel(order="F")[flat].astype(np.float64),
            moving=mdata,
            moving_geom=mgeom,
        ))
    return levels


def _objective(level: _Level, make_transform, p) -> float:
    m = make_transform(p).to_matrix()
    pts = level.fixed_pts @ m[:3, :3].T + m[:3, 3]
    vals = _sample_voxel_coords(level.moving, level.moving_geom.world_to_voxel(pts).T, AIR_HU)
    return _ncc_values(level.fixed_vals, vals)


def _coordinate_search(fun, p0, steps0, max_iter, tol) -> tuple[np.ndarray, float, list[float]]:
    p = np.array(p0, dtype=np.float64)
    steps = np.array(steps0, dtype=np.float64)
    best = fun(p)
    history = [best]
    for _ in range(max_iter):
        for i in range(len(p)):
            moved = False
            for sign in (1.0, -1.0):
                q = p.copy()
                q[i] += sign * steps[i]
                try:
                    v = fun(q)
                except DegenerateMetricError:
                    continue
                if v > best:
                    p, best, moved = q, v, True
                    break
            if not moved:
                steps[i] *= 0.5
        history.append(best)
        if np.linalg.norm(steps) < tol:
            break
    return p, best, history


def _optimize(fixed, moving, opts, p0, steps, make_transform):
    levels = _build_levels(fixed, moving, opts)
    p = np.asarray(p0, dtype=np.float64)
    histories = []
    for n, level in enumerate(levels):
        if level.fixed_vals.size < 2:
            raise RegistrationFailedError(f"too few samples above the intensity floor at level {n}")

        def fun(q, level=level):
            return _objective(level, make_transform, q)

        try:
            fun(p)
        except DegenerateMetricError as exc:
            if n == 0:
                raise RegistrationFailedError(f"degenerate metric at coarsest level: {exc}") from exc
            raise RegistrationFailedError(f"degenerate metric at level {n}: {exc}") from exc
        level_steps = np.asarray(steps) / (2 ** n)
        p, best, hist = _coordinate_search(
            fun, p, level_steps, opts.max_iterations, opts.convergence_tol * level.factor
        )
        histories.append(hist)
        log.debug("level %d (x%d): ncc %.6f after %d iterations", n, level.factor, best, len(hist) - 1)
    return p, histories


def _final_ncc(fixed, moving, T, opts) -> float:
    warped = resample_with_transform(moving, T, fixed.geometry)
    mask = fixed.data > opts.intensity_floor
    return ncc(fixed.data, warped.data, mask)


def _check_overlap(fixed: ScalarVolume, moving: ScalarVolume):
    def box(g):
        corners = np.array([[i, j, k] for i in (0, g.dims[0] - 1) for j in (0, g.dims[1] - 1)
                            for k in (0, g.dims[2] - 1)], dtype=np.float64)
        w = g.voxel_to_world(corners)
        return w.min(axis=0), w.max(axis=0)

    lo1, hi1 = box(fixed.geometry)
    lo2, hi2 = box(moving.geometry)
    if np.any(np.minimum(hi1, hi2) < np.maximum(lo1, lo2)):
        raise RegistrationFailedError("fixed and moving volumes do not overlap in world space")


def register_rigid_full(fixed: ScalarVolume, moving: ScalarVolume,
                        opts: RegistrationOptions | None = None,
                        initial: RigidParams | None = None) -> RegistrationResult:
    opts = opts or RegistrationOptions()
    _check_overlap(fixed, moving)
    center = foreground_centroid(fixed, opts.intensity_floor)
    if initial is not None:
        initial = initial.with_center(center)
        p0 = np.r_[initial.angles, initial.translation]
    else:
        p0 = np.zeros(6)
    steps = [opts.rotation_step] * 3 + [opts.translation_step] * 3
    p, hist = _optimize(fixed, moving, opts, p0, steps, lambda q: rigid_from_params(q, center))
    T = rigid_from_params(p, center)
    return RegistrationResult(T, _final_ncc(fixed, moving, T, opts), hist)


def register_rigid(fixed: ScalarVolume, moving: ScalarVolume,
                   opts: RegistrationOptions | None = None) -> tuple[RigidParams, float]:
    """Rigid transform maximizing NCC between ``fixed`` and the resampled ``moving``.

    The result maps fixed-space points into moving space.
    """
    res = register_rigid_full(fixed, moving, opts)
    return res.transform, res.ncc


def register_affine_full(fixed: ScalarVolume, moving: ScalarVolume,
                         opts: RegistrationOptions | None = None) -> RegistrationResult:
    """12-DOF search started from the rigid solution and from identity; the better NCC wins.

    A rigid fit cannot absorb a size difference and may rotate away to
    compensate, so the identity start guards against a misleading initializer.
    """
    opts = opts or RegistrationOptions()
    rigid = register_rigid_full(fixed, moving, opts).transform
    center = rigid.center
    steps = ([opts.rotation_step] * 3 + [opts.translation_step] * 3
             + [opts.scale_step] * 3 + [opts.shear_step] * 3)
    best = None
    for start in (rigid, RigidParams(center=center)):
        p0 = np.r_[start.angles, start.translation, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]
        p, hist = _optimize(fixed, moving, opts, p0, steps, lambda q: affine_from_params(q, center))
        T = affine_from_params(p, center)
        res = RegistrationResult(T, _final_ncc(fixed, moving, T, opts), hist)
        if best is None or res.ncc > best.ncc:
            best = res
    return best


def register_affine(fixed: ScalarVolume, moving: ScalarVolume,
                    opts: RegistrationOptions | None = None) -> tuple[AffineTransform, float]:
    """12-DOF version of :func:`register_rigid`, started from a rigid solution."""
    res = register_affine_full(fixed, moving, opts)
    return res.transform, res.ncc
