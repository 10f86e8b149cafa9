"""Geometric 3D volumes, interpolation, resampling, masking and MIP rendering.

Arrays are indexed ``data[i, j, k]`` with ``i`` along the first voxel axis
(x).  World coordinates are millimetres:

    world = origin + direction @ (spacing * [i, j, k])
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _parallel
from .errors import ArgumentError, GeometryError

AIR_HU = -1024.0

_TOL = 1e-6


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


@dataclass(frozen=True, eq=False)
class VolumeGeometry:
    """Voxel grid placement in world space."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        direction = np.array(self.direction, dtype=np.float64).reshape(3, 3)
        if len(dims) != 3 or min(dims) < 1:
            raise GeometryError(f"dims must be three positive integers, got {dims}")
        if len(spacing) != 3 or min(spacing) <= 0 or not np.all(np.isfinite(spacing)):
            raise GeometryError(f"spacing must be three positive reals, got {spacing}")
        if not np.allclose(direction.T @ direction, np.eye(3), atol=_TOL):
            raise GeometryError("direction matrix is not orthonormal")
        direction.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def affine(self) -> np.ndarray:
        """4x4 voxel-index to world matrix."""
        a = np.eye(4)
        a[:3, :3] = self.direction * np.asarray(self.spacing)
        a[:3, 3] = self.origin
        return a

    def voxel_to_world(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.float64)
        return ijk * np.asarray(self.spacing) @ self.direction.T + np.asarray(self.origin)

    def world_to_voxel(self, xyz) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return (xyz - np.asarray(self.origin)) @ self.direction / np.asarray(self.spacing)

    def center(self) -> np.ndarray:
        """World position of the grid centre."""
        return self.voxel_to_world((np.asarray(self.dims) - 1) / 2.0)

    def matches(self, other: "VolumeGeometry", tol: float = _TOL) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.origin, other.origin, atol=tol)
            and np.allclose(self.direction, other.direction, atol=tol)
        )

    def with_spacing(self, spacing, dims=None) -> "VolumeGeometry":
        return VolumeGeometry(dims or self.dims, spacing, self.origin, self.direction)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "origin": list(self.origin),
            "direction": self.direction.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeGeometry":
        return cls(
            tuple(d["dims"]),
            tuple(d.get("spacing", (1.0, 1.0, 1.0))),
            tuple(d.get("origin", (0.0, 0.0, 0.0))),
            np.asarray(d.get("direction", np.eye(3))),
        )


def _check_shape(geometry: VolumeGeometry, data: np.ndarray):
    if data.ndim != 3 or tuple(data.shape) != geometry.dims:
        raise GeometryError(f"data shape {data.shape} does not match dims {geometry.dims}")


@dataclass(eq=False)
class ScalarVolume:
    """Hounsfield-unit intensities on a grid (float32)."""

    geometry: VolumeGeometry
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        _check_shape(self.geometry, self.data)
        if not np.all(np.isfinite(self.data)):
            raise ArgumentError("volume contains non-finite values")

    def with_data(self, data) -> "ScalarVolume":
        return ScalarVolume(self.geometry, data)


@dataclass(eq=False)
class LabelVolume:
    """Small-integer labels on a grid (uint8) with a name for each label."""

    geometry: VolumeGeometry
    data: np.ndarray
    label_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype == bool:
            data = data.astype(np.uint8)
        if data.size and (data.min() < 0 or data.max() > 255):
            raise ArgumentError("labels must fit in uint8")
        self.data = data.astype(np.uint8, copy=False)
        _check_shape(self.geometry, self.data)
        names = {int(k): str(v) for k, v in self.label_names.items()}
        for lab in np.unique(self.data):
            if lab and int(lab) not in names:
                names[int(lab)] = f"label{int(lab)}"
        self.label_names = dict(sorted(names.items()))

    @classmethod
    def from_mask(cls, geometry, mask, name: str = "foreground") -> "LabelVolume":
        return cls(geometry, np.asarray(mask, dtype=bool).astype(np.uint8), {1: name})

    def mask(self, label: int | None = None) -> np.ndarray:
        """Boolean mask of one label, or of every nonzero label."""
        if label is None:
            return self.data != 0
        return self.data == label

    def label_of(self, name: str) -> int:
        for k, v in self.label_names.items():
            if v == name:
                return k
        raise KeyError(name)


# --------------------------------------------------------------------------
# interpolation

def _sample_voxel_coords(data: np.ndarray, coords: np.ndarray, fill: float) -> np.ndarray:
    """Trilinear interpolation at continuous voxel coordinates ``coords`` (3, N).

    Points outside ``[0, n-1]`` on any axis get ``fill``.
    """
    dims = np.asarray(data.shape, dtype=np.float64)[:, None]
    inside = np.all((coords >= -_TOL) & (coords <= dims - 1 + _TOL), axis=0)
    out = np.full(coords.shape[1], fill, dtype=np.float64)
    if inside.any():
        c = np.clip(coords[:, inside], 0.0, dims - 1)
        out[inside] = ndimage.map_coordinates(
            data, c, order=1, mode="nearest", output=np.float64, prefilter=False
        )
    return out


def trilinear_sample(vol: ScalarVolume, point, fill: float = AIR_HU):
    """Interpolate ``vol`` at world point(s) ``point`` (shape (3,) or (N, 3))."""
    pts = np.asarray(point, dtype=np.float64)
    single = pts.ndim == 1
    coords = vol.geometry.world_to_voxel(pts.reshape(-1, 3)).T
    vals = _sample_voxel_coords(vol.data, coords, fill)
    return float(vals[0]) if single else vals


def nearest_sample(vol: LabelVolume, point):
    """Nearest-voxel label lookup at world point(s); 0 outside the grid."""
    pts = np.asarray(point, dtype=np.float64)
    single = pts.ndim == 1
    idx = _round_half_up(vol.geometry.world_to_voxel(pts.reshape(-1, 3)))
    dims = np.asarray(vol.geometry.dims)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    out = np.zeros(len(idx), dtype=np.uint8)
    i = idx[inside]
    out[inside] = vol.data[i[:, 0], i[:, 1], i[:, 2]]
    return int(out[0]) if single else out


def sample_on_grid(data: np.ndarray, reference: VolumeGeometry, index_map, fill: float,
                   order: int = 1) -> np.ndarray:
    """Fill a ``reference``-shaped array by pulling values from ``data``.

    ``index_map(world_points (N, 3)) -> source voxel coords (N, 3)``.  Work is
    split into z-slabs; each output voxel depends only on its own sample, so
    the result does not depend on the thread count.
    """
    nx, ny, nz = reference.dims
    out = np.empty(reference.dims, dtype=np.float32)
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    plane = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)

    def work(k0, k1):
        for k in range(k0, k1):
            ijk = np.column_stack([plane, np.full(len(plane), k, dtype=np.float64)])
            src = index_map(reference.voxel_to_world(ijk)).T
            if order == 0:
                idx = _round_half_up(src)
                dims = np.asarray(data.shape)[:, None]
                inside = np.all((idx >= 0) & (idx < dims), axis=0)
                vals = np.full(idx.shape[1], fill, dtype=np.float64)
                vals[inside] = data[idx[0, inside], idx[1, inside], idx[2, inside]]
            else:
                vals = _sample_voxel_coords(data, src, fill)
            out[:, :, k] = vals.reshape(nx, ny)

    _parallel.run_slabs(work, nz)
    return out


def _interp_axis(a: np.ndarray, axis: int, n_out: int, step: float, fill: float) -> np.ndarray:
    """Linear resampling of ``a`` along one axis at source positions ``i * step``."""
    n_in = a.shape[axis]
    pos = np.arange(n_out, dtype=np.float64) * step
    valid = pos <= n_in - 1 + _TOL
    pos = np.minimum(pos, n_in - 1)
    if n_in == 1:
        i0 = np.zeros(n_out, dtype=np.int64)
        frac = np.zeros(n_out)
    else:
        i0 = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
        frac = pos - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    shape = [1, 1, 1]
    shape[axis] = n_out
    f = frac.reshape(shape)
    v = valid.reshape(shape)

    out_shape = list(a.shape)
    out_shape[axis] = n_out
    out = np.empty(out_shape, dtype=np.float32)
    # chunk over the last axis that is not being interpolated
    other = 2 if axis != 2 else 1

    def work(s0, s1):
        sl = [slice(None)] * 3
        sl[other] = slice(s0, s1)
        src = a[tuple(sl)].astype(np.float64)
        lo = np.take(src, i0, axis=axis)
        hi = np.take(src, i1, axis=axis)
        res = lo * (1.0 - f) + hi * f
        out[tuple(sl)] = np.where(v, res, fill)

    _parallel.run_slabs(work, a.shape[other])
    return out


def resample_isotropic(vol: ScalarVolume, target_spacing: float, fill: float = AIR_HU) -> ScalarVolume:
    """Resample onto an isotropic grid with the same origin and direction.

    Output dims are ``max(1, round_half_up(n * spacing / target))`` per axis.
    The grid is axis-aligned with the source, so trilinear interpolation is
    carried out as three separable linear passes.
    """
    if not target_spacing > 0:
        raise ArgumentError(f"target spacing must be positive, got {target_spacing}")
    g = vol.geometry
    dims = tuple(
        max(1, int(_round_half_up(n * s / target_spacing))) for n, s in zip(g.dims, g.spacing)
    )
    out = vol.data
    # shrink first, grow last, to keep the intermediates small
    order = sorted(range(3), key=lambda ax: dims[ax] / g.dims[ax])
    for ax in order:
        out = _interp_axis(out, ax, dims[ax], target_spacing / g.spacing[ax], fill)
    return ScalarVolume(g.with_spacing((target_spacing,) * 3, dims), out)


def resample_labels(labels: LabelVolume, reference: VolumeGeometry) -> LabelVolume:
    """Nearest-neighbour resampling of a label volume onto ``reference`` (identity transform)."""
    if labels.geometry.matches(reference):
        return labels
    data = sample_on_grid(
        labels.data, reference, labels.geometry.world_to_voxel, fill=0, order=0
    )
    return LabelVolume(reference, data.astype(np.uint8), labels.label_names)


def apply_mask(vol: ScalarVolume, mask: LabelVolume, fill: float = AIR_HU) -> ScalarVolume:
    """Keep voxels where ``mask`` is nonzero, replace the rest with ``fill``."""
    if vol.geometry.dims != mask.geometry.dims:
        raise GeometryError(f"mask dims {mask.geometry.dims} != volume dims {vol.geometry.dims}")
    return vol.with_data(np.where(mask.data != 0, vol.data, np.float32(fill)))


_AXES = {"x": 0, "y": 1, "z": 2}


def mip_render(vol: ScalarVolume, axis: str = "z", window=(-100.0, 600.0)) -> np.ndarray:
    """Maximum intensity projection windowed linearly to 8 bits.

    Rows of the returned image run along the higher remaining voxel axis,
    columns along the lower one (for ``axis='z'``: rows = y, columns = x).
    """
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ArgumentError(f"window low {lo} must be below high {hi}")
    if axis not in _AXES:
        raise ArgumentError(f"axis must be one of x, y, z, got {axis!r}")
    proj = vol.data.max(axis=_AXES[axis]).astype(np.float64).T
    scaled = (np.clip(proj, lo, hi) - lo) / (hi - lo) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def write_png(image: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path)
