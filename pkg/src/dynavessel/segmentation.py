"""Threshold-based vessel extraction and voxel-set primitives.

Phansalkar local thresholding, Kapur/Renyi entropy thresholding, connected
components, surface extraction and topology-preserving skeletonization.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, DegenerateHistogramError, GeometryError, NormalizationError
from .volume import LabelVolume, ScalarVolume, VolumeGeometry


class VoxelSet:
    """A set of voxel indices on a grid, kept sorted in x-fastest raster order."""

    def __init__(self, geometry: VolumeGeometry, indices=()):
        idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        if len(idx) and (np.any(idx < 0) or np.any(idx >= np.asarray(geometry.dims))):
            raise GeometryError("voxel indices outside the grid")
        if len(idx):
            idx = np.unique(idx, axis=0)
            idx = idx[np.lexsort((idx[:, 0], idx[:, 1], idx[:, 2]))]
        self.geometry = geometry
        self.indices = idx

    @classmethod
    def from_mask(cls, geometry: VolumeGeometry, mask) -> "VoxelSet":
        if isinstance(mask, LabelVolume):
            mask = mask.data != 0
        return cls(geometry, np.argwhere(np.asarray(mask, dtype=bool)))

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return (tuple(int(v) for v in row) for row in self.indices)

    def __contains__(self, ijk) -> bool:
        return bool(np.any(np.all(self.indices == np.asarray(ijk), axis=1)))

    def __eq__(self, other) -> bool:
        return isinstance(other, VoxelSet) and np.array_equal(self.indices, other.indices)

    def to_mask(self) -> np.ndarray:
        m = np.zeros(self.geometry.dims, dtype=bool)
        if len(self):
            m[self.indices[:, 0], self.indices[:, 1], self.indices[:, 2]] = True
        return m

    def world_points(self) -> np.ndarray:
        return self.geometry.voxel_to_world(self.indices.astype(np.float64))

    def values(self, data: np.ndarray) -> np.ndarray:
        i = self.indices
        return data[i[:, 0], i[:, 1], i[:, 2]]

    def to_text(self) -> str:
        return "".join(f"{i} {j} {k}\n" for i, j, k in self.indices)

    def save_text(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, geometry: VolumeGeometry, text: str) -> "VoxelSet":
        rows = [line.split() for line in text.splitlines() if line.strip()]
        return cls(geometry, np.array(rows, dtype=np.int64).reshape(-1, 3))


def _mask_of(mask) -> np.ndarray:
    if isinstance(mask, LabelVolume):
        return mask.data != 0
    return np.asarray(mask, dtype=bool)


# --------------------------------------------------------------------------
# thresholds

@dataclass(frozen=True)
class PhansalkarParams:
    window_radius: int = 15
    k: float = 0.25
    R: float = 0.5
    p: float = 2.0
    q: float = 10.0

    def __post_init__(self):
        if self.window_radius < 1:
            raise ArgumentError("window_radius must be >= 1")
        if not self.R > 0:
            raise ArgumentError("R must be positive")


def normalize_minmax(data: np.ndarray, roi: np.ndarray) -> np.ndarray:
    vals = data[roi]
    if vals.size == 0:
        raise NormalizationError("empty region of interest")
    lo, hi = float(vals.min()), float(vals.max())
    if not hi > lo:
        raise NormalizationError("cannot normalize a constant volume")
    out = (data.astype(np.float64) - lo) / (hi - lo)
    return np.where(roi, out, 0.0)


def _box_sum(a: np.ndarray, r: int) -> np.ndarray:
    """Sum over the (2r+1)^3 window clipped at the borders, via cumulative sums."""
    out = a
    for axis in range(3):
        n = out.shape[axis]
        c = np.cumsum(out, axis=axis, dtype=np.float64)
        pad_shape = list(c.shape)
        pad_shape[axis] = 1
        c = np.concatenate([np.zeros(pad_shape), c], axis=axis)
        i = np.arange(n)
        hi = np.minimum(i + r, n - 1) + 1
        lo = np.maximum(i - r, 0)
        out = np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)
    return out


def phansalkar_threshold(vol: ScalarVolume, params: PhansalkarParams | None = None,
                         roi=None) -> LabelVolume:
    """Local adaptive threshold on min-max normalized intensities.

    ``T = m * (1 + p * exp(-q * m) + k * (s / R - 1))`` with ``m`` and ``s``
    the mean and standard deviation over the cubic window (clipped at the
    borders, restricted to ``roi``).  Foreground where the value exceeds ``T``.
    """
    params = params or PhansalkarParams()
    roi_m = np.ones(vol.geometry.dims, dtype=bool) if roi is None else _mask_of(roi)
    x = normalize_minmax(vol.data, roi_m)
    w = roi_m.astype(np.float64)
    r = params.window_radius
    n = _box_sum(w, r)
    s1 = _box_sum(x * w, r)
    s2 = _box_sum(x * x * w, r)
    with np.errstate(invalid="ignore", divide="ignore"):
        m = np.where(n > 0, s1 / n, 0.0)
        var = np.where(n > 0, s2 / n - m * m, 0.0)
    s = np.sqrt(np.maximum(var, 0.0))
    t = m * (1.0 + params.p * np.exp(-params.q * m) + params.k * (s / params.R - 1.0))
    fg = roi_m & (x > t)
    return LabelVolume.from_mask(vol.geometry, fg, "vessel")


def _entropies(p: np.ndarray, alpha: float):
    """Background and foreground entropies for every split index 1..bins-1."""
    cp = np.cumsum(p)
    total = cp[-1]
    pb = cp[:-1]
    pf = total - pb
    if alpha == 1.0:
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        cl = np.cumsum(plogp)
        lb = cl[:-1]
        lf = cl[-1] - lb
        with np.errstate(divide="ignore", invalid="ignore"):
            hb = np.log(pb) - lb / pb
            hf = np.log(pf) - lf / pf
    else:
        pa = np.where(p > 0, p ** alpha, 0.0)
        ca = np.cumsum(pa)
        ab = ca[:-1]
        af = ca[-1] - ab
        with np.errstate(divide="ignore", invalid="ignore"):
            hb = (np.log(ab) - alpha * np.log(pb)) / (1.0 - alpha)
            hf = (np.log(af) - alpha * np.log(pf)) / (1.0 - alpha)
    return pb, pf, hb, hf


def kapur_threshold(vol: ScalarVolume, bins: int = 256, renyi_alpha: float = 1.0, roi=None) -> float:
    """Histogram threshold maximizing the summed Renyi entropies of both classes.

    ``renyi_alpha = 1`` is the Shannon (Kapur) case.  Candidates are interior
    bin edges; the background takes the bins below the edge.  Ties go to the
    lowest edge.
    """
    if bins < 2:
        raise ArgumentError("need at least two bins")
    if not renyi_alpha > 0:
        raise ArgumentError("renyi_alpha must be positive")
    roi_m = np.ones(vol.geometry.dims, dtype=bool) if roi is None else _mask_of(roi)
    vals = vol.data[roi_m].astype(np.float64)
    if vals.size == 0 or not vals.max() > vals.min():
        raise DegenerateHistogramError("histogram of a constant (or empty) region")
    counts, edges = np.histogram(vals, bins=bins, range=(vals.min(), vals.max()))
    p = counts / counts.sum()
    pb, pf, hb, hf = _entropies(p, float(renyi_alpha))
    score = np.where((pb > 0) & (pf > 0), hb + hf, -np.inf)
    t = int(np.argmax(score))  # first maximum: lowest edge wins ties
    return float(edges[t + 1])


def kapur_segment(vol: ScalarVolume, bins: int = 256, renyi_alpha: float = 1.0, roi=None) -> LabelVolume:
    roi_m = np.ones(vol.geometry.dims, dtype=bool) if roi is None else _mask_of(roi)
    thr = kapur_threshold(vol, bins, renyi_alpha, roi_m)
    return LabelVolume.from_mask(vol.geometry, roi_m & (vol.data >= thr), "vessel")


def fixed_threshold(vol: ScalarVolume, level: float) -> LabelVolume:
    return LabelVolume.from_mask(vol.geometry, vol.data > level, "vessel")


# --------------------------------------------------------------------------
# components, surfaces, skeletons

def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ArgumentError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask, connectivity: int = 26) -> tuple[LabelVolume | np.ndarray, np.ndarray]:
    """Label components; ids follow the x-fastest raster order of each component's first voxel.

    Returns ``(labels, sizes)`` with ``sizes[i]`` the voxel count of id ``i + 1``.
    Labels come back as a ``LabelVolume`` when given one (ids above 255 need
    the plain-array form) and as an int32 array otherwise.
    """
    m = _mask_of(mask)
    lab, n = ndimage.label(m, structure=_structure(connectivity))
    if n == 0:
        out = np.zeros(m.shape, dtype=np.int32)
        sizes = np.zeros(0, dtype=np.int64)
    else:
        flat = lab.ravel(order="F")
        ids, first = np.unique(flat, return_index=True)
        keep = ids != 0
        ids, first = ids[keep], first[keep]
        order = ids[np.argsort(first)]
        remap = np.zeros(n + 1, dtype=np.int32)
        remap[order] = np.arange(1, n + 1, dtype=np.int32)
        out = remap[lab]
        sizes = np.bincount(out.ravel(), minlength=n + 1)[1:].astype(np.int64)
    if isinstance(mask, LabelVolume):
        if n > 255:
            raise ArgumentError("more than 255 components; pass a plain array")
        return LabelVolume(mask.geometry, out.astype(np.uint8)), sizes
    return out, sizes


def remove_small_components(mask, connectivity: int = 26, min_voxels: int = 1):
    """Drop components smaller than ``min_voxels``."""
    m = _mask_of(mask)
    lab, n = ndimage.label(m, structure=_structure(connectivity))
    sizes = np.bincount(lab.ravel(), minlength=n + 1)
    keep = sizes >= min_voxels
    keep[0] = False
    out = keep[lab]
    if isinstance(mask, LabelVolume):
        return LabelVolume(mask.geometry, np.where(out, mask.data, 0), mask.label_names)
    return out


def surface_mask(mask) -> np.ndarray:
    m = _mask_of(mask)
    inner = ndimage.binary_erosion(m, structure=_structure(6), border_value=0)
    return m & ~inner


def extract_surface(mask: LabelVolume) -> VoxelSet:
    """Foreground voxels with at least one background 6-neighbour (grid border counts as background)."""
    return VoxelSet.from_mask(mask.geometry, surface_mask(mask))


def skeleton_mask(mask) -> np.ndarray:
    from skimage.morphology import skeletonize as _thin

    m = _mask_of(mask)
    if not m.any():
        return m.copy()
    sk = np.asarray(_thin(m), dtype=bool) & m
    # thinning can erase tiny components outright; keep one voxel of each so
    # the 26-connected component count is preserved
    lab, n = ndimage.label(m, structure=_structure(26))
    hit = np.zeros(n + 1, dtype=bool)
    hit[lab[sk]] = True
    missing = np.flatnonzero(~hit[1:]) + 1
    if missing.size:
        depth = ndimage.distance_transform_edt(np.pad(m, 1))[1:-1, 1:-1, 1:-1]
        for c in missing:
            idx = np.argwhere(lab == c)
            best = idx[np.argmax(depth[tuple(idx.T)])]
            sk[tuple(best)] = True
    return sk


def skeletonize(mask: LabelVolume) -> VoxelSet:
    """Topology-preserving 3D thinning to a one-voxel-wide centerline."""
    return VoxelSet.from_mask(mask.geometry, skeleton_mask(mask))
