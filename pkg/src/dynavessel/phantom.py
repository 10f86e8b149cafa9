"""Synthetic dynamic CTA studies with known ground truth.

A phantom is an ellipsoidal skull shell filled with soft tissue and threaded
with tubular artery and vein trees.  Each tree enhances over time following a
gamma-variate time-attenuation curve.  Frames are composed in frame-0 space
(optionally anti-aliased and blurred by a Gaussian PSF), moved by a per-frame
rigid pull-back and corrupted with Gaussian noise whose stream depends only
on ``(rng_seed, frame index)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _parallel
from .errors import SpecError
from .nifti import read_labels, read_volume, write_volume
from .registration import resample_with_transform
from .transforms import RigidParams, transform_from_dict
from .volume import AIR_HU, LabelVolume, ScalarVolume, VolumeGeometry

ARTERIAL_PEAK_S = 27.6
VENOUS_PEAK_S = 45.3


@dataclass(frozen=True)
class TimeAttenuationCurve:
    """Gamma-variate enhancement ``peak * x**alpha * exp(alpha * (1 - x))``, ``x = (t - t0) / tp``."""

    t0: float
    tp: float
    alpha: float = 3.0
    peak: float = 400.0

    def __post_init__(self):
        if self.tp <= 0 or self.alpha <= 0:
            raise SpecError("TAC needs tp > 0 and alpha > 0")

    def __call__(self, t) -> float | np.ndarray:
        return tac_eval(self, t)

    @property
    def peak_time(self) -> float:
        return self.t0 + self.tp


def tac_eval(curve: TimeAttenuationCurve, t):
    t = np.asarray(t, dtype=np.float64)
    x = np.maximum(t - curve.t0, 0.0) / curve.tp
    v = curve.peak * x ** curve.alpha * np.exp(curve.alpha * (1.0 - x))
    v = np.where(t <= curve.t0, 0.0, v)
    return float(v) if v.ndim == 0 else v


@dataclass
class VesselTree:
    segments: list[tuple[np.ndarray, float]]
    kind: str
    tac: TimeAttenuationCurve

    def __post_init__(self):
        if self.kind not in ("artery", "vein"):
            raise SpecError(f"vessel kind must be artery or vein, got {self.kind!r}")
        segs = []
        for pts, r in self.segments:
            pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
            if len(pts) < 2:
                raise SpecError("vessel polylines need at least two points")
            if not r > 0:
                raise SpecError("vessel radii must be positive")
            segs.append((pts, float(r)))
        for n, (pts, _) in enumerate(segs[1:], start=1):
            if not any(_point_polyline_distance(pts[0], p) <= r + 1e-9 for p, r in segs[:n]):
                raise SpecError(f"segment {n} does not start on an earlier segment")
        self.segments = segs

    def to_dict(self) -> dict:
        return {
            "segments": [{"points": p.tolist(), "radius": r} for p, r in self.segments],
            "tac": {"t0": self.tac.t0, "tp": self.tac.tp, "alpha": self.tac.alpha, "peak": self.tac.peak},
        }

    @classmethod
    def from_dict(cls, d: dict, kind: str) -> "VesselTree":
        return cls([(s["points"], s["radius"]) for s in d["segments"]], kind,
                   TimeAttenuationCurve(**d["tac"]))


@dataclass
class PhantomSpec:
    geometry: VolumeGeometry
    skull_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    skull_radii: tuple[float, float, float] = (58.0, 54.0, 55.0)
    skull_thickness: float = 5.0
    bone_hu: float = 1000.0
    soft_tissue_hu: float = 40.0
    arteries: list[VesselTree] = field(default_factory=list)
    veins: list[VesselTree] = field(default_factory=list)
    timepoints: list[float] = field(default_factory=lambda: default_timepoints())
    motion: list[RigidParams] = field(default_factory=list)
    noise_sigma: float = 0.0
    rng_seed: int = 0
    partial_volume: bool = False
    """Anti-alias edges with a one-voxel signed-distance ramp (masks stay binary)."""
    psf_sigma_vox: float = 0.0
    """Gaussian point-spread blur in voxels, applied before motion and noise."""
    render_motion: str = "warp"
    """``"warp"`` resamples the frame-0 image; ``"rasterize"`` draws the anatomy in the moved pose."""

    def __post_init__(self):
        t = np.asarray(self.timepoints, dtype=np.float64)
        if t.size < 1 or np.any(np.diff(t) <= 0):
            raise SpecError("timepoints must be strictly increasing")
        onsets = [v.tac.t0 for v in self.arteries + self.veins]
        if onsets and t[0] > min(onsets):
            raise SpecError("the first timepoint must precede every TAC onset")
        if self.motion and len(self.motion) != t.size:
            raise SpecError("motion needs one transform per timepoint")
        if self.skull_thickness <= 0 or min(self.skull_radii) <= self.skull_thickness:
            raise SpecError("skull radii must exceed the shell thickness")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be non-negative")
        if self.psf_sigma_vox < 0:
            raise SpecError("psf_sigma_vox must be non-negative")
        if self.render_motion not in ("warp", "rasterize"):
            raise SpecError(f"render_motion must be 'warp' or 'rasterize', got {self.render_motion!r}")
        self.timepoints = [float(x) for x in t]

    def frame_motion(self, index: int) -> RigidParams:
        return self.motion[index] if self.motion else RigidParams()

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "skull": {
                "center": list(self.skull_center),
                "radii": list(self.skull_radii),
                "thickness": self.skull_thickness,
                "bone_hu": self.bone_hu,
            },
            "soft_tissue_hu": self.soft_tissue_hu,
            "arteries": [a.to_dict() for a in self.arteries],
            "veins": [v.to_dict() for v in self.veins],
            "timepoints": list(self.timepoints),
            "motion": [m.to_dict() for m in self.motion],
            "noise_sigma": self.noise_sigma,
            "rng_seed": self.rng_seed,
            "partial_volume": self.partial_volume,
            "psf_sigma_vox": self.psf_sigma_vox,
            "render_motion": self.render_motion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        skull = d.get("skull", {})
        kw = {}
        if "timepoints" in d:
            kw["timepoints"] = d["timepoints"]
        return cls(
            geometry=VolumeGeometry.from_dict(d["geometry"]),
            skull_center=tuple(skull.get("center", (0.0, 0.0, 0.0))),
            skull_radii=tuple(skull.get("radii", (58.0, 54.0, 55.0))),
            skull_thickness=skull.get("thickness", 5.0),
            bone_hu=skull.get("bone_hu", 1000.0),
            soft_tissue_hu=d.get("soft_tissue_hu", 40.0),
            arteries=[VesselTree.from_dict(a, "artery") for a in d.get("arteries", [])],
            veins=[VesselTree.from_dict(v, "vein") for v in d.get("veins", [])],
            motion=[transform_from_dict(m) for m in d.get("motion", [])],
            noise_sigma=d.get("noise_sigma", 0.0),
            rng_seed=int(d.get("rng_seed", 0)),
            partial_volume=bool(d.get("partial_volume", False)),
            psf_sigma_vox=d.get("psf_sigma_vox", 0.0),
            render_motion=d.get("render_motion", "warp"),
            **kw,
        )

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def default_timepoints() -> list[float]:
    """17 evenly spaced times over [0, 60] s plus the two peak phases: 19 frames."""
    t = np.linspace(0.0, 60.0, 17).tolist() + [ARTERIAL_PEAK_S, VENOUS_PEAK_S]
    return sorted(t)


ARTERY_TAC = TimeAttenuationCurve(t0=7.0, tp=20.6, alpha=3.0, peak=400.0)
VEIN_TAC = TimeAttenuationCurve(t0=12.0, tp=33.3, alpha=3.0, peak=485.0)


def default_trees(artery_tac=ARTERY_TAC, vein_tac=VEIN_TAC) -> tuple[list[VesselTree], list[VesselTree]]:
    """Two mirrored artery trees in the front half and a branching sinus at the back."""
    arteries = []
    for sx in (-1.0, 1.0):
        trunk = [(sx * 15, 8, -38), (sx * 15, 8, -5), (sx * 20, 12, 15)]
        arteries.append(VesselTree([
            (trunk, 2.5),
            ([trunk[1], (sx * 34, 2, 8)], 1.6),
            ([trunk[2], (sx * 10, 28, 28)], 1.6),
        ], "artery", artery_tac))
    sinus = [(0, -28, 30), (0, -36, 8), (0, -30, -22)]
    veins = [VesselTree([
        (sinus, 3.0),
        ([sinus[1], (24, -30, -6)], 2.0),
        ([sinus[1], (-24, -30, -6)], 2.0),
    ], "vein", vein_tac)]
    return arteries, veins


def centered_geometry(n: int, spacing: float) -> VolumeGeometry:
    half = (n - 1) * spacing / 2.0
    return VolumeGeometry((n, n, n), (spacing,) * 3, (-half,) * 3)


REALISTIC = {"partial_volume": True, "psf_sigma_vox": 0.5, "render_motion": "rasterize"}


def default_spec(preset: str = "test", realistic: bool = False, **overrides) -> PhantomSpec:
    """Default study: 128^3 at 1 mm (``"test"``) or 256^3 at 0.5 mm (``"acceptance"``).

    The plain phantom has binary edges and warps moved frames out of frame 0,
    so a registration that resamples with the same interpolator can match it
    exactly.  ``realistic=True`` switches on partial-volume edges, a small
    PSF and moved-pose rasterization, which removes that shortcut.
    """
    grids = {"test": (128, 1.0), "acceptance": (256, 0.5), "small": (64, 2.0)}
    if preset not in grids:
        raise SpecError(f"unknown preset {preset!r}")
    arteries, veins = default_trees()
    kw = dict(geometry=centered_geometry(*grids[preset]), arteries=arteries, veins=veins)
    if realistic:
        kw.update(REALISTIC)
    kw.update(overrides)
    return PhantomSpec(**kw)


# --------------------------------------------------------------------------
# anatomy

def _point_polyline_distance(p, pts) -> float:
    p = np.asarray(p, dtype=np.float64)
    best = np.inf
    for a, b in zip(pts[:-1], pts[1:]):
        best = min(best, float(np.min(_segment_distance(p[None], a, b))))
    return best


def _segment_distance(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0:
        return np.linalg.norm(x - a, axis=-1)
    s = np.clip(((x - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(x - (a + s[..., None] * ab), axis=-1)


def _ramp(d: np.ndarray, h: float) -> np.ndarray:
    """Partial-volume fraction from a signed distance: 1 inside, 0 outside, linear over one voxel."""
    return np.clip(0.5 - d / h, 0.0, 1.0).astype(np.float32)


def rasterize_capsule(geometry: VolumeGeometry, a, b, radius: float, out: np.ndarray,
                      frac: np.ndarray | None = None) -> None:
    """Set voxels whose centre lies within ``radius`` of segment ``ab``.

    ``frac`` optionally receives the partial-volume fraction (max-combined).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lo_w = np.minimum(a, b) - radius
    hi_w = np.maximum(a, b) + radius
    corners = np.array([[x, y, z] for x in (lo_w[0], hi_w[0]) for y in (lo_w[1], hi_w[1])
                        for z in (lo_w[2], hi_w[2])])
    ijk = geometry.world_to_voxel(corners)
    lo = np.maximum(np.floor(ijk.min(axis=0)).astype(int) - 1, 0)
    hi = np.minimum(np.ceil(ijk.max(axis=0)).astype(int) + 2, np.asarray(geometry.dims))
    if np.any(hi <= lo):
        return
    grids = np.meshgrid(*[np.arange(l, h) for l, h in zip(lo, hi)], indexing="ij")
    pts = geometry.voxel_to_world(np.stack(grids, axis=-1).astype(np.float64))
    d = _segment_distance(pts, a, b) - radius
    box = (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(lo[2], hi[2]))
    out[box] |= d <= 0
    if frac is not None:
        np.maximum(frac[box], _ramp(d, min(geometry.spacing)), out=frac[box])


def trace_polyline(geometry: VolumeGeometry, pts: np.ndarray, out: np.ndarray) -> None:
    """Mark the nearest voxel of densely sampled points along a polyline."""
    step = 0.25 * min(geometry.spacing)
    dims = np.asarray(geometry.dims)
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(2, int(np.ceil(np.linalg.norm(b - a) / step)) + 1)
        s = np.linspace(0.0, 1.0, n)[:, None]
        idx = np.floor(geometry.world_to_voxel(a + s * (b - a)) + 0.5).astype(int)
        idx = idx[np.all((idx >= 0) & (idx < dims), axis=1)]
        out[idx[:, 0], idx[:, 1], idx[:, 2]] = True


def _ellipsoid(geometry: VolumeGeometry, center, radii, pose: RigidParams | None = None,
               soft: bool = False):
    nx, ny, nz = geometry.dims
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    out = np.zeros(geometry.dims, dtype=bool)
    frac = np.zeros(geometry.dims, dtype=np.float32) if soft else None
    c = np.asarray(center, dtype=np.float64)
    r = np.asarray(radii, dtype=np.float64)
    h = min(geometry.spacing)
    for k in range(nz):
        ijk = np.stack([ii, jj, np.full_like(ii, k)], axis=-1)
        w = geometry.voxel_to_world(ijk.astype(np.float64))
        if pose is not None:
            w = pose.apply(w.reshape(-1, 3)).reshape(w.shape)
        rho = np.sqrt(np.sum(((w - c) / r) ** 2, axis=-1))
        out[:, :, k] = rho <= 1.0
        if soft:
            # first-order distance to the surface along the ray from the centre
            dist = np.linalg.norm(w - c, axis=-1)
            d = np.where(rho > 0, (rho - 1.0) * dist / np.maximum(rho, 1e-12), -r.min())
            frac[:, :, k] = _ramp(d, h)
    return out, frac


def ellipsoid_mask(geometry: VolumeGeometry, center, radii, pose: RigidParams | None = None) -> np.ndarray:
    """Voxels whose centre, mapped through ``pose`` when given, falls inside the axis-aligned ellipsoid."""
    return _ellipsoid(geometry, center, radii, pose)[0]


@dataclass
class Anatomy:
    geometry: VolumeGeometry
    head: np.ndarray
    bone: np.ndarray
    soft_tissue: np.ndarray
    artery: np.ndarray
    vein: np.ndarray
    artery_centerline: np.ndarray
    vein_centerline: np.ndarray
    trees: list[tuple[np.ndarray, VesselTree, np.ndarray]]
    """Per-tree (mask, tree, partial-volume fraction), after precedence."""
    head_frac: np.ndarray | None = None
    inner_frac: np.ndarray | None = None


def _tree_mask(geometry, tree: VesselTree, pose: RigidParams | None = None, soft: bool = False):
    mask = np.zeros(geometry.dims, dtype=bool)
    frac = np.zeros(geometry.dims, dtype=np.float32) if soft else None
    cl = np.zeros(geometry.dims, dtype=bool)
    # a rigid pose maps a capsule onto a capsule: move the endpoints instead of the grid
    inv = pose.inverse() if pose is not None else None
    for pts, r in tree.segments:
        ends = inv.apply(pts) if inv is not None else pts
        for a, b in zip(ends[:-1], ends[1:]):
            rasterize_capsule(geometry, a, b, r, mask, frac)
        trace_polyline(geometry, pts, cl)
    if frac is None:
        frac = mask.astype(np.float32)
    return mask, cl, frac


def build_anatomy(spec: PhantomSpec, pose: RigidParams | None = None) -> Anatomy:
    """Rasterize skull, tissue and vessel masks (precedence artery > vein > bone > tissue).

    With ``pose`` the anatomy is rasterized as seen through that pull-back
    transform, so moved frames are drawn directly rather than resampled.
    Centerlines are only meaningful in the unmoved pose.
    """
    g = spec.geometry
    if pose is not None and pose.is_identity():
        pose = None
    pv = spec.partial_volume
    head, head_frac = _ellipsoid(g, spec.skull_center, spec.skull_radii, pose, soft=pv)
    inner, inner_frac = _ellipsoid(g, spec.skull_center,
                                   tuple(r - spec.skull_thickness for r in spec.skull_radii), pose, soft=pv)
    artery = np.zeros(g.dims, dtype=bool)
    vein = np.zeros(g.dims, dtype=bool)
    artery_cl = np.zeros(g.dims, dtype=bool)
    vein_cl = np.zeros(g.dims, dtype=bool)
    raw = []
    for tree in spec.arteries + spec.veins:
        m, cl, f = _tree_mask(g, tree, pose, soft=pv)
        if pose is None and np.any(m & ~inner):
            raise SpecError(f"{tree.kind} tree leaves the skull interior")
        raw.append((m, f, tree))
        if tree.kind == "artery":
            artery |= m
            artery_cl |= cl
        else:
            vein |= m
            vein_cl |= cl
    vein &= ~artery
    artery_cl &= artery
    vein_cl &= vein
    trees = []
    claimed = np.zeros(g.dims, dtype=bool)
    claimed_f = np.zeros(g.dims, dtype=np.float32)
    for m, f, tree in sorted(raw, key=lambda x: x[2].kind != "artery"):
        own = m & ~claimed
        claimed |= own
        own_f = np.minimum(f, 1.0 - claimed_f)
        claimed_f += own_f
        trees.append((own, tree, own_f))
    bone = head & ~inner
    tissue = inner & ~artery & ~vein
    if head_frac is None:
        head_frac, inner_frac = head.astype(np.float32), inner.astype(np.float32)
    return Anatomy(g, head, bone, tissue, artery, vein, artery_cl, vein_cl, trees, head_frac, inner_frac)


def _composite(anatomy: Anatomy, spec: PhantomSpec, t: float) -> np.ndarray:
    """Partial-volume mix: air, bone shell, tissue, then each tree's enhancement on top."""
    hu = np.full(anatomy.geometry.dims, AIR_HU, dtype=np.float32)
    hu += anatomy.head_frac * np.float32(spec.bone_hu - AIR_HU)
    hu += anatomy.inner_frac * np.float32(spec.soft_tissue_hu - spec.bone_hu)
    for _, tree, frac in anatomy.trees:
        hu += frac * np.float32(tac_eval(tree.tac, t))
    return hu


def _psf(hu: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    if spec.psf_sigma_vox <= 0:
        return hu
    return ndimage.gaussian_filter(hu, spec.psf_sigma_vox, mode="nearest", truncate=3.0)


def frame_noise(spec: PhantomSpec, frame_index: int) -> np.ndarray:
    """Noise field of one frame, generated slab by slab from its own seed stream."""
    g = spec.geometry
    out = np.empty(g.dims, dtype=np.float32)
    nz = g.dims[2]

    def work(k0, k1):
        rng = np.random.default_rng([spec.rng_seed, frame_index, k0])
        out[:, :, k0:k1] = rng.normal(0.0, spec.noise_sigma, size=(g.dims[0], g.dims[1], k1 - k0))

    _parallel.run_slabs(work, nz)
    return out


def render_frame(anatomy: Anatomy, spec: PhantomSpec, t: float,
                 motion: RigidParams | None = None, frame_index: int = 0) -> ScalarVolume:
    """Render one acquisition at time ``t`` seen through ``motion`` (pull-back).

    The frame-0 composite is blurred by the PSF, then either warped by
    ``motion`` or, with ``render_motion="rasterize"``, drawn directly in the
    moved pose; noise comes last.
    """
    moved = motion is not None and not motion.is_identity()
    if moved and spec.render_motion == "rasterize":
        anatomy = build_anatomy(spec, motion)
        moved = False
    vol = ScalarVolume(anatomy.geometry, _psf(_composite(anatomy, spec, t), spec))
    if moved:
        vol = resample_with_transform(vol, motion, anatomy.geometry, fill=AIR_HU)
    if spec.noise_sigma > 0:
        vol = vol.with_data(vol.data + frame_noise(spec, frame_index))
    return vol


@dataclass
class PhantomStudy:
    frames: list[tuple[float, ScalarVolume]]
    gt_artery: LabelVolume
    gt_vein: LabelVolume
    gt_artery_centerline: LabelVolume
    gt_vein_centerline: LabelVolume
    true_motion: list[RigidParams]
    baseline_index: int = 0
    spec: PhantomSpec | None = None

    @property
    def times(self) -> list[float]:
        return [t for t, _ in self.frames]

    def frame_at(self, t: float) -> ScalarVolume:
        i = int(np.argmin(np.abs(np.asarray(self.times) - t)))
        return self.frames[i][1]

    def index_at(self, t: float) -> int:
        return int(np.argmin(np.abs(np.asarray(self.times) - t)))

    @property
    def baseline(self) -> ScalarVolume:
        return self.frames[self.baseline_index][1]

    def gt_labels(self) -> LabelVolume:
        """Artery (1) and vein (2) in one label volume."""
        data = self.gt_artery.data.astype(np.uint8) + 2 * self.gt_vein.data.astype(np.uint8)
        return LabelVolume(self.gt_artery.geometry, data, {1: "artery", 2: "vein"})


def generate_study(spec: PhantomSpec) -> PhantomStudy:
    anatomy = build_anatomy(spec)
    posed = {}
    frames = []
    for i, t in enumerate(spec.timepoints):
        m = spec.frame_motion(i)
        if spec.render_motion == "rasterize" and not m.is_identity():
            # one rasterization per distinct pose
            key = json.dumps(m.to_dict(), sort_keys=True)
            if key not in posed:
                posed[key] = build_anatomy(spec, m)
            frames.append((t, render_frame(posed[key], spec, t, None, i)))
        else:
            frames.append((t, render_frame(anatomy, spec, t, m, i)))
    g = spec.geometry
    return PhantomStudy(
        frames=frames,
        gt_artery=LabelVolume.from_mask(g, anatomy.artery, "artery"),
        gt_vein=LabelVolume.from_mask(g, anatomy.vein, "vein"),
        gt_artery_centerline=LabelVolume.from_mask(g, anatomy.artery_centerline, "artery"),
        gt_vein_centerline=LabelVolume.from_mask(g, anatomy.vein_centerline, "vein"),
        true_motion=[spec.frame_motion(i) for i in range(len(spec.timepoints))],
        baseline_index=0,
        spec=spec,
    )


def head_template(spec: PhantomSpec, scale: float = 1.0 / 1.08,
                  roi_margin: float = 1.1) -> tuple[ScalarVolume, LabelVolume]:
    """A vessel-free head on the study grid, scaled about the skull center, plus its ROI.

    The ROI is the skull ellipsoid enlarged by ``roi_margin``; registering the
    template onto a patient frame carries it into patient space.
    """
    radii = tuple(r * scale for r in spec.skull_radii)
    tpl_spec = PhantomSpec(
        geometry=spec.geometry,
        skull_center=spec.skull_center,
        skull_radii=radii,
        skull_thickness=spec.skull_thickness * scale,
        bone_hu=spec.bone_hu,
        soft_tissue_hu=spec.soft_tissue_hu,
        timepoints=[0.0],
        partial_volume=spec.partial_volume,
        psf_sigma_vox=spec.psf_sigma_vox,
    )
    anatomy = build_anatomy(tpl_spec)
    vol = ScalarVolume(spec.geometry, _psf(_composite(anatomy, tpl_spec, 0.0), spec))
    roi = ellipsoid_mask(spec.geometry, spec.skull_center, tuple(r * roi_margin for r in radii))
    return vol, LabelVolume.from_mask(spec.geometry, roi, "head")


# --------------------------------------------------------------------------
# on-disk layout

def frame_filename(t: float) -> str:
    return f"frame_{t:.2f}.nii.gz"


def _write_index_list(mask: np.ndarray, path: Path) -> None:
    idx = np.argwhere(mask)
    idx = idx[np.lexsort((idx[:, 0], idx[:, 1], idx[:, 2]))]
    path.write_text("".join(f"{i} {j} {k}\n" for i, j, k in idx))


def write_study(study: PhantomStudy, out_dir) -> dict:
    """Write frames, ground truth, centerlines and motion; returns the file index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"frames": []}
    for t, vol in study.frames:
        name = frame_filename(t)
        write_volume(vol, out / name)
        files["frames"].append({"time": t, "file": name})
    for key in ("gt_artery", "gt_vein", "gt_artery_centerline", "gt_vein_centerline"):
        write_volume(getattr(study, key), out / f"{key}.nii.gz")
        files[key] = f"{key}.nii.gz"
    write_volume(study.gt_labels(), out / "gt_labels.nii.gz")
    files["gt_labels"] = "gt_labels.nii.gz"
    for key in ("gt_artery_centerline", "gt_vein_centerline"):
        _write_index_list(getattr(study, key).data != 0, out / f"{key}.txt")
    (out / "motion.json").write_text(json.dumps(
        [{"time": t, **m.to_dict()} for (t, _), m in zip(study.frames, study.true_motion)], indent=2))
    files["motion"] = "motion.json"
    files["baseline_index"] = study.baseline_index
    if study.spec is not None:
        study.spec.save(out / "phantom.json")
        files["spec"] = "phantom.json"
    (out / "study.json").write_text(json.dumps(files, indent=2))
    return files


def read_study(path) -> PhantomStudy:
    root = Path(path)
    files = json.loads((root / "study.json").read_text())
    frames = [(f["time"], read_volume(root / f["file"])) for f in files["frames"]]
    motion = [transform_from_dict({k: v for k, v in m.items() if k != "time"})
              for m in json.loads((root / files["motion"]).read_text())]
    spec = PhantomSpec.load(root / files["spec"]) if "spec" in files else None
    return PhantomStudy(
        frames=frames,
        gt_artery=read_labels(root / files["gt_artery"]),
        gt_vein=read_labels(root / files["gt_vein"]),
        gt_artery_centerline=read_labels(root / files["gt_artery_centerline"]),
        gt_vein_centerline=read_labels(root / files["gt_vein_centerline"]),
        true_motion=motion,
        baseline_index=files.get("baseline_index", 0),
        spec=spec,
    )
