"""Sensitivity-oriented vessel segmentation metrics and per-case reports.

mdc    |A ∩ P| / |A|
tsens  |C ∩ P| / |C|, C the centerline of A
adhd   mean over surface voxels of A of the distance to the nearest surface voxel of P

All three look only at the ground truth side, so prediction mass outside the
reference is never penalized.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, EmptyReferenceError, EmptySetError, EmptySurfaceError, GeometryError
from .segmentation import VoxelSet, skeletonize, surface_mask
from .volume import LabelVolume, ScalarVolume


class Phase(str, enum.Enum):
    ARTERIAL = "Arterial"
    VENOUS = "Venous"
    UNKNOWN = "Unknown"


def _as_mask(x) -> np.ndarray:
    if isinstance(x, LabelVolume):
        return x.data != 0
    if isinstance(x, VoxelSet):
        return x.to_mask()
    return np.asarray(x, dtype=bool)


def _same_grid(a, b):
    ga = getattr(a, "geometry", None)
    gb = getattr(b, "geometry", None)
    if ga is not None and gb is not None and not ga.matches(gb):
        raise GeometryError("ground truth and prediction geometries differ")


def mdc(gt, pred) -> float:
    """Modified Dice: fraction of ground-truth voxels covered by the prediction."""
    _same_grid(gt, pred)
    a, p = _as_mask(gt), _as_mask(pred)
    if a.shape != p.shape:
        raise GeometryError(f"shape mismatch {a.shape} vs {p.shape}")
    n = int(np.count_nonzero(a))
    if n == 0:
        raise EmptyReferenceError("ground truth mask is empty")
    return np.count_nonzero(a & p) / n


def tsens(gt_centerline, pred) -> float:
    """Topology sensitivity: fraction of centerline voxels inside the prediction."""
    _same_grid(gt_centerline, pred)
    p = _as_mask(pred)
    if isinstance(gt_centerline, VoxelSet):
        if len(gt_centerline) == 0:
            raise EmptyReferenceError("centerline is empty")
        return float(np.count_nonzero(gt_centerline.values(p))) / len(gt_centerline)
    c = _as_mask(gt_centerline)
    n = int(np.count_nonzero(c))
    if n == 0:
        raise EmptyReferenceError("centerline is empty")
    return np.count_nonzero(c & p) / n


class DistanceIndex:
    """Exact nearest-neighbour queries over a point set in world mm."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise EmptySurfaceError("cannot index an empty point set")
        self._tree = cKDTree(self.points)

    @classmethod
    def from_voxels(cls, voxels: VoxelSet) -> "DistanceIndex":
        return cls(voxels.world_points())

    def query(self, points) -> np.ndarray:
        d, _ = self._tree.query(np.asarray(points, dtype=np.float64).reshape(-1, 3), k=1)
        return d


def adhd(gt_surface: VoxelSet, pred_surface: VoxelSet) -> float:
    """Average directed surface distance (mm) from ground truth to prediction."""
    if len(gt_surface) == 0:
        raise EmptySurfaceError("ground truth surface is empty")
    if len(pred_surface) == 0:
        raise EmptySurfaceError("prediction surface is empty")
    d = DistanceIndex.from_voxels(pred_surface).query(gt_surface.world_points())
    return float(np.sum(d) / len(d))


def mean_hu(vol: ScalarVolume, points: VoxelSet) -> float:
    if len(points) == 0:
        raise EmptySetError("mean over an empty voxel set")
    return float(np.mean(points.values(vol.data).astype(np.float64)))


def classify_phase(vol: ScalarVolume, artery_cl: VoxelSet, vein_cl: VoxelSet) -> Phase:
    """Arterial when the mean HU along the artery centerline exceeds the vein's; ties are venous."""
    return Phase.ARTERIAL if mean_hu(vol, artery_cl) > mean_hu(vol, vein_cl) else Phase.VENOUS


def hu_deltas(mean_hu_per_frame, reference_hu: float) -> np.ndarray:
    """Absolute difference between each frame's mean vessel HU and a reference HU."""
    return np.abs(np.asarray(mean_hu_per_frame, dtype=np.float64) - reference_hu)


# --------------------------------------------------------------------------
# reports

@dataclass
class LabelMetrics:
    mdc: float | None
    tsens: float | None
    adhd: float | None
    gt_voxels: int
    status: str = "ok"


@dataclass
class MetricsReport:
    case_id: str
    per_label: dict[str, LabelMetrics]
    phase: Phase = Phase.UNKNOWN
    mean_hu: dict[str, float] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "per_label": {k: asdict(v) for k, v in self.per_label.items()},
            "phase": self.phase.value,
            "mean_hu": dict(self.mean_hu),
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            d["case_id"],
            {k: LabelMetrics(**v) for k, v in d["per_label"].items()},
            Phase(d.get("phase", "Unknown")),
            d.get("mean_hu", {}),
            d.get("provenance", {}),
        )

    def csv_rows(self) -> list[dict]:
        return [
            {
                "case_id": self.case_id,
                "label": name,
                "mdc": m.mdc,
                "tsens": m.tsens,
                "adhd_mm": m.adhd,
                "gt_voxels": m.gt_voxels,
                "phase": self.phase.value,
            }
            for name, m in self.per_label.items()
        ]


CSV_COLUMNS = ["case_id", "label", "mdc", "tsens", "adhd_mm", "gt_voxels", "phase"]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        for row in r.csv_rows():
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buf.getvalue()


def aggregate(reports) -> dict[str, dict[str, tuple[float, float]]]:
    """Mean and standard deviation of each metric per label across cases (absent rows skipped)."""
    acc: dict[str, dict[str, list[float]]] = {}
    for r in reports:
        for name, m in r.per_label.items():
            for key in ("mdc", "tsens", "adhd"):
                v = getattr(m, key)
                if v is not None:
                    acc.setdefault(name, {}).setdefault(key, []).append(v)
    return {
        name: {k: (float(np.mean(v)), float(np.std(v))) for k, v in metrics.items()}
        for name, metrics in acc.items()
    }


def _resolve_label(labels: LabelVolume, key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    if isinstance(key, str) and key.isdigit():
        return int(key)
    try:
        return labels.label_of(key)
    except KeyError:
        raise ConfigurationError(f"unknown label {key!r}") from None


def evaluate_case(gt: LabelVolume, pred: LabelVolume, pairing: dict, vol: ScalarVolume | None = None,
                  centerlines: dict | None = None, case_id: str = "case",
                  provenance: dict | None = None) -> MetricsReport:
    """Score every ground-truth label against its paired prediction label(s).

    ``pairing`` maps a ground-truth label (name or id) to one prediction
    label or a list of them; several ground-truth labels may share the same
    prediction label.  ``centerlines`` optionally maps ground-truth label
    names to precomputed centerline :class:`VoxelSet` objects; otherwise the
    ground truth is skeletonized.
    """
    if not gt.geometry.matches(pred.geometry):
        raise GeometryError("ground truth and prediction geometries differ")
    pair = {}
    for k, v in pairing.items():
        targets = v if isinstance(v, (list, tuple)) else [v]
        pair[_resolve_label(gt, k)] = [_resolve_label(pred, t) for t in targets]
    centerlines = dict(centerlines or {})

    per_label = {}
    cls_cl = {}
    for lab, name in gt.label_names.items():
        if lab == 0:
            continue
        if lab not in pair:
            raise ConfigurationError(f"no pairing for ground-truth label {name!r} ({lab})")
        a = gt.data == lab
        n = int(np.count_nonzero(a))
        if n == 0:
            per_label[name] = LabelMetrics(None, None, None, 0, "absent")
            continue
        p = np.isin(pred.data, pair[lab])
        cl = centerlines.get(name)
        if cl is None:
            cl = skeletonize(LabelVolume.from_mask(gt.geometry, a))
        cls_cl[name] = cl
        a_surf = VoxelSet.from_mask(gt.geometry, surface_mask(a))
        p_surf = VoxelSet.from_mask(gt.geometry, surface_mask(p))
        d = adhd(a_surf, p_surf) if len(p_surf) else None
        per_label[name] = LabelMetrics(
            mdc(a, p), tsens(cl, p), d, n, "ok" if d is not None else "empty-prediction"
        )

    phase = Phase.UNKNOWN
    hu = {}
    if vol is not None and "artery" in cls_cl and "vein" in cls_cl:
        hu = {k: mean_hu(vol, cls_cl[k]) for k in ("artery", "vein")}
        phase = classify_phase(vol, cls_cl["artery"], cls_cl["vein"])
    return MetricsReport(case_id, per_label, phase, hu, dict(provenance or {}))
