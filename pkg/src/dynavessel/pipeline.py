"""Declarative batch pipeline with content-addressed caching.

A config is a JSON object::

    {"workspace": "run", "cache": true, "seed": 0,
     "stages": [{"name": "phantom", "kind": "phantom", "inputs": {}, "params": {...}},
                {"name": "prep", "kind": "preprocess",
                 "inputs": {"study": "$phantom.study"}, "params": {...}}, ...]}

Input values of the form ``"$stage.output"`` refer to an output of an earlier
stage; anything else is a path to an external file.  Each stage writes its
outputs under ``workspace/<name>/``.  A stage's cache key is the SHA-256 of
its kind, parameters, seed and the digests of its inputs, so changing one
parameter reruns exactly that stage and whatever its outputs feed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DynaVesselError, LockError, StageError
from .metrics import MetricsReport, aggregate, evaluate_case, reports_to_csv
from .nifti import read_labels, read_volume, write_volume
from .phantom import default_spec, generate_study, head_template, read_study, write_study
from .registration import RegistrationOptions, resample_with_transform
from .segmentation import (
    PhansalkarParams,
    VoxelSet,
    kapur_segment,
    phansalkar_threshold,
    remove_small_components,
)
from .suppression import SeparationOptions, head_roi_mask, subtract_baseline, vessel_separate
from .transforms import RigidParams, load_transform
from .volume import AIR_HU, LabelVolume, apply_mask, resample_isotropic, resample_labels

log = logging.getLogger(__name__)

LOCK_NAME = ".dynavessel.lock"
MANIFEST_NAME = "manifest.json"


# --------------------------------------------------------------------------
# stage catalogue

@dataclass(frozen=True)
class StageKind:
    required: tuple[str, ...]
    optional: tuple[str, ...]
    outputs: tuple[str, ...]
    params: dict


def _positive(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0


def _non_negative(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and v >= 0


def _int_at_least(n):
    return lambda v: isinstance(v, int) and not isinstance(v, bool) and v >= n


def _one_of(*choices):
    return lambda v: v in choices


def _number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _spacing(v):
    return v is None or _positive(v)


def _triple(v):
    return isinstance(v, (list, tuple)) and len(v) == 3 and all(_number(x) for x in v)


def _motion(v):
    return v is None or (isinstance(v, dict) and set(v) <= {"angles_deg", "translation_mm", "times"}
                         and _triple(v.get("angles_deg", [0, 0, 0]))
                         and _triple(v.get("translation_mm", [0, 0, 0])))


def _pairing(v):
    return isinstance(v, dict) and len(v) > 0


KINDS: dict[str, StageKind] = {
    "phantom": StageKind(
        (), ("spec",), ("study", "gt_labels", "template", "template_roi"),
        {"preset": _one_of("test", "acceptance", "small"), "noise_sigma": _non_negative,
         "motion": _motion, "template_scale": _positive, "realistic": _one_of(True, False)},
    ),
    "preprocess": StageKind(
        ("study",), ("template", "template_roi"), ("xa", "xv", "baseline", "roi"),
        {"arterial_time": _non_negative, "venous_time": _non_negative, "baseline_time": _non_negative,
         "spacing": _spacing, "roi": _one_of(True, False)},
    ),
    "suppress": StageKind(
        ("xa", "xv", "baseline"), (), ("sa", "sv", "s_star_a", "s_star_v", "transforms"),
        {"alg1_operand": _one_of("subtracted", "raw"), "pre_register": _one_of(True, False),
         "register": _one_of(True, False)},
    ),
    "segment": StageKind(
        ("artery", "vein"), ("transforms", "roi"), ("pred",),
        {"method": _one_of("threshold", "phansalkar", "kapur"), "level": _number,
         "radius": _int_at_least(1), "min_component": _int_at_least(1), "connectivity": _one_of(6, 26)},
    ),
    "evaluate": StageKind(
        ("gt", "pred"), ("volume", "study"), ("report",),
        {"pairing": _pairing, "case_id": lambda v: isinstance(v, str)},
    ),
    "report": StageKind(
        ("reports",), (), ("csv", "summary"),
        {},
    ),
}

DEFAULTS: dict[str, dict] = {
    "phantom": {"preset": "small", "noise_sigma": 0.0, "motion": None, "template_scale": 1.0 / 1.08,
                "realistic": True},
    "preprocess": {"arterial_time": 27.6, "venous_time": 45.3, "baseline_time": 0.0,
                   "spacing": None, "roi": True},
    "suppress": {"alg1_operand": "subtracted", "pre_register": True, "register": True},
    "segment": {"method": "threshold", "level": 100.0, "radius": 15, "min_component": 1,
                "connectivity": 26},
    "evaluate": {"pairing": {"artery": 1, "vein": 2}, "case_id": "case"},
    "report": {},
}


@dataclass
class Diagnostic:
    code: str
    stage: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.stage}: {self.message}"


def default_config(workspace="pipeline-run", seed: int = 0, preset: str = "small",
                   noise_sigma: float = 10.0, motion: dict | None = None) -> dict:
    """The six-stage phantom pipeline: phantom, preprocess, suppress, segment, evaluate, report.

    The venous frame gets a small rigid motion by default so the separation
    stage has something to register.
    """
    if motion is None:
        motion = {"angles_deg": [1.0, -1.0, 0.5], "translation_mm": [1.0, -1.0, 0.5], "times": [45.3]}
    return {
        "workspace": str(workspace),
        "cache": True,
        "seed": seed,
        "stages": [
            {"name": "phantom", "kind": "phantom", "inputs": {},
             "params": {"preset": preset, "noise_sigma": noise_sigma, "motion": motion}},
            {"name": "preprocess", "kind": "preprocess",
             "inputs": {"study": "$phantom.study", "template": "$phantom.template",
                        "template_roi": "$phantom.template_roi"},
             "params": {}},
            {"name": "suppress", "kind": "suppress",
             "inputs": {"xa": "$preprocess.xa", "xv": "$preprocess.xv", "baseline": "$preprocess.baseline"},
             "params": {}},
            {"name": "segment", "kind": "segment",
             "inputs": {"artery": "$suppress.s_star_a", "vein": "$suppress.s_star_v",
                        "transforms": "$suppress.transforms"},
             "params": {"level": 100.0}},
            {"name": "evaluate", "kind": "evaluate",
             "inputs": {"gt": "$phantom.gt_labels", "pred": "$segment.pred", "volume": "$preprocess.xa",
                        "study": "$phantom.study"},
             "params": {"case_id": "phantom"}},
            {"name": "report", "kind": "report", "inputs": {"reports": ["$evaluate.report"]}, "params": {}},
        ],
    }


# --------------------------------------------------------------------------
# validation

def _refs(value) -> list:
    return list(value) if isinstance(value, (list, tuple)) else [value]


def validate(config, base_dir=None) -> list[Diagnostic]:
    """Check schema, references and parameter ranges; an empty list means runnable."""
    diags: list[Diagnostic] = []
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    def bad(code, stage, msg):
        diags.append(Diagnostic(code, stage, msg))

    if not isinstance(config, dict):
        return [Diagnostic("schema", "<config>", "config must be a JSON object")]
    for key in config:
        if key not in ("workspace", "cache", "seed", "stages"):
            bad("schema", "<config>", f"unknown key {key!r}")
    if not isinstance(config.get("workspace"), str) or not config.get("workspace"):
        bad("schema", "<config>", "workspace must be a non-empty string")
    if not isinstance(config.get("cache", True), bool):
        bad("schema", "<config>", "cache must be true or false")
    seed = config.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        bad("range", "<config>", "seed must be a non-negative integer")
    stages = config.get("stages")
    if not isinstance(stages, list) or not stages:
        bad("schema", "<config>", "stages must be a non-empty list")
        return diags

    produced: dict[str, tuple[str, ...]] = {}
    for pos, st in enumerate(stages):
        if not isinstance(st, dict):
            bad("schema", f"#{pos}", "stage must be an object")
            continue
        kind = st.get("kind")
        name = st.get("name", kind)
        label = name if isinstance(name, str) else f"#{pos}"
        if kind not in KINDS:
            bad("schema", label, f"unknown stage kind {kind!r}")
            continue
        if not isinstance(name, str) or not name or "/" in name or name.startswith("."):
            bad("schema", label, "stage name must be a plain non-empty string")
            continue
        if name in produced:
            bad("schema", name, "duplicate stage name")
        for key in st:
            if key not in ("name", "kind", "inputs", "params"):
                bad("schema", name, f"unknown key {key!r}")
        spec = KINDS[kind]
        inputs = st.get("inputs", {})
        params = st.get("params", {})
        if not isinstance(inputs, dict) or not isinstance(params, dict):
            bad("schema", name, "inputs and params must be objects")
            continue
        for req in spec.required:
            if req not in inputs:
                bad("missing-input", name, f"required input {req!r} not given")
        for key, value in inputs.items():
            if key not in spec.required + spec.optional:
                bad("schema", name, f"unknown input {key!r}")
                continue
            if isinstance(value, list) and key != "reports":
                bad("schema", name, f"input {key!r} takes a single reference")
                continue
            for ref in _refs(value):
                if not isinstance(ref, str) or not ref:
                    bad("schema", name, f"input {key!r} must be a string")
                elif ref.startswith("$"):
                    src, _, out = ref[1:].partition(".")
                    if src not in produced or out not in produced[src]:
                        bad("unresolved-reference", name, f"{ref} does not name an earlier stage output")
                elif not (base / ref).exists():
                    bad("missing-file", name, f"input file {ref} does not exist")
        for key, value in params.items():
            check = spec.params.get(key)
            if check is None:
                bad("schema", name, f"unknown parameter {key!r}")
            elif not check(value):
                bad("range", name, f"parameter {key}={value!r} is out of range")
        produced[name] = spec.outputs
    return diags


# --------------------------------------------------------------------------
# digests

def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def file_digest(path) -> str:
    """SHA-256 of a file, or of every file under a directory (relative names included)."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(p.relative_to(path).as_posix().encode() + b"\0")
            h.update(file_digest(p).encode())
        return h.hexdigest()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_key(kind: str, params: dict, input_digests: dict, seed: int) -> str:
    return hashlib.sha256(_canonical(
        {"kind": kind, "params": params, "inputs": input_digests, "seed": seed}
    )).hexdigest()


def cache_dir(workspace) -> Path:
    env = os.environ.get("DYNAVESSEL_CACHE")
    return Path(env) if env else Path(workspace) / ".cache"


# --------------------------------------------------------------------------
# stage implementations; each returns {output name: path relative to out_dir}

def _motion_list(spec, motion: dict | None) -> list:
    if not motion:
        return []
    m = RigidParams(np.deg2rad(motion.get("angles_deg", [0, 0, 0])), motion.get("translation_mm", [0, 0, 0]))
    times = motion.get("times")
    out = []
    for t in spec.timepoints:
        hit = times is None or any(abs(t - x) < 1e-6 for x in times)
        out.append(m if hit and t > 0 else RigidParams())
    return out


def _run_phantom(inputs, params, seed, out: Path) -> dict:
    from .phantom import PhantomSpec

    if "spec" in inputs:
        spec = PhantomSpec.load(inputs["spec"])
        spec = replace(spec, rng_seed=seed)
    else:
        spec = default_spec(params["preset"], realistic=params["realistic"],
                            noise_sigma=float(params["noise_sigma"]), rng_seed=seed)
    if params.get("motion"):
        spec = replace(spec, motion=_motion_list(spec, params["motion"]))
    study = generate_study(spec)
    write_study(study, out / "study")
    write_volume(study.gt_labels(), out / "gt_labels.nii.gz")
    tpl, roi = head_template(spec, params["template_scale"])
    write_volume(tpl, out / "template.nii.gz")
    write_volume(roi, out / "template_roi.nii.gz")
    return {"study": "study", "gt_labels": "gt_labels.nii.gz", "template": "template.nii.gz",
            "template_roi": "template_roi.nii.gz"}


def _run_preprocess(inputs, params, seed, out: Path) -> dict:
    study = read_study(inputs["study"])
    xa = study.frame_at(params["arterial_time"])
    xv = study.frame_at(params["venous_time"])
    base = study.frame_at(params["baseline_time"])
    if params["roi"]:
        if "template" not in inputs or "template_roi" not in inputs:
            raise ConfigurationError("roi=true needs template and template_roi inputs")
        roi = head_roi_mask(xa, read_volume(inputs["template"]), read_labels(inputs["template_roi"]))
        xa, xv, base = (apply_mask(v, roi, AIR_HU) for v in (xa, xv, base))
    else:
        roi = LabelVolume.from_mask(xa.geometry, np.ones(xa.geometry.dims, bool), "head")
    if params["spacing"] is not None:
        xa, xv, base = (resample_isotropic(v, params["spacing"]) for v in (xa, xv, base))
        roi = resample_labels(roi, xa.geometry)
    files = {"xa": "xa.nii.gz", "xv": "xv.nii.gz", "baseline": "baseline.nii.gz", "roi": "roi.nii.gz"}
    for key, vol in zip(files, (xa, xv, base, roi)):
        write_volume(vol, out / files[key])
    return files


def _run_suppress(inputs, params, seed, out: Path) -> dict:
    xa, xv, base = (read_volume(inputs[k]) for k in ("xa", "xv", "baseline"))
    sa = subtract_baseline(xa, base, pre_register=params["pre_register"])
    sv = subtract_baseline(xv, base, pre_register=params["pre_register"])
    res = vessel_separate(sa, sv, xa, xv, SeparationOptions(
        alg1_operand=params["alg1_operand"], registration=RegistrationOptions(), register=params["register"]))
    files = {"sa": "sa.nii.gz", "sv": "sv.nii.gz", "s_star_a": "s_star_a.nii.gz", "s_star_v": "s_star_v.nii.gz"}
    for key, vol in zip(files, (sa, sv, res.s_star_a, res.s_star_v)):
        write_volume(vol, out / files[key])
    (out / "transforms.json").write_text(json.dumps(
        {"g_ra": res.g_ra.to_dict(), "g_rv": res.g_rv.to_dict(),
         "ncc_ra": _finite_or_none(res.ncc_ra), "ncc_rv": _finite_or_none(res.ncc_rv)}, indent=2))
    files["transforms"] = "transforms.json"
    return files


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


def _segment_one(vol, params, roi):
    method = params["method"]
    if method == "threshold":
        m = vol.data > params["level"]
        if roi is not None:
            m &= roi
    elif method == "phansalkar":
        m = phansalkar_threshold(vol, PhansalkarParams(window_radius=params["radius"]), roi).data != 0
    else:
        m = kapur_segment(vol, roi=roi).data != 0
    if params["min_component"] > 1:
        m = remove_small_components(m, params["connectivity"], params["min_component"])
    return m


def _run_segment(inputs, params, seed, out: Path) -> dict:
    sa = read_volume(inputs["artery"])
    sv = read_volume(inputs["vein"])
    if "transforms" in inputs:
        g_ra = load_transform_entry(inputs["transforms"], "g_ra")
        sv = resample_with_transform(sv, g_ra, sa.geometry, fill=0.0)
    elif not sv.geometry.matches(sa.geometry):
        raise ConfigurationError("venous volume is on another grid; pass the transforms input")
    roi = None
    if "roi" in inputs:
        roi_l = read_labels(inputs["roi"])
        if not roi_l.geometry.matches(sa.geometry):
            roi_l = resample_labels(roi_l, sa.geometry)
        roi = roi_l.data != 0
    art = _segment_one(sa, params, roi)
    ven = _segment_one(sv, params, roi) & ~art
    pred = LabelVolume(sa.geometry, art.astype(np.uint8) + 2 * ven.astype(np.uint8), {1: "artery", 2: "vein"})
    write_volume(pred, out / "pred.nii.gz")
    return {"pred": "pred.nii.gz"}


def load_transform_entry(path, key: str):
    """One transform out of a separation ``transforms.json`` (or a plain transform file)."""
    from .transforms import transform_from_dict

    d = json.loads(Path(path).read_text())
    if key in d:
        return transform_from_dict(d[key])
    return load_transform(path)


def _run_evaluate(inputs, params, seed, out: Path) -> dict:
    gt = read_labels(inputs["gt"])
    pred = read_labels(inputs["pred"])
    if not pred.geometry.matches(gt.geometry):
        pred = resample_labels(pred, gt.geometry)
    vol = None
    if "volume" in inputs:
        vol = read_volume(inputs["volume"])
        if not vol.geometry.matches(gt.geometry):
            vol = None
    centerlines = {}
    if "study" in inputs:
        root = Path(inputs["study"])
        for name in ("artery", "vein"):
            p = root / f"gt_{name}_centerline.nii.gz"
            if p.exists():
                cl = read_labels(p)
                if cl.geometry.matches(gt.geometry):
                    centerlines[name] = VoxelSet.from_mask(gt.geometry, cl.data != 0)
    report = evaluate_case(gt, pred, params["pairing"], vol, centerlines, params["case_id"],
                           {"gt": _short(inputs["gt"]), "pred": _short(inputs["pred"])})
    (out / "report.json").write_text(report.to_json())
    return {"report": "report.json"}


def _short(path) -> str:
    return file_digest(path)[:16]


def _run_report(inputs, params, seed, out: Path) -> dict:
    reports = [MetricsReport.from_dict(json.loads(Path(p).read_text())) for p in inputs["reports"]]
    (out / "metrics.csv").write_text(reports_to_csv(reports))
    summary = {name: {k: {"mean": m, "std": s} for k, (m, s) in metrics.items()}
               for name, metrics in aggregate(reports).items()}
    (out / "summary.json").write_text(json.dumps({"cases": len(reports), "labels": summary}, indent=2))
    return {"csv": "metrics.csv", "summary": "summary.json"}


RUNNERS = {
    "phantom": _run_phantom,
    "preprocess": _run_preprocess,
    "suppress": _run_suppress,
    "segment": _run_segment,
    "evaluate": _run_evaluate,
    "report": _run_report,
}


# --------------------------------------------------------------------------
# execution

class WorkspaceLock:
    """Exclusive lock file; a second pipeline on the same workspace is refused."""

    def __init__(self, workspace: Path):
        self.path = Path(workspace) / LOCK_NAME

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(f"workspace is locked by another run ({self.path})") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _copy_outputs(src: Path, dst: Path, outputs: dict) -> None:
    if dst.exists():
        shutil.rmtree(dst)
    dst.mkdir(parents=True)
    for rel in outputs.values():
        s, d = src / rel, dst / rel
        if s.is_dir():
            shutil.copytree(s, d)
        else:
            shutil.copy2(s, d)


def _restore(entry: Path, out: Path, record: dict) -> bool:
    """Put cached outputs in place; False if the cache entry is damaged."""
    outputs = {k: v["path"] for k, v in record["outputs"].items()}
    for k, rel in outputs.items():
        p = entry / rel
        if not p.exists() or file_digest(p) != record["outputs"][k]["digest"]:
            return False
    current_ok = out.exists() and all(
        (out / rel).exists() and file_digest(out / rel) == record["outputs"][k]["digest"]
        for k, rel in outputs.items()
    )
    if not current_ok:
        _copy_outputs(entry, out, outputs)
    return True


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def run(config, base_dir=None) -> dict:
    """Execute the stages in order and return the run manifest (also written to the workspace).

    Relative workspace and file paths are taken relative to ``base_dir``
    (default: the current directory).
    """
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    diags = validate(config, base)
    if diags:
        raise ConfigurationError("; ".join(str(d) for d in diags))
    seed = int(config.get("seed", 0))
    use_cache = bool(config.get("cache", True))
    ws = base / config["workspace"]
    ws.mkdir(parents=True, exist_ok=True)
    cache = cache_dir(ws)

    manifest = {
        "config_digest": hashlib.sha256(_canonical(config)).hexdigest(),
        "seed": seed,
        "cache": use_cache,
        "stages": [],
        "executed": 0,
        "status": "running",
    }
    outputs: dict[str, dict[str, Path]] = {}
    digests: dict[str, dict[str, str]] = {}

    def resolve(ref: str):
        if ref.startswith("$"):
            src, _, out = ref[1:].partition(".")
            return outputs[src][out], digests[src][out]
        p = base / ref
        return p, file_digest(p)

    with WorkspaceLock(ws):
        for st in config["stages"]:
            kind = st["kind"]
            name = st.get("name", kind)
            params = {**DEFAULTS[kind], **st.get("params", {})}
            in_paths, in_digests = {}, {}
            for key, value in st.get("inputs", {}).items():
                if isinstance(value, list):
                    pairs = [resolve(r) for r in value]
                    in_paths[key] = [p for p, _ in pairs]
                    in_digests[key] = [d for _, d in pairs]
                else:
                    in_paths[key], in_digests[key] = resolve(value)
            key = stage_key(kind, params, in_digests, seed)
            out = ws / name
            entry = cache / key
            rec = {"name": name, "kind": kind, "key": key, "inputs": in_digests, "params": params}
            manifest["stages"].append(rec)
            t0 = time.perf_counter()

            record = None
            if use_cache and (entry / "outputs.json").exists():
                record = json.loads((entry / "outputs.json").read_text())
                if not _restore(entry, out, record):
                    record = None
            if record is not None:
                rec["status"] = "cached"
                rec["outputs"] = record["outputs"]
                log.info("stage %s: cache hit", name)
            else:
                if out.exists():
                    shutil.rmtree(out)
                out.mkdir(parents=True)
                try:
                    files = RUNNERS[kind](in_paths, params, seed, out)
                except DynaVesselError as exc:
                    rec["status"] = "failed"
                    rec["error"] = f"{exc.code}: {exc}"
                    rec["seconds"] = round(time.perf_counter() - t0, 3)
                    manifest["status"] = "failed"
                    _write_manifest(ws, manifest)
                    raise StageError(f"stage {name!r} failed: {exc.code}: {exc}", manifest) from exc
                rec["status"] = "executed"
                rec["outputs"] = {k: {"path": v, "digest": file_digest(out / v)} for k, v in files.items()}
                manifest["executed"] += 1
                log.info("stage %s: executed", name)
                if use_cache:
                    tmp = cache / (key + ".tmp")
                    if tmp.exists():
                        shutil.rmtree(tmp)
                    _copy_outputs(out, tmp, files)
                    (tmp / "outputs.json").write_text(json.dumps({"outputs": rec["outputs"]}, indent=2))
                    if entry.exists():
                        shutil.rmtree(entry)
                    tmp.rename(entry)
            rec["seconds"] = round(time.perf_counter() - t0, 3)
            outputs[name] = {k: out / v["path"] for k, v in rec["outputs"].items()}
            digests[name] = {k: v["digest"] for k, v in rec["outputs"].items()}

        manifest["status"] = "ok"
        _write_manifest(ws, manifest)
    return manifest


def _write_manifest(ws: Path, manifest: dict) -> None:
    (ws / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))


def output_digests(manifest: dict) -> dict[str, dict[str, str]]:
    """``{stage: {output: digest}}`` from a manifest, for replay comparisons."""
    return {s["name"]: {k: v["digest"] for k, v in s.get("outputs", {}).items()} for s in manifest["stages"]}
