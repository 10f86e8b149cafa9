"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; the lines are written to the terminal
once the module finishes, so ``pytest -v`` output carries a ten-line verdict.
Some criteria also record INFO lines for related runs that do not decide the
verdict.
"""

from __future__ import annotations

import json
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage
from scipy.stats import spearmanr
from skimage.measure import euler_number

from dynavessel import _parallel
from dynavessel.cli import main
from dynavessel.metrics import adhd, classify_phase, mdc, mean_hu, tsens
from dynavessel.nifti import read_labels, read_volume, write_volume
from dynavessel.phantom import (
    ARTERY_TAC,
    VEIN_TAC,
    build_anatomy,
    default_spec,
    generate_study,
    render_frame,
    tac_eval,
)
from dynavessel.pipeline import default_config, output_digests
from dynavessel.registration import register_rigid_full, resample_with_transform
from dynavessel.segmentation import (
    PhansalkarParams,
    VoxelSet,
    connected_components,
    kapur_segment,
    phansalkar_threshold,
    skeletonize,
)
from dynavessel.suppression import subtract_baseline, vessel_separate
from dynavessel.transforms import RigidParams
from dynavessel.volume import LabelVolume, ScalarVolume, VolumeGeometry, resample_isotropic

from conftest import make_volume
from oracles import kapur_naive, phansalkar_naive, surface_brute

pytestmark = pytest.mark.slow

TITLES = {
    1: "metric oracle equivalence",
    2: "metric sanity triplet",
    3: "registration recovery",
    4: "separation, motion-free",
    5: "separation under motion",
    6: "phase classification",
    7: "contrast-dependence trend",
    8: "thresholding oracles",
    9: "skeleton properties",
    10: "I/O and determinism",
}
VERDICTS: dict[int, str] = {}
INFO: dict[int, list[str]] = {}


@pytest.fixture(scope="module", autouse=True)
def verdict_report(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = ["", "acceptance criteria:"]
    for n, title in TITLES.items():
        lines.append(VERDICTS.get(n, f"criterion {n:2d} FAIL  {title}: did not complete"))
        lines.extend(f"              INFO  {s}" for s in INFO.get(n, []))
    text = "\n".join(lines)
    if tr is not None:
        tr.write_line(text)
    else:
        print(text)


def judge(n: int, checks: dict[str, bool], detail: str) -> None:
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {TITLES[n]}: {detail}"
    if failed:
        line += f"  [failed: {', '.join(failed)}]"
    VERDICTS[n] = line
    print(line)
    assert ok, line


def info(n: int, text: str) -> None:
    INFO.setdefault(n, []).append(text)
    print(f"criterion {n} INFO {text}")


@pytest.fixture
def single_thread():
    _parallel.set_threads(1)
    yield
    _parallel.set_threads(None)


# --------------------------------------------------------------------------
# 1

def _random_mask(rng, shape):
    smooth = ndimage.gaussian_filter(rng.random(shape), rng.uniform(0.6, 1.6))
    return smooth > np.quantile(smooth, rng.uniform(0.5, 0.95))


def _world(g, idx):
    return np.asarray(g.origin) + (idx * np.asarray(g.spacing)) @ np.asarray(g.direction).T


def _all_pairs_adhd(a_pts, p_pts):
    d = np.sqrt(((a_pts[:, None, :] - p_pts[None, :, :]) ** 2).sum(axis=-1))
    return float(d.min(axis=1).mean())


def test_criterion_01_metric_oracle_equivalence():
    rng = np.random.default_rng(2024)
    shape = (16, 16, 16)
    t0 = time.perf_counter()
    mismatches = {"mdc": 0, "tsens": 0}
    worst_adhd = 0.0
    for _ in range(200):
        g = VolumeGeometry(shape, tuple(rng.uniform(0.4, 2.0, 3)), tuple(rng.uniform(-50, 50, 3)))
        a, p = _random_mask(rng, shape), _random_mask(rng, shape)
        cl = skeletonize(LabelVolume.from_mask(g, a))
        cl_mask = cl.to_mask()
        # exhaustive voxel counting
        n_a = n_ap = n_c = n_cp = 0
        for idx in np.ndindex(shape):
            n_a += bool(a[idx])
            n_ap += bool(a[idx] and p[idx])
            n_c += bool(cl_mask[idx])
            n_cp += bool(cl_mask[idx] and p[idx])
        mismatches["mdc"] += mdc(LabelVolume.from_mask(g, a), LabelVolume.from_mask(g, p)) != n_ap / n_a
        mismatches["tsens"] += tsens(cl, LabelVolume.from_mask(g, p)) != n_cp / n_c
        sa, sp = surface_brute(a), surface_brute(p)
        ref = _all_pairs_adhd(_world(g, np.argwhere(sa)), _world(g, np.argwhere(sp)))
        got = adhd(VoxelSet.from_mask(g, sa), VoxelSet.from_mask(g, sp))
        worst_adhd = max(worst_adhd, abs(got - ref))
    elapsed = time.perf_counter() - t0
    judge(1, {"mdc exact": mismatches["mdc"] == 0, "tsens exact": mismatches["tsens"] == 0,
              "adhd within 1e-9 mm": worst_adhd <= 1e-9, "runtime < 60 s": elapsed < 60},
          f"200 pairs, mdc/tsens mismatches {mismatches['mdc']}/{mismatches['tsens']}, "
          f"max adhd error {worst_adhd:.1e} mm, {elapsed:.1f} s")


# --------------------------------------------------------------------------
# 2

def test_criterion_02_metric_sanity_triplet():
    g = VolumeGeometry((120, 8, 8))
    a = VoxelSet(g, [(i, 0, 0) for i in range(4)]).to_mask()
    p = VoxelSet(g, [(i, 0, 0) for i in range(3)] + [(i, 5, 5) for i in range(100)]).to_mask()
    m = mdc(a, p)

    g1 = VolumeGeometry((8, 8, 8))
    two, one = VoxelSet(g1, [(0, 0, 0), (4, 0, 0)]), VoxelSet(g1, [(0, 0, 0)])
    forward, backward = adhd(two, one), adhd(one, two)

    g2 = VolumeGeometry((12, 4, 4))
    cl = VoxelSet(g2, [(i, 1, 1) for i in range(10)])
    pred = VoxelSet(g2, [(i, 1, 1) for i in range(9)]).to_mask()
    t = tsens(cl, pred)
    judge(2, {"mdc 0.75": m == 0.75, "adhd 2.0": forward == 2.0, "adhd swapped 0.0": backward == 0.0,
              "tsens 0.9": t == 0.9},
          f"mdc {m}, adhd {forward} / {backward} mm, tsens {t}")


# --------------------------------------------------------------------------
# 3

MOTION_3 = RigidParams(np.deg2rad([2.0, 2.0, -1.0]), (1.5, -2.0, 0.5))


def _recovery(realistic: bool, fixed_is_moved: bool):
    spec = default_spec("test", realistic=realistic)
    anatomy = build_anatomy(spec)
    t0 = time.perf_counter()
    f0 = render_frame(anatomy, spec, 27.6)
    if realistic:
        f1 = render_frame(build_anatomy(spec, MOTION_3), spec, 27.6)
    else:
        f1 = render_frame(anatomy, spec, 27.6, MOTION_3)
    fixed, moving, truth = (f1, f0, MOTION_3) if fixed_is_moved else (f0, f1, MOTION_3.inverse())
    res = register_rigid_full(fixed, moving)
    elapsed = time.perf_counter() - t0
    T = res.transform.with_center(truth.center)
    ang = np.abs(np.rad2deg(np.subtract(T.angles, truth.angles)))
    trans = np.abs(np.subtract(T.translation, truth.translation))
    return ang, trans, res.ncc, elapsed


def test_criterion_03_registration_recovery(single_thread):
    checks, parts = {}, []
    # the plain moved frame is warped with the registration's own interpolator, so the
    # realistic phantom (moved anatomy rasterized afresh, partial volume, PSF) is judged too
    for realistic, fixed_is_moved, judged in ((False, True, True), (True, True, True), (True, False, True),
                                              (False, False, False)):
        ang, trans, score, elapsed = _recovery(realistic, fixed_is_moved)
        label = f"{'realistic' if realistic else 'plain'}, fixed = {'moved' if fixed_is_moved else 'original'}"
        text = (f"{label}: angle error {ang.max():.3f} deg, translation error {trans.max():.3f} mm, "
                f"NCC {score:.4f}, {elapsed:.1f} s")
        if not judged:
            info(3, text)
            continue
        parts.append(text)
        checks[f"{label} angles"] = bool(np.all(ang <= 0.5))
        checks[f"{label} translations"] = bool(np.all(trans <= 0.25))
        checks[f"{label} NCC"] = score >= 0.995
        checks[f"{label} runtime"] = elapsed < 120
    judge(3, checks, "128^3; " + "; ".join(parts))


# --------------------------------------------------------------------------
# 4 and 5

def _separation_tsens(motion: RigidParams | None, sigma: float):
    spec = default_spec("acceptance", noise_sigma=sigma, timepoints=[0.0, 27.6, 45.3])
    if motion is not None:
        spec = replace(spec, motion=[RigidParams(), RigidParams(), motion])
    study = generate_study(spec)
    base, xa, xv = (f for _, f in study.frames)
    sa = subtract_baseline(xa, base)
    sv = subtract_baseline(xv, base, pre_register=motion is not None)
    res = vessel_separate(sa, sv, xa, xv)
    # S*_v lives on the venous frame; carry it onto the arterial (ground-truth) frame
    sv_on_a = resample_with_transform(res.s_star_v, res.g_ra, xa.geometry, fill=0.0)
    pa, pv = res.s_star_a.data > 100, sv_on_a.data > 100
    art, vein = study.gt_artery_centerline.data != 0, study.gt_vein_centerline.data != 0
    return {"artery|S*a": tsens(art, pa), "vein|S*a": tsens(vein, pa),
            "vein|S*v": tsens(vein, pv), "artery|S*v": tsens(art, pv)}


@pytest.fixture(scope="module")
def motion_free_tsens():
    return _separation_tsens(None, 0.0)


def _fmt(d):
    return ", ".join(f"{k} {v:.3f}" for k, v in d.items())


def test_criterion_04_separation_motion_free(motion_free_tsens):
    t = motion_free_tsens
    judge(4, {"artery on S*a >= 0.95": t["artery|S*a"] >= 0.95, "vein on S*a <= 0.05": t["vein|S*a"] <= 0.05,
              "vein on S*v >= 0.95": t["vein|S*v"] >= 0.95, "artery on S*v <= 0.05": t["artery|S*v"] <= 0.05},
          f"256^3 noise-free, tSens {_fmt(t)}")


def test_criterion_05_separation_under_motion(motion_free_tsens):
    motion = RigidParams(np.deg2rad([2.0, -2.0, 1.0]), (2.0, -2.0, 1.0))
    t = _separation_tsens(motion, 10.0)
    # degradation: a drop where high is expected, a rise where low is expected
    worse = {
        "artery|S*a": motion_free_tsens["artery|S*a"] - t["artery|S*a"],
        "vein|S*v": motion_free_tsens["vein|S*v"] - t["vein|S*v"],
        "vein|S*a": t["vein|S*a"] - motion_free_tsens["vein|S*a"],
        "artery|S*v": t["artery|S*v"] - motion_free_tsens["artery|S*v"],
    }
    judge(5, {f"{k} degrades <= 0.05": v <= 0.05 for k, v in worse.items()},
          f"2 deg / 2 mm venous motion, sigma 10 HU, tSens {_fmt(t)}, "
          f"max degradation {max(worse.values()):.3f}")


# --------------------------------------------------------------------------
# 6

def _phase_agreement(study):
    g = study.gt_artery.geometry
    acl = VoxelSet.from_mask(g, study.gt_artery_centerline.data != 0)
    vcl = VoxelSet.from_mask(g, study.gt_vein_centerline.data != 0)
    checked = agree = 0
    for t, vol in study.frames:
        diff = float(tac_eval(ARTERY_TAC, t) - tac_eval(VEIN_TAC, t))
        if abs(diff) <= 5.0:
            continue
        checked += 1
        expected = "Arterial" if diff > 0 else "Venous"
        agree += classify_phase(vol, acl, vcl).value == expected
    return checked, agree


def test_criterion_06_phase_classification():
    clean = generate_study(default_spec("test"))
    noisy = generate_study(default_spec("test", realistic=True, noise_sigma=10.0, rng_seed=6))
    c_checked, c_agree = _phase_agreement(clean)
    n_checked, n_agree = _phase_agreement(noisy)
    judge(6, {"19 frames": len(clean.frames) == 19, "noise-free exact": c_agree == c_checked > 0,
              "noisy agrees": n_agree == n_checked > 0},
          f"noise-free {c_agree}/{c_checked} frames above the 5 HU floor, realistic sigma 10 "
          f"{n_agree}/{n_checked}")


# --------------------------------------------------------------------------
# 7

def _contrast_trend(study):
    art = study.gt_artery.data != 0
    acl = VoxelSet.from_mask(study.gt_artery.geometry, study.gt_artery_centerline.data != 0)
    scores = np.array([mdc(art, vol.data > 100.0) for _, vol in study.frames])
    hu = np.array([mean_hu(vol, acl) for _, vol in study.frames])
    peak = int(np.argmax(hu))
    rho = float(spearmanr(scores, np.abs(hu - hu[peak]))[0])
    return scores, peak, rho


def test_criterion_07_contrast_dependence_trend():
    study = generate_study(default_spec("test", realistic=True, noise_sigma=10.0, rng_seed=7))
    scores, peak, rho = _contrast_trend(study)
    base = study.baseline_index
    plain_scores, _, plain_rho = _contrast_trend(generate_study(default_spec("test")))
    info(7, f"plain noise-free phantom: per-frame mDC takes only the values "
            f"{sorted(set(np.round(plain_scores, 3).tolist()))}, Spearman {plain_rho:.3f}")
    judge(7, {"peak mDC > baseline mDC": scores[peak] > scores[base], "Spearman <= -0.8": rho <= -0.8},
          f"realistic phantom, sigma 10 HU: mDC at peak (t={study.times[peak]:.1f} s) {scores[peak]:.3f} "
          f"vs baseline {scores[base]:.3f}, Spearman {rho:.3f}")


# --------------------------------------------------------------------------
# 8

def _oracle_volume(seed):
    rng = np.random.default_rng(seed)
    shape = (32, 32, 32)
    vol = ndimage.gaussian_filter(rng.normal(40.0, 15.0, shape), 1.0)
    if seed % 2:
        # a few bright tubes over soft tissue, closer to a subtracted angiogram
        ii, jj, kk = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
        for _ in range(3):
            c = rng.uniform(6, 26, 2)
            r = rng.uniform(1.5, 3.5)
            vol[(jj - c[0]) ** 2 + (kk - c[1]) ** 2 <= r * r] += rng.uniform(200, 400)
    return vol.astype(np.float32)


def test_criterion_08_thresholding_oracles():
    t0 = time.perf_counter()
    phansalkar_bad = kapur_bad = 0
    for seed in range(10):
        data = _oracle_volume(seed)
        vol = make_volume(data)
        got = phansalkar_threshold(vol, PhansalkarParams(window_radius=15)).data != 0
        phansalkar_bad += int(np.count_nonzero(got != phansalkar_naive(data, 15)))
        edge, _ = kapur_naive(data)
        kapur_bad += int(np.count_nonzero((kapur_segment(vol).data != 0) != (data >= edge)))
    elapsed = time.perf_counter() - t0
    judge(8, {"phansalkar exact": phansalkar_bad == 0, "kapur exact": kapur_bad == 0},
          f"10 volumes of 32^3, differing voxels phansalkar {phansalkar_bad}, kapur {kapur_bad}, {elapsed:.1f} s")


# --------------------------------------------------------------------------
# 9

def _grid(n):
    return np.meshgrid(*[np.arange(k, dtype=float) for k in n], indexing="ij")


def test_criterion_09_skeleton_properties():
    ii, jj, kk = _grid((60, 25, 25))
    tube = (np.hypot(jj - 12, kk - 12) <= 4) & (ii >= 5) & (ii < 55)

    ii, jj, kk = _grid((50, 50, 21))
    leg1 = (np.hypot(jj - 10, kk - 10) <= 3) & (ii >= 5) & (ii <= 40)
    leg2 = (np.hypot(ii - 40, kk - 10) <= 3) & (jj >= 10) & (jj <= 44)
    bend = leg1 | leg2

    ii, jj, kk = _grid((44, 44, 16))
    torus = (np.hypot(ii - 21.5, jj - 21.5) - 14) ** 2 + (kk - 7.5) ** 2 <= 3.5 ** 2

    checks, notes = {}, []
    for name, m in (("tube", tube), ("L-bend", bend), ("torus", torus)):
        sk = skeletonize(LabelVolume.from_mask(VolumeGeometry(m.shape), m)).to_mask()
        n_mask, n_sk = len(connected_components(m)[1]), len(connected_components(sk)[1])
        checks[f"{name} subset"] = not np.any(sk & ~m)
        checks[f"{name} components"] = n_mask == n_sk
        notes.append(f"{name} {np.count_nonzero(sk)} voxels, components {n_sk}/{n_mask}")
        if name == "tube":
            idx = np.argwhere(sk)
            dist = np.hypot(idx[:, 1] - 12, idx[:, 2] - 12)
            checks["tube within 1.5 voxels of the axis"] = bool(dist.max() <= 1.5)
            notes.append(f"tube max axis distance {dist.max():.2f}")
        if name == "torus":
            # connected with no cavities, so Euler number 0 means exactly one independent cycle
            chi = euler_number(sk, connectivity=3)
            checks["torus one cycle"] = chi == 0 and n_sk == 1
            notes.append(f"torus Euler number {chi}")
    judge(9, checks, ", ".join(notes))


# --------------------------------------------------------------------------
# 10

def _pipeline_digests(base, threads):
    base.mkdir(parents=True)
    cfg = default_config("ws", seed=11)
    cfg["cache"] = False
    (base / "pipeline.json").write_text(json.dumps(cfg))
    assert main(["--threads", str(threads), "pipeline", "run", "--config", str(base / "pipeline.json")]) == 0
    return output_digests(json.loads((base / "ws" / "manifest.json").read_text()))


def test_criterion_10_io_and_determinism(tmp_path):
    rng = np.random.default_rng(10)
    g = VolumeGeometry((23, 17, 11), (0.468, 0.5, 1.25), (-3.0, 7.5, 12.0))
    vol = ScalarVolume(g, rng.normal(0, 500, g.dims).astype(np.float32))
    labels = LabelVolume(g, rng.integers(0, 4, g.dims), {1: "artery", 2: "vein", 3: "other"})
    write_volume(vol, tmp_path / "v.nii.gz")
    write_volume(labels, tmp_path / "l.nii")
    v2, l2 = read_volume(tmp_path / "v.nii.gz"), read_labels(tmp_path / "l.nii")
    write_volume(v2, tmp_path / "v2.nii.gz")
    nifti_ok = (np.array_equal(v2.data.view(np.uint32), vol.data.view(np.uint32))
                and np.array_equal(l2.data, labels.data) and l2.label_names == labels.label_names
                and v2.geometry.matches(g)
                and (tmp_path / "v.nii.gz").read_bytes() == (tmp_path / "v2.nii.gz").read_bytes())

    first = _pipeline_digests(tmp_path / "run1", 1)
    second = _pipeline_digests(tmp_path / "run2", 1)
    eight = _pipeline_digests(tmp_path / "run8", 8)

    big = ScalarVolume(VolumeGeometry((256,) * 3, (0.936,) * 3),
                       rng.normal(0, 100, (256,) * 3).astype(np.float32))
    t0 = time.perf_counter()
    out = resample_isotropic(big, 0.468)
    elapsed = time.perf_counter() - t0
    judge(10, {"NIfTI round trip bit-exact": nifti_ok, "replay digests identical": first == second,
               "threads 1 vs 8 identical": first == eight, "512^3 output": out.geometry.dims == (512,) * 3,
               "resample < 30 s": elapsed < 30},
          f"{sum(len(v) for v in first.values())} pipeline outputs compared across 3 runs, "
          f"resample to {out.geometry.dims} in {elapsed:.1f} s")
