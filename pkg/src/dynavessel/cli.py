"""``dynavessel`` command line: one subcommand per processing stage.

Failures print ``error: <code>: <message>`` on standard error and exit with
status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import _parallel
from .errors import DynaVesselError

log = logging.getLogger("dynavessel")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "message": record.getMessage()})


def _setup_logging(verbose: int, as_json: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if as_json else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("dynavessel")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose > 1 else logging.INFO if verbose or as_json else logging.WARNING)
    root.propagate = False


def _window(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must be LO:HI, got {text!r}") from None
    if not hi > lo:
        raise argparse.ArgumentTypeError("window needs LO < HI")
    return lo, hi


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


# --------------------------------------------------------------------------
# commands

def cmd_phantom_generate(args) -> int:
    from .nifti import write_volume
    from .phantom import PhantomSpec, default_spec, generate_study, head_template, write_study

    spec = PhantomSpec.load(args.spec) if args.spec else default_spec(args.preset)
    if args.seed is not None:
        spec.rng_seed = args.seed
    out = Path(args.out)
    study = generate_study(spec)
    write_study(study, out)
    tpl, roi = head_template(spec)
    write_volume(tpl, out / "template.nii.gz")
    write_volume(roi, out / "template_roi.nii.gz")
    print(json.dumps({"out": str(out), "frames": len(study.frames)}))
    return 0


def cmd_preprocess(args) -> int:
    from .nifti import read_labels, read_volume, write_volume
    from .suppression import head_roi_mask
    from .volume import AIR_HU, LabelVolume, apply_mask, resample_isotropic, resample_labels

    vol = read_volume(args.input)
    if (args.template is None) != (args.template_roi is None):
        raise _usage("--template and --template-roi go together")
    if args.template is not None:
        roi = head_roi_mask(vol, read_volume(args.template), read_labels(args.template_roi))
        vol = apply_mask(vol, roi, AIR_HU)
    else:
        roi = LabelVolume.from_mask(vol.geometry, np.ones(vol.geometry.dims, bool), "head")
    vol = resample_isotropic(vol, args.spacing)
    roi = resample_labels(roi, vol.geometry)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(vol, out / "volume.nii.gz")
    write_volume(roi, out / "roi.nii.gz")
    print(json.dumps({"dims": list(vol.geometry.dims), "spacing": args.spacing}))
    return 0


def cmd_subtract(args) -> int:
    from .nifti import read_volume, write_volume
    from .suppression import subtract_baseline

    s = subtract_baseline(read_volume(args.post), read_volume(args.baseline), pre_register=args.register)
    write_volume(s, args.out)
    return 0


def cmd_separate(args) -> int:
    from .nifti import read_volume, write_volume
    from .suppression import SeparationOptions, vessel_separate

    from .pipeline import file_digest

    paths = {"sa": args.sa, "sv": args.sv, "xa": args.xa, "xv": args.xv}
    vols = [read_volume(p) for p in paths.values()]
    opts = SeparationOptions(alg1_operand=args.alg1_operand)
    res = vessel_separate(*vols, opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(res.s_star_a, out / "s_star_a.nii.gz")
    write_volume(res.s_star_v, out / "s_star_v.nii.gz")
    (out / "transforms.json").write_text(json.dumps(
        {"g_ra": res.g_ra.to_dict(), "g_rv": res.g_rv.to_dict(),
         "ncc_ra": _finite_or_none(res.ncc_ra), "ncc_rv": _finite_or_none(res.ncc_rv),
         "options": {"alg1_operand": opts.alg1_operand, "register": opts.register},
         "inputs": {k: {"path": str(v), "sha256": file_digest(v)} for k, v in paths.items()}}, indent=2))
    print(json.dumps({"ncc_ra": _finite_or_none(res.ncc_ra), "ncc_rv": _finite_or_none(res.ncc_rv)}))
    return 0


def cmd_register(args) -> int:
    from .nifti import read_volume
    from .registration import register_affine, register_rigid
    from .transforms import save_transform

    fixed, moving = read_volume(args.fixed), read_volume(args.moving)
    fn = register_rigid if args.mode == "rigid" else register_affine
    T, score = fn(fixed, moving)
    save_transform(T, args.out)
    print(json.dumps({"ncc": score}))
    return 0


def cmd_segment(args) -> int:
    from .nifti import read_labels, read_volume, write_volume
    from .segmentation import PhansalkarParams, kapur_segment, phansalkar_threshold, remove_small_components
    from .volume import LabelVolume

    vol = read_volume(args.input)
    roi = read_labels(args.roi).data != 0 if args.roi else None
    if args.method == "phansalkar":
        mask = phansalkar_threshold(vol, PhansalkarParams(window_radius=args.radius), roi).data != 0
    elif args.method == "kapur":
        mask = kapur_segment(vol, roi=roi).data != 0
    else:
        mask = vol.data > args.level
        if roi is not None:
            mask &= roi
    if args.min_component > 1:
        mask = remove_small_components(mask, 26, args.min_component)
    write_volume(LabelVolume.from_mask(vol.geometry, mask, "vessel"), args.out)
    print(json.dumps({"voxels": int(np.count_nonzero(mask))}))
    return 0


def cmd_skeletonize(args) -> int:
    from .nifti import read_labels, write_volume
    from .segmentation import skeleton_mask
    from .volume import LabelVolume

    mask = read_labels(args.input)
    sk = skeleton_mask(mask)
    write_volume(LabelVolume.from_mask(mask.geometry, sk, "centerline"), args.out)
    print(json.dumps({"voxels": int(np.count_nonzero(sk))}))
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_case, reports_to_csv
    from .nifti import read_labels, read_volume

    gt, pred = read_labels(args.gt), read_labels(args.pred)
    try:
        pairing = json.loads(Path(args.pairing).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise _usage(f"cannot read pairing {args.pairing}: {exc}") from exc
    vol = read_volume(args.volume) if args.volume else None
    from .pipeline import file_digest

    inputs = {"gt": args.gt, "pred": args.pred, "volume": args.volume}
    provenance = {
        "inputs": {k: {"path": str(v), "sha256": file_digest(v)} for k, v in inputs.items() if v},
        "options": {"pairing": pairing},
    }
    report = evaluate_case(gt, pred, pairing, vol, case_id=args.case_id, provenance=provenance)
    Path(args.out).write_text(report.to_json())
    if args.csv:
        Path(args.csv).write_text(reports_to_csv([report]))
    print(json.dumps({k: v.mdc for k, v in report.per_label.items()}))
    return 0


def cmd_render(args) -> int:
    from .nifti import read_volume
    from .volume import mip_render, write_png

    img = mip_render(read_volume(args.input), args.axis, args.window)
    write_png(img, args.out)
    return 0


def cmd_pipeline_run(args) -> int:
    from .pipeline import load_config, run

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    manifest = run(cfg, base_dir=Path(args.config).resolve().parent)
    print(json.dumps({"executed": manifest["executed"], "stages": len(manifest["stages"])}))
    return 0


def cmd_pipeline_validate(args) -> int:
    from .pipeline import load_config, validate

    diags = validate(load_config(args.config), base_dir=Path(args.config).resolve().parent)
    for d in diags:
        print(str(d))
    return 1 if diags else 0


def cmd_pipeline_init(args) -> int:
    from .pipeline import default_config

    cfg = default_config(args.workspace, seed=args.seed or 0, preset=args.preset)
    Path(args.out).write_text(json.dumps(cfg, indent=2))
    return 0


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


class _UsageError(Exception):
    pass


def _usage(msg: str) -> _UsageError:
    return _UsageError(msg)


# --------------------------------------------------------------------------
# parser

def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--threads", type=int, default=d(None), help="worker threads (default: all cores)")
    parser.add_argument("--seed", type=int, default=d(None), help="override the random seed")
    parser.add_argument("--log-json", action="store_true", default=d(False), help="line-delimited JSON logs")
    parser.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynavessel", description="Dynamic CTA vessel separation toolkit.")
    _common(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = argparse.ArgumentParser(add_help=False)
    _common(common, suppress=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    ph = sub.add_parser("phantom", help="synthetic studies")
    phs = ph.add_subparsers(dest="action", required=True, metavar="ACTION")
    sp = phs.add_parser("generate", help="render a phantom study", parents=[common])
    sp.add_argument("--spec", help="phantom JSON (default: built-in preset)")
    sp.add_argument("--preset", default="test", choices=["test", "acceptance", "small"])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_phantom_generate)

    sp = add("preprocess", cmd_preprocess, "head ROI masking and isotropic resampling")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--template")
    sp.add_argument("--template-roi")
    sp.add_argument("--spacing", type=_positive_float, default=0.468)
    sp.add_argument("--out", required=True)

    sp = add("subtract", cmd_subtract, "baseline subtraction, clipped at zero")
    sp.add_argument("--post", required=True)
    sp.add_argument("--baseline", required=True)
    sp.add_argument("--register", action="store_true", help="rigidly align the baseline first")
    sp.add_argument("--out", required=True)

    sp = add("separate", cmd_separate, "artery/vein separation of two subtracted phases")
    for flag in ("--sa", "--sv", "--xa", "--xv"):
        sp.add_argument(flag, required=True)
    sp.add_argument("--alg1-operand", choices=["subtracted", "raw"], default="subtracted")
    sp.add_argument("--out", required=True)

    sp = add("register", cmd_register, "NCC registration; writes a pull-back transform")
    sp.add_argument("--fixed", required=True)
    sp.add_argument("--moving", required=True)
    sp.add_argument("--mode", choices=["rigid", "affine"], default="rigid")
    sp.add_argument("--out", required=True)

    sp = add("segment", cmd_segment, "vessel segmentation by thresholding")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--method", choices=["phansalkar", "kapur", "threshold"], default="phansalkar")
    sp.add_argument("--radius", type=int, default=15)
    sp.add_argument("--level", type=float, default=100.0, help="HU level for --method threshold")
    sp.add_argument("--min-component", type=int, default=1)
    sp.add_argument("--roi")
    sp.add_argument("--out", required=True)

    sp = add("skeletonize", cmd_skeletonize, "topology-preserving centerline extraction")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "mDC, tSens and adHD against ground truth")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--pairing", required=True, help='JSON map, e.g. {"artery": 1, "vein": 2}')
    sp.add_argument("--volume")
    sp.add_argument("--case-id", default="case")
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv")

    sp = add("render", cmd_render, "maximum intensity projection to PNG")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--axis", choices=["x", "y", "z"], default="z")
    sp.add_argument("--window", type=_window, default=(-100.0, 600.0), help="LO:HI in HU")
    sp.add_argument("--out", required=True)

    pl = sub.add_parser("pipeline", help="declarative batch runs")
    pls = pl.add_subparsers(dest="action", required=True, metavar="ACTION")
    sp = pls.add_parser("run", help="execute a pipeline config", parents=[common])
    sp.add_argument("--config", required=True)
    sp.set_defaults(func=cmd_pipeline_run)
    sp = pls.add_parser("validate", help="check a pipeline config", parents=[common])
    sp.add_argument("--config", required=True)
    sp.set_defaults(func=cmd_pipeline_validate)
    sp = pls.add_parser("init", help="write the default phantom pipeline config", parents=[common])
    sp.add_argument("--out", required=True)
    sp.add_argument("--workspace", default="pipeline-run")
    sp.add_argument("--preset", default="small", choices=["test", "acceptance", "small"])
    sp.set_defaults(func=cmd_pipeline_init)
    return p


def _join_negative_values(argv: list[str]) -> list[str]:
    # "--window -100:600" would otherwise be read as an unknown option
    out = []
    i = 0
    while i < len(argv):
        if argv[i] == "--window" and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"--window={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(_join_negative_values(argv))
    _setup_logging(args.verbose, args.log_json)
    if args.threads is not None:
        if args.threads < 1:
            print("error: argument: --threads must be >= 1", file=sys.stderr)
            return 2
        _parallel.set_threads(args.threads)
    name = " ".join(x for x in (args.command, getattr(args, "action", None)) if x)
    log.info("%s: start", name)
    try:
        t0 = time.perf_counter()
        code = args.func(args)
        log.info("%s: done in %.2f s", name, time.perf_counter() - t0)
        return code
    except _UsageError as exc:
        print(f"error: argument: {exc}", file=sys.stderr)
        return 2
    except DynaVesselError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
