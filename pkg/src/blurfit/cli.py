"""Command-line entry point: synth / fit / eval / render.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .blur import ExposureGrid, render_novel_view, render_subinterval
from .camera import Camera
from .fileio import (load_fit_result, load_instance, save_fit_result,
                     save_instance, save_json, save_png)
from .fit import FitConfig, FitNumericalError, fit, select_prototype
from .mesh import make_sphere_prototype, make_torus_prototype
from .metrics import evaluate
from .raster import SoftRasterConfig
from .synth import load_mask_sequence, sample_instance

NOVEL_VIEW_SWEEP = (-60, -30, -20, -10, 0, 10, 20, 30, 60)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _camera_from_args(args):
    return Camera(width=args.width, height=args.height, fov_deg=args.fov)


def _add_camera_flags(p):
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--fov", type=float, default=45.0)


# ---------------------------------------------------------------------------
# synth

def _synth_one(task):
    out_dir, seed, args_dict = task
    args = argparse.Namespace(**args_dict)
    rng = np.random.default_rng(seed)
    camera = _camera_from_args(args)
    instance = sample_instance(
        rng, camera, shape=args.shape, texture=args.texture,
        n_subframes=args.subframes, dense_steps=args.dense_steps,
        mean_translation_diameters=args.mean_translation,
        mean_rotation_deg=args.mean_rotation,
    )
    save_instance(out_dir, instance, extra={"seed": seed, "shape": args.shape,
                                            "texture": args.texture})
    return str(out_dir)


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for i in range(args.count):
        name = out if args.count == 1 and not args.subdirs else out / f"instance_{i:03d}"
        tasks.append((name, args.seed + i, vars(args)))
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_synth_one, tasks))
    else:
        for task in tasks:
            _synth_one(task)
    print(f"wrote {args.count} instance(s) under {out}")
    return 0


# ---------------------------------------------------------------------------
# fit

PROTOTYPES = {
    "sphere-small": lambda detail: make_sphere_prototype(
        *detail.get("sphere-small", (23, 55)), name="sphere-small"),
    "sphere-large": lambda detail: make_sphere_prototype(
        *detail.get("sphere-large", (33, 48)), mapping="per-face-atlas",
        name="sphere-large"),
    "torus": lambda detail: make_torus_prototype(
        *detail.get("torus", (48, 32)), name="torus"),
}


def _build_prototypes(args):
    detail = {}
    if args.proto_detail:
        rings, segments = args.proto_detail
        detail = {"sphere-small": (rings, segments),
                  "sphere-large": (rings, segments),
                  "torus": (segments, rings)}
    names = list(PROTOTYPES) if args.prototype == "all" else [args.prototype]
    return [PROTOTYPES[n](detail) for n in names]


def cmd_fit(args):
    instance_dir = Path(args.instance)
    if not (instance_dir / "manifest.json").exists():
        raise DataError(f"missing manifest.json in {instance_dir}")
    try:
        instance = load_instance(instance_dir)
    except FileNotFoundError as e:
        raise DataError(f"malformed instance: missing file {e.filename}") from e

    config = FitConfig(
        lr=args.lr, iterations=args.iterations, exposure_steps=args.steps,
        lambda_lap=args.lambda_lap, silhouette_source=args.silhouette_loss,
        raster=SoftRasterConfig(sigma=args.sigma, cutoff=args.cutoff),
        dtype=args.dtype,
    )
    masks = None
    if config.silhouette_source == "external-masks":
        if args.masks == "gt":
            masks = instance.mask_sequence()
        else:
            masks = load_mask_sequence(args.masks)

    prototypes = _build_prototypes(args)
    if len(prototypes) == 1:
        result = fit(instance.image, instance.background, prototypes[0],
                     config=config, camera=instance.camera, masks=masks)
    else:
        result = select_prototype(instance.image, instance.background,
                                  prototypes, config=config,
                                  camera=instance.camera, masks=masks)

    out = Path(args.out)
    save_fit_result(out, result, config_dict={
        "lr": config.lr, "iterations": config.iterations,
        "exposure_steps": config.exposure_steps, "lambda_lap": config.lambda_lap,
        "silhouette_source": config.silhouette_source,
        "sigma": config.raster.sigma, "cutoff": config.raster.cutoff,
        "dtype": config.dtype, "masks": args.masks,
        "prototype_flag": args.prototype, "instance": str(instance_dir),
    })
    n = instance.n_subframes
    tsr_dir = out / "tsr"
    tsr_dir.mkdir(exist_ok=True)
    steps = max(instance.dense_steps // n, 1)
    for i in range(n):
        frame = render_subinterval(result.mesh, result.motion, i / n, (i + 1) / n,
                                   instance.background, instance.camera,
                                   ExposureGrid(steps), config.raster)
        save_png(tsr_dir / f"frame_{i:02d}.png", frame)
    print(f"fit ({result.prototype}) final L_I={result.final.l_image:.5f} "
          f"total={result.final.total:.5f} in {result.seconds:.1f}s -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval

def _eval_pair(result_dir, instance_dir):
    mesh, motion, manifest = load_fit_result(Path(result_dir))
    instance = load_instance(Path(instance_dir))
    report = evaluate(mesh, motion, instance)
    return report, manifest


def cmd_eval(args):
    if args.batch:
        results = sorted(p for p in Path(args.result).iterdir() if p.is_dir())
        instances = sorted(p for p in Path(args.instance).iterdir() if p.is_dir())
        if len(results) != len(instances):
            raise DataError("batch eval needs matching result/instance counts")
        rows = []
        for rdir, idir in zip(results, instances):
            report, _ = _eval_pair(rdir, idir)
            row = {"result": rdir.name, "instance": idir.name}
            row.update({k: v for k, v in report.to_dict().items()
                        if not isinstance(v, list)})
            rows.append(row)
        agg = {"result": "MEDIAN", "instance": ""}
        for key in ("tiou", "psnr_mean", "ssim_mean", "eps_translation",
                    "eps_rotation_deg", "eps_mesh"):
            vals = [r[key] for r in rows if r.get(key) is not None]
            agg[key] = float(np.median(vals)) if vals else None
        out = Path(args.out or "eval_batch.csv")
        with open(out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            for row in rows + [agg]:
                writer.writerow(row)
        print(f"wrote {len(rows)} detail rows + 1 aggregate row -> {out}")
        return 0

    report, _ = _eval_pair(args.result, args.instance)
    out = Path(args.out or (Path(args.result) / "report.json"))
    save_json(out, report.to_dict())
    print(f"tiou={report.tiou:.3f} psnr={report.psnr_mean:.2f} "
          f"ssim={report.ssim_mean:.3f} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# render

def cmd_render(args):
    result_dir = Path(args.result)
    mesh, motion, manifest = load_fit_result(result_dir)
    camera = Camera()
    background = np.full((camera.height, camera.width, 3), 0.5)
    if args.instance:
        instance = load_instance(Path(args.instance))
        camera = instance.camera
        background = instance.background

    out = Path(args.out or (result_dir / args.mode))
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "tsr":
        n = args.frames
        for i in range(n):
            frame = render_subinterval(mesh, motion, i / n, (i + 1) / n,
                                       background, camera,
                                       ExposureGrid(args.steps))
            save_png(out / f"frame_{i:02d}.png", frame)
        print(f"wrote {n} TSR frames -> {out}")
    else:
        policy = "input-background" if args.instance else "flat-grey"
        for yaw in args.yaws:
            img = render_novel_view(mesh, motion, args.tau, yaw, camera,
                                    background_policy=policy,
                                    background=background if args.instance else None)
            save_png(out / f"yaw_{yaw:+03d}.png", img)
        print(f"wrote {len(args.yaws)} novel views -> {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="blurfit",
        description="3D shape, texture and motion from one motion-blurred image",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic instances")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--subdirs", action="store_true",
                   help="use instance_XXX subdirectories even for --count 1")
    p.add_argument("--shape", default="bumpy-sphere",
                   choices=["bumpy-sphere", "squashed-torus", "sphere", "torus"])
    p.add_argument("--texture", default="checker",
                   choices=["checker", "gradient", "noise"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subframes", type=int, default=8)
    p.add_argument("--dense-steps", type=int, default=64)
    p.add_argument("--mean-translation", type=float, default=1.2,
                   help="mean |dt| in object diameters (frame-visibility caps this)")
    p.add_argument("--mean-rotation", type=float, default=100.0)
    p.add_argument("--jobs", type=int, default=1)
    _add_camera_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit shape/texture/motion to an instance")
    p.add_argument("--instance", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prototype", default="sphere-small",
                   choices=["sphere-small", "sphere-large", "torus", "all"])
    p.add_argument("--proto-detail", type=int, nargs=2, metavar=("RINGS", "SEGMENTS"),
                   help="override prototype tessellation (CPU budget knob)")
    p.add_argument("--masks", default="gt",
                   help="'gt' or a directory of mask_XX.png files")
    p.add_argument("--silhouette-loss", default="external-masks",
                   choices=["external-masks", "background-difference", "none"])
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--lambda-lap", type=float, default=1000.0)
    p.add_argument("--sigma", type=float, default=1.0 / 7000.0)
    p.add_argument("--cutoff", type=float, default=30.0)
    p.add_argument("--dtype", default="float64", choices=["float64", "float32"])
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="evaluate a fit result against ground truth")
    p.add_argument("--result", required=True)
    p.add_argument("--instance", required=True)
    p.add_argument("--out")
    p.add_argument("--batch", action="store_true",
                   help="treat --result/--instance as parents of paired runs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="temporal super-resolution or novel views")
    p.add_argument("--result", required=True)
    p.add_argument("--mode", required=True, choices=["tsr", "novel-view"])
    p.add_argument("--instance", help="source of camera and background")
    p.add_argument("--out")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--yaws", type=int, nargs="+", default=list(NOVEL_VIEW_SWEEP))
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except FitNumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3
    except (DataError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
