"""Command-line entry point: ``polaris <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every command prints
its resolved configuration (JSON, one line) before doing any work.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, fresnel, inverse, renderer
from .imageio import PfmError, read_pfm, write_csv, write_pfm
from .polcore import dolp, polarizer_images, stokes_from_polarizer
from .scene import Camera, SceneError, load_scene, scene_to_dict

log = logging.getLogger("polaris")

STOKES_FILES = ("s0", "s1", "s2")
POLARIZER_FILES = ("i000", "i045", "i090", "i135")
META_FILE = "meta.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --- dataset layout ------------------------------------------------------------

def stokes_planes(stokes: np.ndarray) -> dict[str, np.ndarray]:
    """``(H, W, 3, 3)`` Stokes image to float32 ``s0/s1/s2`` planes of shape ``(H, W, 3)``."""
    return {name: np.asarray(stokes[..., k], dtype=np.float32) for k, name in enumerate(STOKES_FILES)}


def stack_planes(planes: dict[str, np.ndarray]) -> np.ndarray:
    shapes = {planes[n].shape for n in STOKES_FILES}
    if len(shapes) != 1:
        raise ValueError(f"Stokes planes differ in size: {sorted(shapes)}")
    return np.stack([planes[n].astype(np.float64) for n in STOKES_FILES], axis=-1)


def dolp_plane(planes: dict[str, np.ndarray]) -> np.ndarray:
    return np.asarray(dolp(stack_planes(planes)), dtype=np.float32)


def polarizer_planes(planes: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    ims = polarizer_images(stack_planes(planes))
    return {name: np.asarray(im, dtype=np.float32) for name, im in zip(POLARIZER_FILES, ims)}


def write_view(directory: Path, img: renderer.PolarizedImage) -> None:
    """All per-view files. Derived planes come from the stored (float32) Stokes planes."""
    directory.mkdir(parents=True, exist_ok=True)
    planes = stokes_planes(img.stokes)
    for name, data in planes.items():
        write_pfm(directory / f"{name}.pfm", data)
    write_pfm(directory / "dolp.pfm", dolp_plane(planes))
    for name, data in polarizer_planes(planes).items():
        write_pfm(directory / f"{name}.pfm", data)
    write_pfm(directory / "mask.pfm", img.mask.astype(np.float32))
    write_pfm(directory / "conductor_mask.pfm", img.conductor.astype(np.float32))


def read_planes(directory: Path, names) -> dict[str, np.ndarray]:
    return {name: read_pfm(directory / f"{name}.pfm").data for name in names}


def read_observations(obs_dir: Path, **kw) -> tuple[inverse.Observations, dict]:
    meta = json.loads((obs_dir / META_FILE).read_text(encoding="utf-8"))
    views = []
    for entry in meta["views"]:
        d = obs_dir / entry["dir"]
        stokes = stack_planes(read_planes(d, STOKES_FILES))
        mask = read_pfm(d / "mask.pfm").data[..., 0] > 0.5
        cam = Camera(**{k: tuple(v) if isinstance(v, list) else v for k, v in entry["camera"].items()})
        if (cam.height, cam.width) != stokes.shape[:2]:
            raise ValueError(f"{d}: image size does not match the recorded camera")
        views.append(inverse.ObservedView(cam, stokes, mask))
    return inverse.Observations(views, quantize=True, **kw), meta


# --- commands ----------------------------------------------------------------------

def _scene_with_overrides(args):
    scene = load_scene(args.scene)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "samples", None) is not None:
        changes["hemisphere_samples"] = args.samples
    return scene.replace(**changes) if changes else scene


def cmd_render(args) -> dict:
    scene = _scene_with_overrides(args)
    out = Path(args.out)
    if args.views is None:
        cams, dirs = [scene.camera], ["."]
    else:
        cams = renderer.orbit_cameras(scene.camera, args.views)
        dirs = [f"view_{i:03d}" for i in range(args.views)]
    out.mkdir(parents=True, exist_ok=True)
    for cam, d in zip(cams, dirs):
        log.info("rendering %s", d)
        write_view(out / d, renderer.render(scene, cam, args.threads))
    meta = {"seed": scene.seed, "hemisphere_samples": scene.hemisphere_samples,
            "scene": scene_to_dict(scene),
            "views": [{"dir": d, "camera": cam.to_dict()} for cam, d in zip(cams, dirs)]}
    (out / META_FILE).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return {"views": len(cams), "out": str(out)}


def theta_grid(lo: float, hi: float, step: float = 0.1) -> np.ndarray:
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(count), 10)


def cmd_fresnel_curve(args) -> dict:
    theta = theta_grid(args.theta_min, args.theta_max)
    cols = fresnel.fresnel_curve(complex(args.eta, -args.k), theta)
    write_csv(args.out, ["theta_deg", "R_s", "R_p", "R_avg", "cos_delta"],
              (tuple(float(c[i]) for c in cols) for i in range(len(theta))))
    return {"rows": len(theta), "out": args.out}


def cmd_stokes(args) -> dict:
    src, out = Path(args.input), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "from_polarizer":
        ims = read_planes(src, POLARIZER_FILES)
        if len({v.shape for v in ims.values()}) != 1:
            raise ValueError("polarizer images differ in size")
        s = stokes_from_polarizer(*(ims[n].astype(np.float64) for n in POLARIZER_FILES))
        written = stokes_planes(s)
    else:
        planes = read_planes(src, STOKES_FILES)
        written = polarizer_planes(planes) if args.mode == "to_polarizer" else {"dolp": dolp_plane(planes)}
    for name, data in written.items():
        write_pfm(out / f"{name}.pfm", data)
    return {"written": sorted(written)}


def _adam_config(args) -> inverse.AdamConfig:
    return inverse.AdamConfig(lr=args.lr, iters=args.iters, fd_step=args.fd_step, lr_final=args.lr_final)


def cmd_invert(args) -> dict:
    obs, meta = read_observations(Path(args.obs), lambda_s=args.lambda_s, lambda_dolp=args.lambda_dolp,
                                  mask_dolp=not args.dolp_all_pixels)
    scene = load_scene(args.scene).replace(seed=meta["seed"], hemisphere_samples=meta["hemisphere_samples"])
    free = inverse.parse_free(args.free, scene.materials)
    free.check(scene.materials)

    def progress(it, x, f):
        if it % 25 == 0:
            log.info("iter %d loss %.6e", it, f)

    res = inverse.recover_materials(scene, obs, free, _adam_config(args), gt=scene.materials,
                                    init=False if args.init_gt else None, threads=args.threads,
                                    callback=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "report.csv", ["param_name", "gt", "recovered", "abs_error"], res.report)
    write_csv(out / "loss_trace.csv", ["iter", "loss"], res.trace)
    for name, gt, rec, err in res.report:
        print(f"{name:18s} gt={gt:.6g} recovered={rec:.6g} abs_error={err:.3g}")
    return {"loss": res.loss, "iterations": res.iterations}


def _grid(text: str) -> tuple[float, float, int]:
    try:
        lo, hi, steps = text.split(",")
        return float(lo), float(hi), int(steps)
    except ValueError:
        raise argparse.ArgumentTypeError("grid must be LO,HI,STEPS") from None


def cmd_landscape(args) -> dict:
    obs, meta = read_observations(Path(args.obs))
    scene = load_scene(args.scene).replace(seed=meta["seed"], hemisphere_samples=meta["hemisphere_samples"])
    rows = inverse.landscape_scan(scene, obs, args.param, args.grid, args.loss, args.primitive, args.axis,
                                  args.threads)
    write_csv(args.out, [args.param, args.loss], rows)
    best = min(rows, key=lambda r: r[1])
    print(f"argmin {args.param} = {best[0]:.6g} (loss {best[1]:.6g})")
    return {"argmin": best[0]}


# --- argument parsing --------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError("must be a positive number")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError("must be a non-negative number")
    return v


def _add_threads(p):
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker threads (default: $POLARIS_THREADS, else CPU count)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log progress to stderr")
    parser = _Parser(prog="polaris", description="Polarimetric rendering and material recovery.",
                     parents=[common])
    parser.add_argument("--version", action="version", version=f"polaris {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _sub_add = sub.add_parser

    def add_parser(*a, **kw):
        return _sub_add(*a, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("render", aliases=["dataset"], help="render Stokes/DoLP/polarizer PFM images")
    p.add_argument("scene", help="scene JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="sampling seed (overrides the scene file)")
    p.add_argument("--samples", type=_positive_int, default=None,
                   help="hemisphere samples N (overrides the scene file; at least 4)")
    p.add_argument("--views", type=_positive_int, default=None,
                   help="render N orbit views into view_000... subdirectories")
    _add_threads(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fresnel-curve", help="reflectance and phase-delay curve as CSV")
    p.add_argument("--eta", type=_positive_float, required=True, help="real part of the refractive index")
    p.add_argument("--k", type=_nonneg_float, default=0.0, help="extinction coefficient (index = eta - k i)")
    p.add_argument("--theta-min", type=float, default=0.0, help="first angle in degrees (default 0)")
    p.add_argument("--theta-max", type=float, default=89.9, help="last angle in degrees (default 89.9)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_fresnel_curve)

    p = sub.add_parser("stokes", help="convert between Stokes, polarizer and DoLP images")
    p.add_argument("mode", choices=["to_polarizer", "from_polarizer", "dolp"])
    p.add_argument("--in", dest="input", required=True,
                   help="input directory (s0/s1/s2.pfm, or i000/i045/i090/i135.pfm for from_polarizer)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_stokes)

    def add_obs(p):
        p.add_argument("scene", help="scene JSON file (geometry, lighting; materials are the ground truth)")
        p.add_argument("--obs", required=True, help="directory written by 'polaris render'")
        _add_threads(p)

    p = sub.add_parser("invert", help="recover material parameters from rendered observations")
    add_obs(p)
    p.add_argument("--free", required=True,
                   help="free parameters, e.g. 'roughness,eta,k,ks' or '0:roughness,albedo;1:ks'")
    p.add_argument("--out", required=True, help="directory for report.csv and loss_trace.csv")
    p.add_argument("--lr", type=_positive_float, default=0.05, help="Adam learning rate (default 0.05)")
    p.add_argument("--lr-final", type=_positive_float, default=None,
                   help="cosine-anneal the learning rate down to this value")
    p.add_argument("--iters", type=_positive_int, default=300, help="Adam iterations (default 300)")
    p.add_argument("--fd-step", type=_positive_float, default=1e-4,
                   help="finite-difference step in transformed space (default 1e-4)")
    p.add_argument("--lambda-s", type=_nonneg_float, default=1.0, help="Stokes L1 weight (default 1)")
    p.add_argument("--lambda-dolp", type=_nonneg_float, default=0.1, help="DoLP L1 weight (default 0.1)")
    p.add_argument("--dolp-all-pixels", action="store_true", help="do not restrict the DoLP loss to the mask")
    p.add_argument("--init-gt", action="store_true", help="start from the scene's values instead of defaults")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("landscape", help="loss over a 1-D grid of a sphere parameter")
    add_obs(p)
    p.add_argument("--param", choices=list(inverse.GEOM_PARAMS), default="sphere_radius")
    p.add_argument("--grid", type=_grid, required=True, help="LO,HI,STEPS (steps >= 3)")
    p.add_argument("--loss", choices=list(inverse.LOSS_KINDS), default="dolp_l1")
    p.add_argument("--primitive", type=int, default=0, help="index of the sphere primitive (default 0)")
    p.add_argument("--axis", type=int, choices=[0, 1, 2], default=0, help="center axis for sphere_center_axis")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_landscape)
    return parser


def resolved_config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    if "threads" in cfg:
        cfg["threads"] = renderer.resolve_threads(cfg["threads"])
    return cfg


def _check_usage(args):
    if args.func is cmd_fresnel_curve and not args.theta_max >= args.theta_min:
        raise UsageError("--theta-max must not be below --theta-min")
    if args.func is cmd_landscape:
        lo, hi, steps = args.grid
        if steps < 3 or not hi > lo:
            raise UsageError("--grid needs HI > LO and at least 3 steps")
    if args.func is cmd_render and args.samples is not None and args.samples < 4:
        raise UsageError("--samples must be at least 4")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        _check_usage(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"polaris: error: {exc}", file=sys.stderr)
        return 1
    print("config " + json.dumps(resolved_config(args), sort_keys=True, default=str), flush=True)
    try:
        summary = args.func(args)
    except (SceneError, PfmError, OSError, ValueError, KeyError, inverse.OptimizationDiverged,
            FloatingPointError) as exc:
        print(f"polaris: error: {exc}", file=sys.stderr)
        return 2
    print("done " + json.dumps(summary, sort_keys=True, default=str), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
