"""Command-line entry point: ``flashsg {render,gen,fit,metrics,gradcheck,sg-project}``.

Exit codes: 0 success, 1 bad input (contract or load error), 2 numerical
failure (including a failed gradient check).
"""

import argparse
import os
import sys

import numpy as np

from . import datagen
from .errors import ContractError, NumericalError, RecordLoadError, SceneRejected
from .fileio import read_environment, read_pfm, read_png, write_pfm, write_png
from .geometry import Camera, scene_from_text, trace_gbuffer
from .inverse import CascadeFitter, Capture, grad_check
from .inverse.gradcheck import STAGE_CLASSES
from .losses import evaluate_maps, loss_sg_l2
from .sg import bank_from_text, bank_to_text
from .shading import FlashLight, RenderOptions, SvbrdfMaps, ldr_to_linear, render, tonemap_ldr

FIT_STAGES = {"illum": ("illumination",), "svbrdf": ("svbrdf",), "joint": ("joint",),
              "all": ("illumination", "svbrdf", "joint")}


def _read_text(path):
    if not os.path.isfile(path):
        raise RecordLoadError(f"{path}: file not found", path=path)
    with open(path) as fh:
        return fh.read()


def _write_text(path, text):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _out_prefix(path):
    root, ext = os.path.splitext(path)
    return root if ext.lower() in (".pfm", ".png") else path


def cmd_render(args):
    prims, camera, flash = scene_from_text(_read_text(args.scene), args.scene)
    bank = bank_from_text(_read_text(args.bank), args.bank)
    camera = camera or Camera()
    if args.resolution:
        camera = Camera(args.resolution, args.resolution, camera.fov, camera.rotation, camera.translation,
                        camera.near, camera.far)
    pool = datagen.procedural_materials()
    for p in prims:
        if not 0 <= p.material_id < len(pool):
            raise ContractError(f"{args.scene}: material_id {p.material_id} not in the {len(pool)}-material pool")
    indexed = datagen._indexed(prims)
    gb = trace_gbuffer(indexed, camera, args.threads)
    gt = datagen.material_lookup(gb, [pool[p.material_id] for p in prims])
    maps = SvbrdfMaps(gt[..., 0:3], gt[..., 3:6], gt[..., 6])
    light = FlashLight(flash if flash is not None else np.ones(3))
    opts = RenderOptions.from_mode(args.mode, args.reference_quadrature)
    hdr = render(gb, maps, bank, light, opts, env_rotation=camera.rotation, threads=args.threads)
    prefix = _out_prefix(args.out)
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    write_pfm(prefix + ".pfm", hdr)
    write_png(prefix + ".png", tonemap_ldr(hdr))
    print(f"wrote {prefix}.pfm {prefix}.png")


def cmd_gen(args):
    paths = datagen.generate_dataset(args.out, args.count, args.seed, args.resolution, args.threads)
    print(f"wrote {len(paths)} records to {args.out}")


def _iterations(args, default):
    return default if args.iterations is None else args.iterations


def cmd_fit(args):
    rec = datagen.read_record(args.record)
    gb = rec.gbuffer()
    capture = Capture(rec.flash, rec.noflash, gb, rec.camera, rec.flash_light, rec.noflash_camera)
    fitter = CascadeFitter(FIT_STAGES[args.stage], _iterations(args, 2000), _iterations(args, 5000),
                           _iterations(args, 2000), args.learning_rate, args.smoothness_weight)
    # stages that are not run take ground truth from the record
    fitter.fit(capture, bank=rec.bank, maps=rec.maps)
    m = rec.mask
    os.makedirs(args.out, exist_ok=True)
    j = lambda name: os.path.join(args.out, name)  # noqa: E731
    write_png(j("diffuse.png"), np.where(m[..., None], datagen.encode_color(fitter.maps_.diffuse), 0).astype(np.uint8))
    write_png(j("specular.png"),
              np.where(m[..., None], datagen.encode_color(fitter.maps_.specular), 0).astype(np.uint8))
    write_png(j("roughness.png"), np.where(m, datagen.encode_linear(fitter.maps_.roughness), 0).astype(np.uint8))
    write_pfm(j("normal.pfm"), np.where(m[..., None], fitter.normals_, 0.0))
    write_pfm(j("depth.pfm"), rec.depth)
    write_png(j("mask.png"), np.where(m, 255, 0).astype(np.uint8))
    write_pfm(j("render.pfm"), fitter.predict(capture))
    _write_text(j("illum_sg.txt"), bank_to_text(fitter.bank_))
    print(f"fitted stages {','.join(FIT_STAGES[args.stage])}; wrote {args.out}")


def _load_maps(directory):
    j = lambda name: os.path.join(directory, name)  # noqa: E731
    out = {}
    if os.path.exists(j("depth.pfm")):
        out["depth"] = read_pfm(j("depth.pfm")).astype(np.float64)
    if os.path.exists(j("normal.pfm")):
        out["normal"] = read_pfm(j("normal.pfm")).astype(np.float64)
    for key in ("diffuse", "specular"):
        if os.path.exists(j(f"{key}.png")):
            out[key] = ldr_to_linear(read_png(j(f"{key}.png"), 3))
    if os.path.exists(j("roughness.png")):
        out["roughness"] = read_png(j("roughness.png"), 1) / 255.0
    if os.path.exists(j("illum_sg.txt")):
        out["bank"] = bank_from_text(_read_text(j("illum_sg.txt")), j("illum_sg.txt"))
    return out


def cmd_metrics(args):
    for d in (args.pred, args.ref):
        if not os.path.isdir(d):
            raise RecordLoadError(f"{d}: directory not found", path=d)
    mask_path = os.path.join(args.ref, "mask.png")
    mask = read_png(mask_path, 1) == 255
    pred, ref = _load_maps(args.pred), _load_maps(args.ref)
    for key in ("depth", "normal", "diffuse", "specular", "roughness"):
        if key in pred and key in ref and pred[key].shape != ref[key].shape:
            raise ContractError(f"{key}: predicted shape {pred[key].shape} != reference {ref[key].shape}")
    report = evaluate_maps(pred, ref, mask)
    if "bank" in pred and "bank" in ref:
        report["sg_l2"] = loss_sg_l2(pred["bank"], ref["bank"])
    if not report:
        raise ContractError("no map present in both directories")
    text = "".join(f"{k} {v:.9g}\n" for k, v in report.items())
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)


def cmd_gradcheck(args):
    report = grad_check(args.stage, args.seed, args.samples, args.corrupt)
    text = report.to_text()
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return 0 if report.passed else 2


def cmd_sg_project(args):
    env = read_environment(args.env)
    bank = datagen.project_env_to_sg(env, samples=args.samples)
    _write_text(args.out, bank_to_text(bank))
    print(f"wrote {args.out}")


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors (exit 1), not argparse's default 2
    def error(self, message):
        raise ContractError(f"{self.prog}: {message}")


def build_parser():
    parser = _Parser(prog="flashsg", description="SG-lit flash/no-flash inverse rendering tools")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--threads", type=int, default=1, help="worker threads for data-parallel loops")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="key-value file presetting any flag of this command")
        p.set_defaults(func=fn)
        return p

    p = add("render", cmd_render, "render a scene file under an SG bank")
    p.add_argument("scene")
    p.add_argument("bank")
    p.add_argument("out", help="output path; .pfm and .png are written next to each other")
    p.add_argument("--mode", choices=("full", "flash", "env"), default="full")
    p.add_argument("--reference-quadrature", type=int, default=None, metavar="N",
                   help="use N-sample brute-force quadrature for the environment term")
    p.add_argument("--resolution", type=int, default=None, help="override the scene camera's resolution")

    p = add("gen", cmd_gen, "generate synthetic dataset records")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=256)

    p = add("fit", cmd_fit, "run the fitting cascade on a record")
    p.add_argument("--record", required=True)
    p.add_argument("--stage", choices=tuple(FIT_STAGES), default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=None, help="override the iteration count of every stage")
    p.add_argument("--learning-rate", type=float, default=2e-4)
    p.add_argument("--smoothness-weight", type=float, default=0.01)

    p = add("metrics", cmd_metrics, "compare predicted maps against reference maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", default=None)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the analytic gradients")
    p.add_argument("--stage", choices=tuple(STAGE_CLASSES), default="all")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--corrupt", default=None, help="scale one class's gradient by 1.01 (negative control)")
    p.add_argument("--out", default=None)

    p = add("sg-project", cmd_sg_project, "project an equirectangular HDR map onto the SG bank")
    p.add_argument("--env", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=datagen.PROJECTION_SAMPLES)
    return parser


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Parse ``argv`` with defaults preset from the ``--config`` file, if any."""
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    subs = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in subs), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    sub = subs[command]
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    presets = {}
    for lineno, raw in enumerate(_read_text(path).splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition(" ")
        if "=" in key:
            key, _, value = line.partition("=")
        dest = key.strip().lstrip("-").replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise ContractError(f"{path}:{lineno}: unknown option {key.strip()!r} for {command}")
        action = actions[dest]
        value = value.strip()
        try:
            if isinstance(action, argparse._StoreTrueAction):
                presets[dest] = _parse_bool(value)
            else:
                presets[dest] = action.type(value) if action.type else value
        except ValueError as exc:
            raise ContractError(f"{path}:{lineno}: {exc}") from None
        if action.choices is not None and presets[dest] not in action.choices:
            raise ContractError(f"{path}:{lineno}: {value!r} is not one of {list(action.choices)}")
        action.required = False
    sub.set_defaults(**presets)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if args.threads < 1:
            raise ContractError("--threads must be at least 1")
        code = args.func(args)
    except (ContractError, RecordLoadError, SceneRejected, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        where = ", ".join(f"{k} {v}" for k, v in (("stage", exc.stage), ("parameter", exc.parameter),
                                                  ("step", exc.step)) if v is not None)
        print(f"numerical failure ({where}): {exc}" if where else f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
