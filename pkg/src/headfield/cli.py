# MIT License
#
# Copyright (c) 2020 Gilles Bouissac
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in
# all copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.

# <pep8 compliant>

""" headfield command line

Every command resolves its configuration (defaults < --config file <
--set overrides), writes the snapshot next to its outputs and exits with
the code of the error it hit.
"""

import argparse
import json
import logging
import os
import sys
import traceback
from dataclasses import replace

import numpy as np
import torch

from . amf import UNIT_CONVERSION, compute_scaling, export_amf, \
    transform_vertices
from . avatar import HeadAvatar
from . canonical import LatentTriplet, grid_iou, interpolate_latents, \
    sample_latents
from . config import SNAPSHOT_NAME, RunConfig, merge
from . dataset import load_dataset, synthesize_dataset
from . errors import HeadFieldError, InvalidArgumentError
from . fit import (aggregate_metrics, eval_fit, fit_scan,
                   nearest_training_baseline, write_metrics_csv,
                   write_metrics_json, FitResult)
from . geomio import mesh_format, read_mesh, write_mesh
from . headmodel import JAW, N_PSI, HeadParams, canonical_theta
from . mesh import Mesh
from . render import camera_rig, render_scan, save_render_png
from . train import train_stage

logger = logging.getLogger(__name__)

PRESETS = ("jaw", "extreme")


def _common():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="dotted configuration override, repeatable")
    common.add_argument("--seed", type=int, help="seed of every random draw")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--force", action="store_true",
                        help="write into a non-empty output directory")
    common.add_argument("--threads", type=int, default=0,
                        help="cap on torch worker threads")
    common.add_argument("-v", "--verbose", action="count", default=0)
    return common


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(
        prog="headfield", description="Generative animatable head fields")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("synth-data", parents=[common],
                        help="write a synthetic scan dataset")

    train = commands.add_parser("train", parents=[common],
                                help="train one stage into --out")
    train.add_argument("--stage", type=int, choices=(1, 2), required=True)
    train.add_argument("--data", required=True, help="dataset directory")
    train.add_argument("--no-resume", dest="resume", action="store_false")

    generate = commands.add_parser("generate", parents=[common],
                                   help="sample new heads")
    generate.add_argument("--checkpoint", required=True)
    generate.add_argument("--count", type=int, default=1)
    generate.add_argument("--resolution", type=int)
    generate.add_argument("--format", choices=("ply", "obj"), default="ply")

    animate = commands.add_parser("animate", parents=[common],
                                  help="deform a head through a sequence")
    animate.add_argument("--checkpoint", required=True)
    source = animate.add_mutually_exclusive_group(required=True)
    source.add_argument("--latents", help="latent triplet JSON file")
    source.add_argument("--subject", help="training subject id")
    frames = animate.add_mutually_exclusive_group(required=True)
    frames.add_argument("--params", help="JSON list of {theta, psi} frames")
    frames.add_argument("--preset", choices=PRESETS)
    animate.add_argument("--frames", type=int, default=9)
    animate.add_argument("--method", choices=("forward", "field"))
    animate.add_argument("--resolution", type=int)

    interp = commands.add_parser("interp", parents=[common],
                                 help="interpolate two subjects")
    interp.add_argument("--checkpoint", required=True)
    interp.add_argument("--subject-a", required=True)
    interp.add_argument("--subject-b", required=True)
    interp.add_argument("--steps", type=int, default=10)
    interp.add_argument("--resolution", type=int)

    for name, text in (("fit", "fit latent codes to scans"),
                       ("eval", "evaluate stored codes against scans")):
        sub = commands.add_parser(name, parents=[common], help=text)
        sub.add_argument("--checkpoint", required=True)
        sub.add_argument("--data", required=True, help="dataset directory")
        sub.add_argument("--split", choices=("train", "holdout"),
                         default="holdout" if name == "fit" else "train")
        sub.add_argument("--limit", type=int,
                         help="use only the first scans of the split")
        if name == "fit":
            sub.add_argument("--baseline", action="store_true",
                             help="also score the nearest training subject")
        else:
            sub.add_argument("--fits", help="directory written by fit")

    export = commands.add_parser("export", parents=[common],
                                 help="convert meshes to OBJ, PLY or AMF")
    export.add_argument("inputs", nargs="+", help="OBJ or PLY meshes")
    export.add_argument("--unit", choices=tuple(UNIT_CONVERSION),
                        default="millimeter")
    return parser


def resolve_config(args, fallback_dir=None):
    """ RunConfig of a parsed command line

    Without --config the snapshot in fallback_dir, when present, is the
    base the overrides apply to.
    """
    path = args.config
    if path is None and fallback_dir is not None:
        candidate = os.path.join(fallback_dir, SNAPSHOT_NAME)
        if os.path.exists(candidate):
            path = candidate
    config = RunConfig.load(path, args.overrides)
    config = replace(config, command=args.command, threads=args.threads,
                     out=args.out or "")
    if args.seed is not None:
        config = apply_seed(config, args.seed)
    return config.validate()


def apply_seed(config, seed):
    """ Route one seed to every randomized part of the run """
    return merge(config, {"seed": seed, "data": {"seed": seed},
                          "network": {"seed": seed}, "train": {"seed": seed},
                          "fit": {"seed": seed}})


def _require_out(args):
    if not args.out:
        raise InvalidArgumentError(f"{args.command} needs --out")
    return args.out


def _prepare_dir(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise InvalidArgumentError(
            f"{path} is not empty, use --force to overwrite")
    os.makedirs(path, exist_ok=True)
    return path


def cmd_synth_data(args):
    out = _require_out(args)
    config = resolve_config(args)
    dataset = synthesize_dataset(config, out, force=args.force)
    return {"scans": len(dataset), "subjects": len(dataset.subject_ids)}


def cmd_train(args):
    out = _require_out(args)
    config = resolve_config(args, out)
    dataset = load_dataset(args.data, "train")
    result = train_stage(args.stage, dataset, config, out, args.resume)
    return {"checkpoint": result.checkpoint, "epochs": len(result.history)}


def _avatar(args):
    config = resolve_config(args, args.checkpoint)
    return HeadAvatar.load(args.checkpoint, config=config), config


def _write(mesh, path):
    write_mesh(mesh, path)
    return path


def cmd_generate(args):
    out = _prepare_dir(_require_out(args), args.force)
    avatar, config = _avatar(args)
    config.write_snapshot(out)
    if args.count < 1:
        raise InvalidArgumentError("--count must be positive")
    rng = np.random.default_rng(config.seed)
    beta = torch.zeros(avatar.model.n_beta, dtype=torch.float64)
    cameras = camera_rig(config.render.resolution, config.render.half_extent)
    written = []
    for i in range(args.count):
        latents = sample_latents(avatar.table, rng)
        mesh = avatar.extract_canonical(latents, args.resolution, beta)
        stem = os.path.join(out, f"sample_{i:03d}")
        with open(stem + "_latents.json", "w") as fd:
            json.dump(latents.to_dict(), fd, indent=1)
        if mesh.is_empty:
            logger.warning("sample %d extracted an empty mesh", i)
            written.append({"sample": i, "empty": True})
            continue
        _write(mesh, f"{stem}.{args.format}")
        weights = Mesh(mesh.vertices, mesh.faces,
                       avatar.weight_colors(mesh.vertices, beta))
        _write(weights, f"{stem}_weights.{args.format}")
        for camera in cameras:
            save_render_png(render_scan(mesh, camera,
                                        config.render.background),
                            f"{stem}_{camera.name}")
        written.append({"sample": i, "empty": False,
                        "vertices": len(mesh.vertices),
                        "faces": len(mesh.faces)})
    with open(os.path.join(out, "generate.json"), "w") as fd:
        json.dump(written, fd, indent=2)
    return {"samples": args.count}


def pose_sequence(preset, frames, config, rng):
    """ (theta, psi) frames of a named preset, frame 0 is the rest pose

    jaw: the jaw opens from the canonical angle to 2.5 times the largest
    training angle. extreme: a jaw sweep, a neck sweep and an amplified
    expression, each beyond the training range.
    """
    if preset not in PRESETS:
        raise InvalidArgumentError(f"unknown preset {preset}")
    if frames < 1:
        raise InvalidArgumentError("a sequence needs at least one frame")
    rest = canonical_theta(config.deform.canonical_jaw)
    jaw_top = 2.5 * config.data.jaw_max
    out = []
    if preset == "jaw":
        for angle in np.linspace(config.deform.canonical_jaw, jaw_top,
                                 frames):
            theta = rest.clone()
            theta[3 * JAW] = float(angle)
            out.append((theta, torch.zeros(N_PSI, dtype=theta.dtype)))
        return out
    direction = torch.as_tensor(rng.normal(size=N_PSI))
    for k in range(frames):
        s = k / max(frames - 1, 1)
        theta = rest.clone()
        psi = torch.zeros(N_PSI, dtype=theta.dtype)
        phase = 3.0 * s
        if phase <= 1.0:
            theta[3 * JAW] = config.deform.canonical_jaw + phase * (
                jaw_top - config.deform.canonical_jaw)
        elif phase <= 2.0:
            theta[4] = 2.5 * config.data.neck_max * np.sin(
                np.pi * (phase - 1.0))
        else:
            psi = 3.0 * config.data.psi_scale * (phase - 2.0) * direction
        out.append((theta, psi))
    return out


def _read_frames(path, n_beta):
    with open(path) as fd:
        frames = json.load(fd)
    if not isinstance(frames, list):
        raise InvalidArgumentError(f"{path} must hold a list of frames")
    out = []
    for frame in frames:
        beta = frame.get("beta", [0.0] * n_beta)
        params = HeadParams(beta, frame["theta"], frame["psi"])
        out.append(params)
    return out


def cmd_animate(args):
    out = _prepare_dir(_require_out(args), args.force)
    avatar, config = _avatar(args)
    config.write_snapshot(out)
    if args.latents:
        with open(args.latents) as fd:
            latents = LatentTriplet.from_dict(json.load(fd))
    else:
        latents = avatar.latents(args.subject)
    beta = torch.zeros(avatar.model.n_beta, dtype=torch.float64)
    if args.params:
        sequence = _read_frames(args.params, avatar.model.n_beta)
    else:
        rng = np.random.default_rng(config.seed)
        sequence = [HeadParams(beta, theta, psi) for theta, psi in
                    pose_sequence(args.preset, args.frames, config, rng)]
    method = args.method or config.fit.extraction
    records = []
    for k, params in enumerate(sequence):
        mesh = avatar.extract_deformed(latents, params, args.resolution,
                                       method)
        path = os.path.join(out, f"frame_{k:03d}.ply")
        if not mesh.is_empty:
            _write(mesh, path)
        records.append({"frame": k, "empty": mesh.is_empty,
                        "lip_gap": avatar.lip_gap(params),
                        "params": params.to_dict()})
    with open(os.path.join(out, "frames.json"), "w") as fd:
        json.dump(records, fd, indent=1)
    return {"frames": len(records)}


def cmd_interp(args):
    out = _prepare_dir(_require_out(args), args.force)
    avatar, config = _avatar(args)
    config.write_snapshot(out)
    if args.steps < 2:
        raise InvalidArgumentError("--steps must be at least 2")
    a = avatar.latents(args.subject_a)
    b = avatar.latents(args.subject_b)
    weights = np.linspace(0.0, 1.0, args.steps)
    frames = [interpolate_latents(a, b, float(t)) for t in weights]
    for k, latents in enumerate(frames):
        mesh = avatar.extract_canonical(latents, args.resolution)
        if not mesh.is_empty:
            _write(mesh, os.path.join(out, f"frame_{k:03d}.ply"))
    fields = [avatar.canonical_occupancy(latents) for latents in frames]
    resolution = args.resolution or 32
    half = avatar.half_extent
    summary = {
        "t": weights.tolist(),
        "consecutive_iou": [grid_iou(fields[k], fields[k + 1], resolution,
                                     half) for k in range(len(fields) - 1)],
        "endpoint_iou": grid_iou(fields[0], fields[-1], resolution, half),
    }
    with open(os.path.join(out, "interp.json"), "w") as fd:
        json.dump(summary, fd, indent=2)
    return {"frames": len(frames)}


def _scans(args):
    dataset = load_dataset(args.data, args.split)
    pairs = list(zip(dataset.names, dataset.scans))
    if args.limit is not None:
        pairs = pairs[:args.limit]
    return pairs


def _write_tables(out, rows, prefix="metrics"):
    write_metrics_csv(rows, os.path.join(out, f"{prefix}.csv"))
    write_metrics_json(rows, os.path.join(out, f"{prefix}.json"))
    write_metrics_csv(aggregate_metrics(rows),
                      os.path.join(out, f"{prefix}_mean.csv"))


def cmd_fit(args):
    out = _prepare_dir(_require_out(args), args.force)
    avatar, config = _avatar(args)
    config.write_snapshot(out)
    rows, baseline = [], []
    for name, scan in _scans(args):
        fit = fit_scan(scan, avatar, config.fit, dump_dir=out)
        rows.extend(eval_fit(fit, scan, avatar, config.fit, name))
        with open(os.path.join(out, f"fit_{name}.json"), "w") as fd:
            json.dump({"latents": fit.latents.to_dict(),
                       "trace": fit.trace}, fd, indent=1)
        if args.baseline:
            subject, best = nearest_training_baseline(scan, avatar,
                                                      config.fit, name)
            for row in best:
                row["baseline"] = subject
            baseline.extend(best)
    _write_tables(out, rows)
    if args.baseline:
        _write_tables(out, baseline, "baseline")
    return {"rows": len(rows)}


def cmd_eval(args):
    out = _prepare_dir(_require_out(args), args.force)
    avatar, config = _avatar(args)
    config.write_snapshot(out)
    rows = []
    for name, scan in _scans(args):
        if args.fits:
            with open(os.path.join(args.fits, f"fit_{name}.json")) as fd:
                latents = LatentTriplet.from_dict(json.load(fd)["latents"])
        else:
            latents = avatar.latents(scan.subject_id)
        rows.extend(eval_fit(FitResult(latents, scan.subject_id), scan,
                             avatar, config.fit, name))
    _write_tables(out, rows)
    return {"rows": len(rows)}


def cmd_export(args):
    out = _require_out(args)
    config = resolve_config(args)
    meshes = [(os.path.splitext(os.path.basename(path))[0], read_mesh(path))
              for path in args.inputs]
    ext = os.path.splitext(out)[1].lower()
    directory = os.path.dirname(os.path.abspath(out))
    os.makedirs(directory, exist_ok=True)
    config.write_snapshot(directory, os.path.basename(out) + ".config.json")
    if ext == ".amf":
        export_amf(meshes, out, args.unit)
        return {"objects": len(meshes)}
    mesh_format(out)
    if len(meshes) != 1:
        raise InvalidArgumentError("OBJ and PLY export take one mesh")
    mesh = meshes[0][1]
    _, _, matrix = compute_scaling(args.unit)
    _write(Mesh(transform_vertices(mesh.vertices, matrix), mesh.faces,
                mesh.colors, mesh.normals), out)
    return {"objects": 1}


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "animate": cmd_animate,
    "interp": cmd_interp,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "export": cmd_export,
}


def main(argv=None):
    """ Run one command, returns the process exit code """
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[
        min(args.verbose, 2)]
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        summary = COMMANDS[args.command](args)
    except HeadFieldError as error:
        logger.error("%s", error)
        return error.exit_code
    except Exception:
        traceback.print_exc()
        return 1
    logger.info("%s done: %s", args.command, summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
