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

""" Fitting latent codes of a trained avatar to a raw scan

Only the three codes move. The scan's head parameters are taken as given
and every network weight stays bit-identical.
"""

import contextlib
import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from . canonical import LatentTriplet
from . deform import deformed_field_eval
from . errors import (ContractViolationError, NumericFailureError,
                      UnavailableStateError)
from . geometry import as_tensor, to_numpy
from . geomio import (chamfer_and_fscore, color_distance, face_region_mask,
                      sample_training_points)
from . headmodel import posed_vertices
from . mesh import Mesh
from . neuralnet import AdamState, adam_step, parameter_digest

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("scan", "region", "status", "chamfer", "fscore", "color")
REGIONS = ("full", "face")
# Chamfer distances are reported in units of 1e-2
CHAMFER_SCALE = 100.0


@dataclass
class FitResult:
    latents: LatentTriplet
    subject_id: str = ""
    trace: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    @property
    def final_loss(self):
        return self.trace[-1]["total"] if self.trace else float("nan")


@dataclass
class _FitTargets:
    occ_points: torch.Tensor
    occ_gt: torch.Tensor
    occ_result: object
    surface_points: torch.Tensor
    surface_result: object
    normal_map: torch.Tensor
    color_gt: torch.Tensor
    normal_gt: torch.Tensor


@contextlib.contextmanager
def frozen(*modules):
    """ Disable gradients of every parameter, restoring the flags after """
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad_(flag)


def _targets(avatar, scan, latents, config):
    samples = scan.samples
    if samples is None:
        data = avatar.config.data
        samples = sample_training_points(
            scan, np.random.default_rng(config.seed), data.near_points,
            data.uniform_points, data.surface_points, data.near_sigma)
    deformer = avatar.deformer

    def occupancy(x):
        with torch.no_grad():
            return avatar.fields.occupancy(x, latents.z_shape)

    occ_points = as_tensor(samples.points)
    surface_points = as_tensor(samples.surface_points)
    occ_result = deformer.canonical_correspondence(occ_points, scan.params,
                                                   occupancy)
    surface_result = deformer.canonical_correspondence(
        surface_points, scan.params, occupancy)
    index = torch.nonzero(surface_result.valid)[:, 0]
    if len(index):
        jac = deformer.jacobian(surface_result.x_c[index], scan.params)
        normal_map = torch.linalg.inv(jac.detach()).transpose(1, 2)
    else:
        normal_map = torch.zeros(0, 3, 3, dtype=occ_points.dtype)
    return _FitTargets(occ_points, as_tensor(samples.occ_gt), occ_result,
                       surface_points, surface_result, normal_map,
                       as_tensor(samples.color_gt)[index],
                       as_tensor(samples.normal_gt)[index])


def fit_loss(avatar, targets, latents, params, config):
    """ L_occ + L_3D + lambda_r L_reg of the fitting problem

    Returns (scalar, dict of float components)
    """
    sample, _ = deformed_field_eval(
        avatar.deformer, avatar.fields, targets.occ_points, latents, params,
        normals=False, colors=False, correspondence=targets.occ_result)
    valid = targets.occ_result.valid
    occ = F.binary_cross_entropy(sample.occ[valid], targets.occ_gt[valid])

    color_term = normal_term = torch.zeros((), dtype=occ.dtype)
    surface = targets.surface_result
    if surface.valid.any():
        x_c = surface.x_c[surface.valid]
        inner = avatar.fields.evaluate(x_c, latents, params.theta,
                                       params.psi)
        normal = (targets.normal_map @ inner.normal[:, :, None])[:, :, 0]
        normal = normal / normal.norm(dim=-1, keepdim=True).clamp_min(1e-300)
        color_term = ((inner.color - targets.color_gt) ** 2).sum(-1).mean()
        normal_term = (1.0 - (targets.normal_gt * normal).sum(-1)).mean()
    shape, detail, color = latents.energy()
    reg = config.lambda_shape * shape + config.lambda_detail * detail \
        + config.lambda_color * color
    total = occ + config.lambda_c * color_term \
        + config.lambda_n * normal_term + config.lambda_r * reg
    return total, {"occ": float(occ), "color": float(color_term),
                   "normal": float(normal_term), "reg": float(reg),
                   "total": float(total)}


def fit_scan(scan, avatar, config=None, dump_dir=None):
    """ Optimize a latent triplet so the avatar explains scan

    Codes start at the mean of the latent table and are updated with
    adam_step for config.iterations steps.

    Keyword arguments:
        scan - Scan with fitted HeadParams
        avatar - trained HeadAvatar
        config - FitConfig, defaults to the avatar's
        dump_dir - where the loss trace is written when the fit diverges
    """
    config = config or avatar.config.fit
    if scan.params is None:
        raise ContractViolationError(
            f"scan {scan.subject_id} has no head parameters")
    if len(avatar.table) == 0 or not bool(avatar.table.trained):
        raise UnavailableStateError("avatar latent table is not trained")
    modules = list(avatar.modules().values())
    before = parameter_digest(*modules)
    start = avatar.table.mean()

    with frozen(*modules):
        targets = _targets(avatar, scan, start, config)
        if not targets.occ_result.valid.any():
            raise ContractViolationError(
                f"no sample of scan {scan.subject_id} has a canonical "
                "correspondence")
        codes = [start.z_shape.clone().requires_grad_(True),
                 start.z_detail.clone().requires_grad_(True),
                 start.z_color.clone().requires_grad_(True)]
        state = AdamState()
        trace = []
        initial = None
        for step in tqdm(range(config.iterations + 1),
                         desc=f"fit {scan.subject_id}",
                         disable=not logger.isEnabledFor(logging.INFO)):
            latents = LatentTriplet(*codes, subject_id=scan.subject_id)
            loss, components = fit_loss(avatar, targets, latents,
                                        scan.params, config)
            components["iteration"] = step
            trace.append(components)
            value = components["total"]
            if initial is None:
                initial = value
            if not math.isfinite(value) \
                    or value > config.divergence_factor * initial:
                dump = _dump_trace(dump_dir, scan, trace)
                raise NumericFailureError(
                    f"fit of {scan.subject_id} diverged at iteration {step}",
                    dump)
            if step == config.iterations:
                break
            grads = torch.autograd.grad(loss, codes, allow_unused=True)
            grads = [torch.zeros_like(c) if g is None else g
                     for c, g in zip(codes, grads)]
            codes, state = adam_step([c.detach() for c in codes], grads,
                                     state, config.lr)
            codes = [c.requires_grad_(True) for c in codes]

    if parameter_digest(*modules) != before:
        raise ContractViolationError("fitting changed network weights")
    latents = LatentTriplet(*[c.detach() for c in codes],
                            subject_id=scan.subject_id)
    logger.info("fitted %s: loss %.6f -> %.6f", scan.subject_id, initial,
                trace[-1]["total"])
    return FitResult(latents, scan.subject_id, trace)


def _dump_trace(directory, scan, trace):
    if directory is None:
        return None
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"fit_{scan.subject_id}_trace.json")
    with open(path, "w") as fd:
        json.dump(trace, fd, indent=1)
    return path


def face_selector(avatar, params, radius):
    """ Region selector of the facial vertices of the posed template """
    posed = to_numpy(posed_vertices(avatar.model, params))
    return face_region_mask(posed[avatar.model.face_region], radius)


def mesh_metrics(prediction, reference, config, region=None):
    """ (chamfer x 100, fscore, color distance) of two meshes """
    chamfer, fscore = chamfer_and_fscore(
        prediction, reference, config.tau, config.metric_samples,
        config.seed, region)
    color = float("nan")
    if prediction.has_colors and reference.has_colors:
        color = color_distance(prediction, reference, config.metric_samples,
                               config.seed, region)
    return CHAMFER_SCALE * chamfer, fscore, color


def metric_rows(name, prediction, reference, face, config):
    """ One row per region; an empty prediction gives failure rows """
    rows = []
    for region in REGIONS:
        row = {"scan": name, "region": region}
        if prediction.is_empty:
            row.update(status="empty", chamfer=float("nan"),
                       fscore=float("nan"), color=float("nan"))
        else:
            chamfer, fscore, color = mesh_metrics(
                prediction, reference, config,
                face if region == "face" else None)
            row.update(status="ok", chamfer=chamfer, fscore=fscore,
                       color=color)
        rows.append(row)
    return rows


def eval_fit(fit, scan, avatar, config=None, name=None):
    """ Metric rows of a fit against its scan, full avatar and face """
    config = config or avatar.config.fit
    name = name or scan.subject_id
    mesh = avatar.extract_deformed(fit.latents, scan.params,
                                   config.eval_resolution, config.extraction)
    if mesh.is_empty:
        logger.warning("fit of %s extracted an empty mesh", scan.subject_id)
    face = face_selector(avatar, scan.params, config.face_radius)
    fit.rows = metric_rows(name, mesh, scan.mesh, face, config)
    return fit.rows


def nearest_training_baseline(scan, avatar, config=None, name=None):
    """ Best training subject reconstruction of scan

    Each training subject's own codes are extracted under the scan's
    parameters; the one with the lowest full Chamfer distance wins.
    Returns (subject id, metric rows).
    """
    config = config or avatar.config.fit
    name = name or scan.subject_id
    if len(avatar.table) == 0:
        raise UnavailableStateError("avatar has no training subjects")
    face = face_selector(avatar, scan.params, config.face_radius)
    best = None
    for row in range(len(avatar.table)):
        latents = avatar.latents(row)
        mesh = avatar.extract_deformed(latents, scan.params,
                                       config.eval_resolution,
                                       config.extraction)
        rows = metric_rows(name, mesh, scan.mesh, face, config)
        chamfer = rows[0]["chamfer"]
        if math.isnan(chamfer):
            continue
        if best is None or chamfer < best[1][0]["chamfer"]:
            best = (latents.subject_id, rows)
    if best is None:
        return "", metric_rows(name, Mesh.empty(), scan.mesh,
                               face, config)
    return best


def aggregate_metrics(rows):
    """ Mean of every metric per region over the successful rows """
    out = []
    for region in REGIONS:
        selected = [r for r in rows if r["region"] == region
                    and r["status"] == "ok"]
        row = {"scan": "mean", "region": region, "status": "ok"
               if selected else "empty"}
        for key in ("chamfer", "fscore", "color"):
            values = [r[key] for r in selected]
            row[key] = float(np.mean(values)) if values else float("nan")
        out.append(row)
    return out


def write_metrics_csv(rows, path):
    """ CSV with METRIC_COLUMNS, header only for no rows """
    with open(path, "w", newline="") as fd:
        writer = csv.DictWriter(fd, fieldnames=METRIC_COLUMNS,
                                extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _format(row[key]) for key in
                             METRIC_COLUMNS})
    return path


def write_metrics_json(rows, path):
    with open(path, "w") as fd:
        json.dump([{key: row[key] for key in METRIC_COLUMNS}
                   for row in rows], fd, indent=2, allow_nan=True)
    return path


def read_metrics_csv(path):
    with open(path, newline="") as fd:
        rows = list(csv.DictReader(fd))
    for row in rows:
        for key in ("chamfer", "fscore", "color"):
            row[key] = float(row[key])
    return rows


def _format(value):
    if isinstance(value, float):
        return repr(value)
    return value
