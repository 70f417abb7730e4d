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

""" Two-stage training of the head avatar

Stage 1 fits occupancy, shape removal and deformation bases together with
the shape codes. Stage 2 freezes all of it and fits the normal and texture
networks with the detail and colour codes against precomputed 2D and 3D
correspondences.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from . avatar import STAGE_FILES, HeadAvatar
from . deform import deformed_field_eval
from . errors import (ContractViolationError, InvalidArgumentError,
                      NumericFailureError, UnavailableStateError)
from . geometry import DTYPE, as_tensor
from . headmodel import PARENTS, HeadParams, joints, posed_vertices
from . neuralnet import load_checkpoint, parameter_digest
from . render import camera_rig, render_field, render_scan

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
LOCK_FILE = "train.lock"
DUMP_FILE = "nan_batch.pt"


@dataclass
class OccupancyItem:
    """ Occupancy supervision of one scan for one step """
    row: int
    params: HeadParams
    points: torch.Tensor
    occ_gt: torch.Tensor


@dataclass
class AppearanceTargets:
    """ Frozen canonical correspondences of one scan for stage 2

    normal_map rows are J^-T of the deformation at x_c, they carry
    canonical normals to the scan's space.
    """
    row: int
    params: HeadParams
    x_c: torch.Tensor
    normal_map: torch.Tensor
    color_gt: torch.Tensor
    normal_gt: torch.Tensor
    pixel_x_c: torch.Tensor
    pixel_map: torch.Tensor
    pixel_rgb: torch.Tensor
    pixel_normal: torch.Tensor

    @property
    def is_empty(self):
        return len(self.x_c) == 0 and len(self.pixel_x_c) == 0


@dataclass
class TrainResult:
    checkpoint: str
    history: list = field(default_factory=list)


def resolve_ablation(config):
    """ Copy of config whose deformation mode follows the ablation switch
    """
    mode = config.train.deform_mode()
    if config.deform.mode == mode:
        return config
    return replace(config, deform=replace(config.deform, mode=mode))


def occupancy_items(avatar, scans, rng, count):
    """ Random occupancy subsets of count points per scan """
    items = []
    for scan in scans:
        if scan.samples is None:
            raise ContractViolationError(
                f"scan {scan.subject_id} has no training samples")
        total = len(scan.samples.points)
        ids = np.sort(rng.choice(total, min(count, total), replace=False))
        items.append(OccupancyItem(
            avatar.table.index(scan.subject_id), scan.params,
            as_tensor(scan.samples.points[ids]),
            as_tensor(scan.samples.occ_gt[ids])))
    return items


def deshape_loss(avatar, beta):
    """ Shape removal of the subject's canonical template vertices """
    deformer = avatar.deformer
    shaped = posed_vertices(avatar.model, deformer.canonical_params(beta))
    neutral = posed_vertices(avatar.model, deformer.canonical_params(
        torch.zeros_like(as_tensor(beta))))
    moved = deformer.remove_shape(shaped, beta)
    return ((moved - neutral) ** 2).sum(-1).mean()


def lbs_loss(avatar, x_c, beta, config):
    """ Distance of the predicted bases to the template components at x_c

    Returns (weighted total, {"lbs_w", "lbs_p", "lbs_e"}).
    """
    deformer = avatar.deformer
    x_c = as_tensor(x_c).detach()
    truth, _ = deformer.lookup(beta)(x_c)
    pred = deformer.continuous_bases(deformer.remove_shape(x_c, beta))
    parts = {
        "lbs_w": ((pred.W - truth.W) ** 2).sum(-1).mean(),
        "lbs_p": ((pred.P - truth.P) ** 2).sum((1, 2)).mean(),
        "lbs_e": ((pred.E - truth.E) ** 2).sum((1, 2)).mean(),
    }
    total = parts["lbs_w"] + config.lambda_p * parts["lbs_p"] \
        + config.lambda_e * parts["lbs_e"]
    return total, parts


def loss_stage1(avatar, batch, config, aux_rng=None):
    """ L_occ + lambda_d L_deshape + lambda_l L_lbs + lambda_r |z_shape|^2

    Occupancy is supervised at the deformed sample points through their
    re-attached canonical roots; points without a root do not take part.
    With aux_rng the first-epoch auxiliary losses are added.

    Keyword arguments:
        avatar - HeadAvatar being trained
        batch - list of OccupancyItem
        config - TrainConfig
        aux_rng - numpy Generator of the auxiliary samples or None
    Returns (scalar loss, dict of float components)
    """
    lbs_active = not config.no_lbs_loss and avatar.deformer.mode != "f_def"
    terms = {"occ": [], "deshape": [], "lbs": [], "reg": []}
    parts_lbs = {"lbs_w": [], "lbs_p": [], "lbs_e": []}
    converged = 0
    for item in batch:
        latents = avatar.table.get(item.row)
        sample, result = _deformed_occupancy(avatar, item, latents)
        valid = result.valid
        converged += int(valid.sum())
        if not valid.any():
            continue
        terms["occ"].append(F.binary_cross_entropy(
            sample.occ[valid], item.occ_gt[valid]))
        terms["deshape"].append(deshape_loss(avatar, item.params.beta))
        if lbs_active:
            value, parts = lbs_loss(avatar, result.x_c[valid],
                                    item.params.beta, config)
            terms["lbs"].append(value)
            for key, part in parts.items():
                parts_lbs[key].append(part)
        terms["reg"].append((latents.z_shape ** 2).sum())
    if converged == 0:
        raise ContractViolationError(
            "no sample point of the batch has a canonical correspondence")

    means = {key: _mean(values) for key, values in terms.items()}
    total = means["occ"] + config.lambda_d * means["deshape"] \
        + config.lambda_l * means["lbs"] + config.lambda_r * means["reg"]
    components = {key: float(value) for key, value in means.items()}
    components.update({key: float(_mean(values))
                       for key, values in parts_lbs.items()})
    components["converged"] = converged / sum(len(i.points) for i in batch)
    if aux_rng is not None:
        aux, aux_parts = auxiliary_losses_epoch1(avatar, batch, config,
                                                 aux_rng)
        total = total + aux
        components.update(aux_parts)
    components["total"] = float(total)
    return total, components


def _deformed_occupancy(avatar, item, latents):
    return deformed_field_eval(avatar.deformer, avatar.fields, item.points,
                               latents, item.params, normals=False,
                               colors=False, attach=True)


def bone_capsule_points(joint_locations, count, radius, rng):
    """ Points near the bones of the skeleton, canonical space

    Each bone runs from a parent joint towards its child and stops at
    three quarters of the way since eye joints lie on the surface.
    """
    joint_locations = np.asarray(joint_locations, dtype=np.float64)
    points = []
    for j in range(1, len(PARENTS)):
        start = joint_locations[PARENTS[j]]
        end = joint_locations[j]
        t = rng.uniform(0.0, 0.75, size=(count, 1))
        points.append(start + t * (end - start)
                      + _ball(count, radius, rng))
    return np.concatenate(points)


def joint_ball_points(joint_locations, count, radius, rng):
    """ Points around each joint with their joint index """
    joint_locations = np.asarray(joint_locations, dtype=np.float64)
    points, labels = [], []
    for j, center in enumerate(joint_locations):
        points.append(center + _ball(count, radius, rng))
        labels.append(np.full(count, j))
    return np.concatenate(points), np.concatenate(labels)


def _ball(count, radius, rng):
    direction = rng.normal(size=(count, 3))
    direction /= np.maximum(np.linalg.norm(direction, axis=1,
                                           keepdims=True), 1e-300)
    return direction * radius * rng.uniform(size=(count, 1)) ** (1.0 / 3.0)


def auxiliary_losses_epoch1(avatar, batch, config, rng):
    """ First-epoch guidance of the occupancy and skinning networks

    bone: points inside bone capsules of the subject must be occupied.
    joint: points near joint j must be skinned to j alone.
    Returns (scalar, {"aux_bone", "aux_joint"}).
    """
    bone_terms, joint_terms = [], []
    for item in batch:
        latents = avatar.table.get(item.row)
        locations = joints(avatar.model, item.params.beta).detach().numpy()
        capsules = as_tensor(bone_capsule_points(
            locations, config.aux_points, config.aux_bone_radius, rng))
        occ = avatar.fields.occupancy(capsules, latents.z_shape)
        bone_terms.append(F.binary_cross_entropy(occ, torch.ones_like(occ)))
        if avatar.deformer.mode == "f_def":
            continue
        points, labels = joint_ball_points(
            locations, config.aux_points, config.aux_joint_radius, rng)
        weights = avatar.deformer.bundle_at(as_tensor(points),
                                            item.params.beta).W
        target = F.one_hot(torch.as_tensor(labels),
                           weights.shape[1]).to(DTYPE)
        joint_terms.append(((weights - target) ** 2).sum(-1).mean())
    bone = _mean(bone_terms)
    joint = _mean(joint_terms)
    return bone + joint, {"aux_bone": float(bone), "aux_joint": float(joint)}


def bases_error(avatar, scan, points):
    """ Unweighted squared error of the predicted bases at canonical points
    """
    config = replace(avatar.config.train, lambda_p=1.0, lambda_e=1.0)
    with torch.no_grad():
        total, parts = lbs_loss(avatar, points, scan.params.beta, config)
    return float(total), {key: float(v) for key, v in parts.items()}


def precompute_appearance(avatar, scan, cameras, rng, surface_count=None):
    """ Canonical correspondences of surface samples and rendered pixels

    Only valid once the geometry and deformation are frozen. Pixels count
    when both the scan and the avatar cover them.
    """
    render = avatar.config.render
    deformer = avatar.deformer
    row = avatar.table.index(scan.subject_id)
    latents = avatar.latents(row)
    params = scan.params
    samples = scan.samples
    if samples is None:
        raise ContractViolationError(
            f"scan {scan.subject_id} has no training samples")

    total = len(samples.surface_points)
    count = total if surface_count is None else min(surface_count, total)
    ids = np.sort(rng.choice(total, count, replace=False))

    def occupancy(x):
        with torch.no_grad():
            return avatar.fields.occupancy(x, latents.z_shape)

    result = deformer.canonical_correspondence(
        samples.surface_points[ids], params, occupancy)
    keep = result.valid
    x_c = result.x_c[keep]
    color_gt = as_tensor(samples.color_gt[ids])[keep]
    normal_gt = as_tensor(samples.normal_gt[ids])[keep]

    pixel_x_c, pixel_rgb, pixel_normal = [], [], []
    field = avatar.render_field(latents, params)
    for camera in cameras:
        truth = render_scan(scan, camera, render.background)
        out = render_field(field, camera, render.steps, render.secant_iters,
                           render.background, depth_hint=truth.depth,
                           window=render.window,
                           window_steps=render.window_steps,
                           chunk=render.chunk_size)
        both = truth.mask & out.mask & np.isfinite(out.canonical).all(-1)
        pixel_x_c.append(out.canonical[both])
        pixel_rgb.append(truth.rgb[both])
        pixel_normal.append(truth.normal[both])
    pixel_x_c = as_tensor(np.concatenate(pixel_x_c))

    return AppearanceTargets(
        row, params, x_c, _normal_map(deformer, x_c, params), color_gt,
        normal_gt, pixel_x_c, _normal_map(deformer, pixel_x_c, params),
        as_tensor(np.concatenate(pixel_rgb)),
        as_tensor(np.concatenate(pixel_normal)))


def _normal_map(deformer, x_c, params):
    if len(x_c) == 0:
        return torch.zeros(0, 3, 3, dtype=DTYPE)
    jac = deformer.jacobian(x_c, params).detach()
    return torch.linalg.inv(jac).transpose(1, 2)


def _appearance(avatar, x_c, normal_map, latents, params):
    sample = avatar.fields.evaluate(x_c, latents, params.theta, params.psi)
    normal = (normal_map @ sample.normal[:, :, None])[:, :, 0]
    normal = normal / normal.norm(dim=-1, keepdim=True).clamp_min(1e-300)
    return sample.color, normal


def loss_stage2(avatar, batch, config):
    """ lambda_c L_color + lambda_n L_normal + lambda_r L_reg

    L_color = image + lambda |c - c_gt|^2
    L_normal = image + lambda (1 - n_gt . n)
    L_reg = |z_detail|^2 + lambda |z_color|^2

    Keyword arguments:
        avatar - HeadAvatar with frozen geometry
        batch - list of AppearanceTargets
        config - TrainConfig
    Returns (scalar loss, dict of float components)
    """
    if all(targets.is_empty for targets in batch):
        raise ContractViolationError(
            "no surface point of the batch has a canonical correspondence")
    terms = {key: [] for key in ("color_image", "color_point",
                                 "normal_image", "normal_point", "reg")}
    for targets in batch:
        latents = avatar.table.get(targets.row)
        if len(targets.x_c):
            color, normal = _appearance(avatar, targets.x_c,
                                        targets.normal_map, latents,
                                        targets.params)
            terms["color_point"].append(
                ((color - targets.color_gt) ** 2).sum(-1).mean())
            terms["normal_point"].append(
                (1.0 - (targets.normal_gt * normal).sum(-1)).mean())
        if len(targets.pixel_x_c):
            rgb, normal = _appearance(avatar, targets.pixel_x_c,
                                      targets.pixel_map, latents,
                                      targets.params)
            terms["color_image"].append(
                ((rgb - targets.pixel_rgb) ** 2).sum(-1).mean())
            terms["normal_image"].append(
                ((normal - targets.pixel_normal) ** 2).sum(-1).mean())
        terms["reg"].append((latents.z_detail ** 2).sum()
                            + config.lambda_color_code
                            * (latents.z_color ** 2).sum())

    means = {key: _mean(values) for key, values in terms.items()}
    color = means["color_image"] \
        + config.lambda_color_point * means["color_point"]
    normal = means["normal_image"] \
        + config.lambda_normal_point * means["normal_point"]
    total = config.lambda_c * color + config.lambda_n * normal \
        + config.lambda_r * means["reg"]
    components = {key: float(value) for key, value in means.items()}
    components.update({"color": float(color), "normal": float(normal),
                       "total": float(total)})
    return total, components


def _mean(values):
    if not values:
        return torch.zeros((), dtype=DTYPE)
    return torch.stack(values).mean()


def stage_parameters(avatar, stage):
    """ (network parameters, latent parameters) trained by a stage """
    if stage == 1:
        return (avatar.fields.shape_parameters()
                + avatar.deformer.network_parameters(),
                [avatar.table.z_shape])
    if stage == 2:
        return (avatar.fields.appearance_parameters(),
                [avatar.table.z_detail, avatar.table.z_color])
    raise InvalidArgumentError(f"unknown training stage {stage}")


def freeze_geometry(avatar):
    """ Stop gradients into every stage-1 parameter """
    for p in stage_parameters(avatar, 1)[0]:
        p.requires_grad_(False)
    avatar.table.z_shape.requires_grad_(False)


def geometry_digest(avatar):
    """ Digest of every parameter stage 1 owns """
    digest = parameter_digest(avatar.fields.volume,
                              avatar.fields.geometry_net, avatar.deformer)
    shape = avatar.table.z_shape.detach().numpy().tobytes()
    return digest + ":" + hashlib.sha256(shape).hexdigest()


class TrainingLock:
    """ Exclusive ownership of a checkpoint directory """

    def __init__(self, directory):
        self.path = os.path.join(directory, LOCK_FILE)
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ContractViolationError(
                f"{os.path.dirname(self.path)} is locked by another trainer "
                f"(remove {self.path} if it is stale)")
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, type, value, traceback):
        os.close(self.fd)
        os.remove(self.path)


def read_metrics(directory, stage=None):
    """ Metric records of a checkpoint directory, optionally of one stage """
    path = os.path.join(directory, METRICS_FILE)
    if not os.path.exists(path):
        return []
    with open(path) as fd:
        records = [json.loads(line) for line in fd if line.strip()]
    if stage is not None:
        records = [r for r in records if r["stage"] == stage]
    return records


def _rewrite_metrics(directory, keep):
    path = os.path.join(directory, METRICS_FILE)
    with open(path, "w") as fd:
        for record in keep:
            fd.write(json.dumps(record, sort_keys=True) + "\n")


def _append_metrics(directory, record):
    with open(os.path.join(directory, METRICS_FILE), "a") as fd:
        fd.write(json.dumps(record, sort_keys=True) + "\n")


def _dump_batch(directory, stage, epoch, scans, components):
    path = os.path.join(directory, DUMP_FILE)
    torch.save({"stage": stage, "epoch": epoch,
                "subjects": [scan.subject_id for scan in scans],
                "params": [scan.params.to_dict() for scan in scans],
                "components": components}, path)
    return path


def _start(stage, dataset, config, directory, resume):
    """ (avatar, first epoch, optimizer) of a fresh or resumed stage """
    path = os.path.join(directory, STAGE_FILES[stage])
    resuming = resume and os.path.exists(path)
    if resuming:
        avatar = HeadAvatar.load(directory, stage, config)
    elif stage == 1:
        avatar = HeadAvatar(dataset.model, config, dataset.subject_ids)
    else:
        if not os.path.exists(os.path.join(directory, STAGE_FILES[1])):
            raise UnavailableStateError(
                f"stage 2 needs a stage 1 checkpoint in {directory}")
        avatar = HeadAvatar.load(directory, 1, config)
    if avatar.table.subject_ids != list(dataset.subject_ids):
        raise ContractViolationError(
            "checkpoint subjects do not match the dataset")
    if stage == 2:
        freeze_geometry(avatar)

    networks, latents = stage_parameters(avatar, stage)
    optimizer = torch.optim.Adam([
        {"params": networks, "lr": config.train.lr_network},
        {"params": latents, "lr": config.train.lr_latent},
    ])
    first = 0
    if resuming:
        extra = load_checkpoint(path, {}, {"adam": optimizer})
        first = int(extra["epoch"]) + 1
        logger.info("resuming stage %d at epoch %d", stage, first)
    else:
        _rewrite_metrics(directory, [r for r in read_metrics(directory)
                                     if r["stage"] != stage])
    return avatar, first, optimizer


def train_stage(stage, dataset, config, directory, resume=True):
    """ Train one stage and write its checkpoint in directory

    Every epoch appends a JSON line to metrics.jsonl and rewrites the
    stage checkpoint, so an interrupted run resumes at the next epoch.

    Keyword arguments:
        stage - 1 or 2
        dataset - Dataset with the training scans and their samples
        config - RunConfig
        directory - checkpoint directory, locked while training
        resume - continue from an existing checkpoint of this stage
    Returns a TrainResult
    """
    if stage not in STAGE_FILES:
        raise InvalidArgumentError(f"unknown training stage {stage}")
    config = resolve_ablation(config.validate())
    train = config.train
    os.makedirs(directory, exist_ok=True)
    scans = list(dataset.scans)
    if not scans:
        raise InvalidArgumentError("dataset has no training scans")

    with TrainingLock(directory):
        avatar, first, optimizer = _start(stage, dataset, config, directory,
                                          resume)
        epochs = train.epochs_stage1 if stage == 1 else train.epochs_stage2
        batch_size = train.batch_stage1 if stage == 1 else train.batch_stage2
        frozen = geometry_digest(avatar) if stage == 2 else None

        targets = None
        if stage == 2:
            cameras = camera_rig(config.render.resolution,
                                 config.render.half_extent)
            rng = np.random.default_rng([train.seed, stage, 0])
            targets = [precompute_appearance(avatar, scan, cameras, rng,
                                             train.surface_per_step)
                       for scan in tqdm(scans, desc="precompute",
                                        disable=_quiet())]

        path = os.path.join(directory, STAGE_FILES[stage])
        history = read_metrics(directory, stage)
        for epoch in tqdm(range(first, epochs), desc=f"stage {stage}",
                          disable=_quiet()):
            rng = np.random.default_rng([train.seed, stage, epoch + 1])
            order = rng.permutation(len(scans))
            sums = {}
            steps = 0
            for start in range(0, len(order), batch_size):
                ids = order[start:start + batch_size]
                batch_scans = [scans[i] for i in ids]
                optimizer.zero_grad()
                if stage == 1:
                    batch = occupancy_items(avatar, batch_scans, rng,
                                            train.points_per_step)
                    aux = rng if epoch < train.auxiliary_epochs else None
                    loss, components = loss_stage1(avatar, batch, train, aux)
                else:
                    loss, components = loss_stage2(
                        avatar, [targets[i] for i in ids], train)
                if not torch.isfinite(loss):
                    dump = _dump_batch(directory, stage, epoch, batch_scans,
                                       components)
                    raise NumericFailureError(
                        f"stage {stage} loss is not finite at epoch {epoch}",
                        dump)
                loss.backward()
                optimizer.step()
                steps += 1
                for key, value in components.items():
                    sums[key] = sums.get(key, 0.0) + value

            record = {"stage": stage, "epoch": epoch, "steps": steps,
                      "ablation": train.ablation}
            record.update({key: value / steps for key, value in sums.items()})
            if stage == 1 and epoch == epochs - 1:
                avatar.table.mark_trained()
            avatar.save(directory, stage, {"epoch": epoch},
                        {"adam": optimizer})
            _append_metrics(directory, record)
            history.append(record)
            logger.info("stage %d epoch %d: loss %.6f", stage, epoch,
                        record["total"])

        untrained = stage == 1 and not bool(avatar.table.trained)
        if untrained or not os.path.exists(path):
            if stage == 1:
                avatar.table.mark_trained()
            avatar.save(directory, stage, {"epoch": epochs - 1},
                        {"adam": optimizer})
        if frozen is not None and geometry_digest(avatar) != frozen:
            raise ContractViolationError("stage 2 changed stage 1 parameters")
    return TrainResult(path, history)


def _quiet():
    return not logger.isEnabledFor(logging.INFO)
