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

""" Trained head avatar: template model, canonical fields, deformation and
latent table bundled together, with mesh extraction helpers
"""

import json
import logging
import os

import numpy as np
import torch

from . canonical import CanonicalFields, LatentTable
from . config import RunConfig
from . deform import Deformer, deformed_field_eval
from . errors import InvalidArgumentError, UnavailableStateError
from . geometry import as_tensor, to_numpy
from . geomio import marching_cubes
from . headmodel import (JOINT_NAMES, load_template_model, posed_vertices,
                         save_template_model)
from . mesh import Mesh
from . neuralnet import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

MODEL_FILE = "model.npz"
STAGE_FILES = {1: "stage1.pt", 2: "stage2.pt"}

# Colour of each joint in skinning weight renders
JOINT_PALETTE = np.array([
    [0.85, 0.85, 0.85],
    [0.20, 0.45, 0.85],
    [0.90, 0.30, 0.25],
    [0.25, 0.75, 0.35],
    [0.95, 0.75, 0.20],
])


class HeadAvatar:
    """ Everything needed to evaluate, deform and extract heads

    Keyword arguments:
        model - TemplateModel
        config - RunConfig
        subject_ids - rows of the latent table, empty for none
    """

    def __init__(self, model, config, subject_ids=()):
        self.model = model
        self.config = config
        torch.manual_seed(config.network.seed)
        self.fields = CanonicalFields(config.network)
        self.deformer = Deformer(model, config.deform,
                                 config.network.softplus_beta)
        self.table = LatentTable(
            subject_ids, config.network.n_s, config.network.n_d,
            config.network.n_c, config.train.latent_init_std,
            config.train.seed)

    @property
    def half_extent(self):
        return self.config.render.half_extent

    @property
    def bbox(self):
        h = self.half_extent
        return np.array([[-h, -h, -h], [h, h, h]])

    @property
    def chunk(self):
        return self.config.deform.chunk_size

    def modules(self):
        return {"fields": self.fields, "deformer": self.deformer,
                "table": self.table}

    def canonical_params(self, beta):
        return self.deformer.canonical_params(beta)

    def latents(self, subject):
        """ Detached triplet of a table row (index or subject id) """
        return self.table.get(subject).detach()

    def canonical_occupancy(self, latents):
        """ numpy occupancy evaluator in canonical space """
        def evaluate(points):
            with torch.no_grad():
                return to_numpy(self.fields.occupancy(
                    as_tensor(points), latents.z_shape))
        return _chunked(evaluate, self.chunk)

    def deformed_occupancy(self, latents, params):
        """ numpy occupancy evaluator in the space deformed by params """
        def evaluate(points):
            with torch.no_grad():
                sample, _ = deformed_field_eval(
                    self.deformer, self.fields, as_tensor(points), latents,
                    params, normals=False, colors=False)
            return to_numpy(sample.occ)
        return _chunked(evaluate, self.chunk)

    def canonical_colors(self, latents, points, params=None):
        """ Texture and normals at canonical points """
        theta = None if params is None else params.theta
        psi = None if params is None else params.psi
        colors, normals = [], []
        with torch.no_grad():
            for start in range(0, len(points), self.chunk):
                x = as_tensor(points[start:start + self.chunk])
                sample = self.fields.evaluate(x, latents, theta, psi)
                colors.append(to_numpy(sample.color))
                normals.append(to_numpy(sample.normal))
        if not colors:
            return np.zeros((0, 3)), np.zeros((0, 3))
        return np.concatenate(colors), np.concatenate(normals)

    def extract_canonical(self, latents, resolution=None, beta=None):
        """ Coloured canonical mesh of a latent triplet """
        resolution = resolution or self.config.fit.eval_resolution
        mesh = marching_cubes(self.canonical_occupancy(latents), self.bbox,
                              resolution)
        if mesh.is_empty:
            return mesh
        params = self.canonical_params(beta)
        colors, _ = self.canonical_colors(latents, mesh.vertices, params)
        return Mesh(mesh.vertices, mesh.faces, colors)

    def deform_vertices(self, vertices, params):
        out = []
        with torch.no_grad():
            for start in range(0, len(vertices), self.chunk):
                out.append(to_numpy(self.deformer.deform_points(
                    as_tensor(vertices[start:start + self.chunk]), params)))
        return np.concatenate(out) if out else np.zeros((0, 3))

    def extract_deformed(self, latents, params, resolution=None,
                         method=None):
        """ Coloured mesh of the avatar under params

        forward: canonical extraction whose vertices are deformed.
        field: marching cubes on the deformed occupancy field.
        """
        resolution = resolution or self.config.fit.eval_resolution
        method = method or self.config.fit.extraction
        if method == "forward":
            canonical = marching_cubes(self.canonical_occupancy(latents),
                                       self.bbox, resolution)
            if canonical.is_empty:
                return canonical
            colors, _ = self.canonical_colors(latents, canonical.vertices,
                                              params)
            return Mesh(self.deform_vertices(canonical.vertices, params),
                        canonical.faces, colors)
        if method != "field":
            raise InvalidArgumentError(f"unknown extraction {method}")
        mesh = marching_cubes(self.deformed_occupancy(latents, params),
                              self.bbox, resolution)
        if mesh.is_empty:
            return mesh
        colors = np.zeros((len(mesh.vertices), 3))
        with torch.no_grad():
            for start in range(0, len(mesh.vertices), self.chunk):
                sample, _ = deformed_field_eval(
                    self.deformer, self.fields,
                    as_tensor(mesh.vertices[start:start + self.chunk]),
                    latents, params, normals=True, colors=True)
                colors[start:start + self.chunk] = to_numpy(sample.color)
        return Mesh(mesh.vertices, mesh.faces, colors)

    def weight_colors(self, vertices, beta):
        """ Argmax-joint palette colour of the learned skinning weights """
        with torch.no_grad():
            bundle = self.deformer.bundle_at(as_tensor(vertices),
                                             as_tensor(beta))
        return JOINT_PALETTE[np.argmax(to_numpy(bundle.W), axis=1)]

    def lip_points(self, beta):
        """ Lip landmark proxies on the canonical template of beta """
        canonical = posed_vertices(self.model, self.canonical_params(beta))
        return canonical[torch.as_tensor(self.model.lip_landmarks)]

    def lip_gap(self, params):
        """ Distance between the deformed upper and lower lip proxies """
        with torch.no_grad():
            lips = self.deformer.deform_points(
                self.lip_points(params.beta), params)
        return float((lips[0] - lips[1]).norm())

    def render_field(self, latents, params):
        return AvatarRenderField(self, latents, params)

    def save(self, directory, stage, extra=None, optimizers=None):
        """ Write the stage checkpoint, template model and config """
        os.makedirs(directory, exist_ok=True)
        save_template_model(self.model, os.path.join(directory, MODEL_FILE))
        self.config.write_snapshot(directory)
        payload = dict(extra or {})
        payload["subject_ids"] = list(self.table.subject_ids)
        payload["stage"] = stage
        path = os.path.join(directory, STAGE_FILES[stage])
        save_checkpoint(path, self.modules(), optimizers, payload)
        with open(os.path.join(directory, "latents.json"), "w") as fd:
            json.dump([self.table.get(i).detach().to_dict()
                       for i in range(len(self.table))], fd, indent=1)
        return path

    @classmethod
    def load(cls, directory, stage=None, config=None):
        """ Latest (or the given) stage checkpoint of a directory """
        if stage is None:
            stage = 2 if os.path.exists(
                os.path.join(directory, STAGE_FILES[2])) else 1
        path = os.path.join(directory, STAGE_FILES[stage])
        if not os.path.exists(path):
            raise UnavailableStateError(
                f"no stage {stage} checkpoint in {directory}")
        if config is None:
            with open(os.path.join(directory, "config.json")) as fd:
                config = RunConfig.from_snapshot(json.load(fd))
        model = load_template_model(os.path.join(directory, MODEL_FILE))
        payload = torch.load(path, map_location="cpu", weights_only=True)
        avatar = cls(model, config, payload["extra"]["subject_ids"])
        load_checkpoint(path, avatar.modules())
        logger.info("loaded stage %d avatar from %s (%d subjects)", stage,
                    directory, len(avatar.table))
        return avatar


class AvatarRenderField:
    """ Render adapter: occupancy and shading in deformed space

    Normals leave the normal network in canonical space and are carried
    to deformed space by the inverse transpose deformation Jacobian.
    """

    def __init__(self, avatar, latents, params):
        self.avatar = avatar
        self.latents = latents
        self.params = params
        self.occupancy = avatar.deformed_occupancy(latents, params)

    def shade(self, points):
        avatar = self.avatar
        n = len(points)
        rgb = np.zeros((n, 3))
        normal = np.zeros((n, 3))
        canonical = np.full((n, 3), np.nan)
        with torch.no_grad():
            for start in range(0, n, avatar.chunk):
                x_d = as_tensor(points[start:start + avatar.chunk])
                sample, result = deformed_field_eval(
                    avatar.deformer, avatar.fields, x_d, self.latents,
                    self.params)
                stop = start + len(x_d)
                rgb[start:stop] = to_numpy(sample.color)
                valid = to_numpy(result.valid).astype(bool)
                if valid.any():
                    index = torch.nonzero(result.valid)[:, 0]
                    mapped = avatar.deformer.deformed_normals(
                        result.x_c[index], sample.normal[index], self.params)
                    block = np.zeros((len(x_d), 3))
                    block[valid] = to_numpy(mapped)
                    normal[start:stop] = block
                canonical[start:stop] = to_numpy(result.x_c)
        return rgb, normal, canonical


def _chunked(evaluate, chunk):
    def run(points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(points))
        for start in range(0, len(points), chunk):
            out[start:start + chunk] = evaluate(points[start:start + chunk])
        return out
    return run


def joint_legend():
    """ Joint name to palette colour """
    return {name: JOINT_PALETTE[j].tolist()
            for j, name in enumerate(JOINT_NAMES)}
