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

""" Canonical head fields

Occupancy G, detail normal N and texture T, all evaluated in the
canonical (mouth slightly open) space and conditioned on per-subject
latent codes.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . errors import InvalidArgumentError, UnavailableStateError
from . geometry import DTYPE, as_tensor, to_numpy
from . headmodel import N_POSE, N_PSI
from . neuralnet import FeatureVolume, Mlp

logger = logging.getLogger(__name__)

# The surface is the level set occ = OCC_LEVEL
OCC_LEVEL = 0.5


@dataclass
class LatentTriplet:
    """ Codes of one subject: coarse shape, normal detail and colour """
    z_shape: torch.Tensor
    z_detail: torch.Tensor
    z_color: torch.Tensor
    subject_id: str = ""

    def __post_init__(self):
        for name in ("z_shape", "z_detail", "z_color"):
            value = getattr(self, name)
            if not isinstance(value, torch.Tensor):
                value = as_tensor(value)
            setattr(self, name, value.reshape(-1))

    def check(self):
        for name in ("z_shape", "z_detail", "z_color"):
            if not torch.isfinite(getattr(self, name)).all():
                raise InvalidArgumentError(f"{name} is not finite")
        return self

    def energy(self):
        """ Squared norms of (z_shape, z_detail, z_color) """
        return tuple((z * z).sum() for z in
                     (self.z_shape, self.z_detail, self.z_color))

    def detach(self):
        return LatentTriplet(self.z_shape.detach(), self.z_detail.detach(),
                             self.z_color.detach(), self.subject_id)

    def to_dict(self):
        return {"subject_id": self.subject_id,
                "z_shape": to_numpy(self.z_shape).tolist(),
                "z_detail": to_numpy(self.z_detail).tolist(),
                "z_color": to_numpy(self.z_color).tolist()}

    @classmethod
    def from_dict(cls, values):
        return cls(values["z_shape"], values["z_detail"], values["z_color"],
                   values.get("subject_id", ""))


@dataclass
class CanonicalSample:
    """ Field outputs for a batch of canonical points """
    occ: torch.Tensor
    f_s: torch.Tensor
    normal: torch.Tensor = None
    f_n: torch.Tensor = None
    color: torch.Tensor = None
    # points past the unit box and zero raw normals of this evaluation
    outside_box: int = 0
    normal_fallbacks: int = 0


class CanonicalFields(nn.Module):
    """ Geometry, normal and texture networks

    Keyword arguments:
        config - NetworkConfig
    """

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        self.volume = FeatureVolume(config.n_s, config.grid_resolution,
                                    config.grid_channels,
                                    config.generator_hidden)
        self.geometry_net = Mlp(
            3, tuple(config.geometry_widths) + (config.n_f,), 1,
            cond_dim=config.grid_channels, skip=config.geometry_skip,
            softplus_beta=config.softplus_beta, last_scale=0.01)
        self.normal_net = Mlp(
            3, tuple(config.normal_widths) + (config.n_f,), 3,
            cond_dim=config.n_d + config.n_f,
            softplus_beta=config.softplus_beta)
        self.texture_net = Mlp(
            3, config.texture_widths, 3,
            cond_dim=config.n_c + 2 * config.n_f + N_POSE + N_PSI,
            out_activation="sigmoid", softplus_beta=config.softplus_beta)
        self.register_buffer("ellipsoid_radii", torch.tensor(
            config.ellipsoid_radii, dtype=DTYPE))

    def prior_logit(self, x):
        """ Ellipsoid prior added to the occupancy logit """
        q = ((x / self.ellipsoid_radii) ** 2).sum(-1)
        return self.config.ellipsoid_gain * (1.0 - q)

    def geometry_logit(self, x, z_shape):
        """ Returns (logit [N], f_s [N, n_f]) """
        x = as_tensor(x)
        features = self.volume(z_shape, x)
        out, f_s = self.geometry_net(x, features, return_hidden=True)
        return out[:, 0] + self.prior_logit(x), f_s

    def geometry(self, x, z_shape):
        """ Returns (occ [N] in [0, 1], f_s [N, n_f]) """
        logit, f_s = self.geometry_logit(x, z_shape)
        return torch.sigmoid(logit), f_s

    def occupancy(self, x, z_shape):
        return self.geometry(x, z_shape)[0]

    def occupancy_gradient(self, x, z_shape, create_graph=False):
        """ d occ / d x at points [N, 3] """
        with torch.enable_grad():
            x = as_tensor(x).detach().requires_grad_(True)
            occ = self.occupancy(x, z_shape)
            grad, = torch.autograd.grad(occ.sum(), x,
                                        create_graph=create_graph)
        return grad

    def detail_normal(self, x, z_detail, f_s, z_shape=None):
        """ Returns (unit normal [N, 3], f_n [N, n_f], fallback count)

        A vanishing raw prediction is replaced by the direction of minus
        the occupancy gradient, which needs z_shape.
        """
        x = as_tensor(x)
        condition = torch.cat(
            [z_detail.expand(len(x), -1), f_s], dim=-1)
        raw, f_n = self.normal_net(x, condition, return_hidden=True)
        length = raw.norm(dim=-1, keepdim=True)
        zero = length[:, 0] < 1e-12
        normal = raw / length.clamp_min(1e-12)
        fallbacks = int(zero.sum())
        if fallbacks:
            fallback = torch.zeros_like(normal)
            fallback[:, 2] = 1.0
            if z_shape is not None:
                grad = -self.occupancy_gradient(x[zero], z_shape)
                fallback[zero] = grad / grad.norm(
                    dim=-1, keepdim=True).clamp_min(1e-300)
            normal = torch.where(zero[:, None], fallback, normal)
        return normal, f_n, fallbacks

    def texture(self, x, z_color, f_s, f_n, theta, psi):
        """ RGB [N, 3] in [0, 1]; global rotation is dropped from theta """
        x = as_tensor(x)
        theta = as_tensor(theta).reshape(-1)
        psi = as_tensor(psi).reshape(-1)
        pose = torch.cat([torch.zeros(3, dtype=DTYPE), theta[3:]])
        n = len(x)
        condition = torch.cat([z_color.expand(n, -1), f_s, f_n,
                               pose.expand(n, -1), psi.expand(n, -1)],
                              dim=-1)
        return self.texture_net(x, condition)

    def evaluate(self, x, latents, theta=None, psi=None, normals=True,
                 colors=True):
        """ Full CanonicalSample at canonical points [N, 3] """
        x = as_tensor(x)
        occ, f_s = self.geometry(x, latents.z_shape)
        sample = CanonicalSample(occ, f_s)
        sample.outside_box = int((x.detach().abs() > 1.0).any(-1).sum())
        if normals or colors:
            sample.normal, sample.f_n, sample.normal_fallbacks = \
                self.detail_normal(x, latents.z_detail, f_s, latents.z_shape)
        if sample.outside_box or sample.normal_fallbacks:
            logger.debug("%d points outside the box, %d normal fallbacks",
                         sample.outside_box, sample.normal_fallbacks)
        if colors:
            theta = torch.zeros(N_POSE, dtype=DTYPE) if theta is None \
                else theta
            psi = torch.zeros(N_PSI, dtype=DTYPE) if psi is None else psi
            sample.color = self.texture(x, latents.z_color, f_s, sample.f_n,
                                        theta, psi)
        return sample

    def shape_parameters(self):
        return list(self.volume.parameters()) \
            + list(self.geometry_net.parameters())

    def appearance_parameters(self):
        return list(self.normal_net.parameters()) \
            + list(self.texture_net.parameters())


class LatentTable(nn.Module):
    """ Auto-decoder code table, one LatentTriplet per training subject """

    def __init__(self, subject_ids, n_s, n_d, n_c, init_std=0.01, seed=0):
        super().__init__()
        self.subject_ids = list(subject_ids)
        generator = torch.Generator().manual_seed(seed)
        n = len(self.subject_ids)

        def table(dim):
            return nn.Parameter(init_std * torch.randn(
                n, dim, generator=generator, dtype=DTYPE))

        self.z_shape = table(n_s)
        self.z_detail = table(n_d)
        self.z_color = table(n_c)
        self.register_buffer("trained", torch.tensor(False))

    def __len__(self):
        return len(self.subject_ids)

    def index(self, subject_id):
        try:
            return self.subject_ids.index(subject_id)
        except ValueError:
            raise InvalidArgumentError(f"unknown subject {subject_id}")

    def get(self, i):
        """ Triplet of row i, attached to the table parameters """
        if isinstance(i, str):
            i = self.index(i)
        return LatentTriplet(self.z_shape[i], self.z_detail[i],
                             self.z_color[i], self.subject_ids[i])

    def mean(self):
        return LatentTriplet(self.z_shape.detach().mean(0),
                             self.z_detail.detach().mean(0),
                             self.z_color.detach().mean(0), "mean")

    def mark_trained(self):
        self.trained.fill_(True)


def sample_latents(table, rng):
    """ Draw a triplet from a diagonal Gaussian fitted to the table """
    if table is None or len(table) == 0 or not bool(table.trained):
        raise UnavailableStateError("latent table has not been trained")
    codes = []
    for values in (table.z_shape, table.z_detail, table.z_color):
        values = to_numpy(values)
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        codes.append(mean + std * rng.normal(size=mean.shape))
    return LatentTriplet(*codes, subject_id="sampled")


def interpolate_latents(a, b, t):
    """ Componentwise (1 - t) a + t b for t in [0, 1] """
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError(f"interpolation weight {t} not in [0, 1]")
    if a.z_shape.shape != b.z_shape.shape \
            or a.z_detail.shape != b.z_detail.shape \
            or a.z_color.shape != b.z_color.shape:
        raise InvalidArgumentError("latent dimensions differ")
    if t == 0.0:
        return LatentTriplet(a.z_shape, a.z_detail, a.z_color, a.subject_id)
    if t == 1.0:
        return LatentTriplet(b.z_shape, b.z_detail, b.z_color, b.subject_id)
    return LatentTriplet((1 - t) * a.z_shape + t * b.z_shape,
                         (1 - t) * a.z_detail + t * b.z_detail,
                         (1 - t) * a.z_color + t * b.z_color,
                         f"{a.subject_id}:{b.subject_id}@{t:g}")


def grid_iou(field_a, field_b, resolution=32, half_extent=0.6):
    """ Intersection over union of two occupancy evaluators on a grid """
    axis = np.linspace(-half_extent, half_extent, resolution)
    points = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"),
                      -1).reshape(-1, 3)
    inside_a = np.asarray(field_a(points)) >= OCC_LEVEL
    inside_b = np.asarray(field_b(points)) >= OCC_LEVEL
    union = (inside_a | inside_b).sum()
    if union == 0:
        return 1.0
    return float((inside_a & inside_b).sum() / union)
