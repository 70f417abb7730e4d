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

""" Learned deformation from canonical to posed space

A shape removal network D maps a subject's canonical point to a shape
neutral one, a bases network C predicts expression bases, pose correctives
and skinning weights there, and the point is then offset and skinned.
Deformed queries are pulled back to canonical space by Broyden iterations
started once per bone.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . canonical import CanonicalSample
from . errors import InvalidArgumentError
from . geometry import DTYPE, as_tensor
from . headmodel import (N_JOINTS, N_POSE_BASIS, N_PSI, ComponentLookup,
                         DeformBundle, HeadParams, canonical_theta, joints,
                         lbs_deform, pose_feature, rigid_transforms)
from . neuralnet import Mlp

logger = logging.getLogger(__name__)

__all__ = ["DeformBundle", "CorrespondenceResult", "Deformer",
           "ShapeRemoval", "BasesNet", "deformed_field_eval"]

_N_E = 3 * N_PSI
_N_P = N_POSE_BASIS * 3


class ShapeRemoval(nn.Module):
    """ Residual map x + D(x, beta) to shape neutral canonical space """

    def __init__(self, n_beta, widths=(64, 64), init_scale=1e-3,
                 softplus_beta=100.0):
        super().__init__()
        self.net = Mlp(3, widths, 3, cond_dim=n_beta,
                       softplus_beta=softplus_beta, last_scale=init_scale)

    def forward(self, x, beta):
        return x + self.net(x, as_tensor(beta).reshape(-1))


class BasesNet(nn.Module):
    """ Continuous expression bases, pose correctives and skinning weights
    """

    def __init__(self, widths=(128, 128, 128), softplus_beta=100.0):
        super().__init__()
        self.net = Mlp(3, widths, _N_E + _N_P + N_JOINTS,
                       softplus_beta=softplus_beta, last_scale=0.01)

    def forward(self, x):
        out = self.net(x)
        n = len(x)
        expression = out[:, :_N_E].reshape(n, 3, N_PSI)
        pose = out[:, _N_E:_N_E + _N_P].reshape(n, N_POSE_BASIS, 3)
        weights = torch.softmax(out[:, _N_E + _N_P:], dim=-1)
        return DeformBundle(expression, pose, weights)


@dataclass
class CorrespondenceResult:
    """ Canonical roots of a batch of deformed points

    x_c rows are NaN where no candidate converged.
    """
    x_c: torch.Tensor
    valid: torch.Tensor
    iterations: torch.Tensor
    residual: torch.Tensor
    candidate_count: torch.Tensor

    def __len__(self):
        return len(self.valid)

    def point(self, i):
        """ (x_c or None, iterations, residual, candidate_count) of point i
        """
        x_c = self.x_c[i] if bool(self.valid[i]) else None
        return (x_c, int(self.iterations[i]), float(self.residual[i]),
                int(self.candidate_count[i]))


class Deformer(nn.Module):
    """ Forward deformation and its inverse

    Keyword arguments:
        model - TemplateModel supplying joints and ground truth bases
        config - DeformConfig
        softplus_beta - activation sharpness of both networks
    """

    def __init__(self, model, config, softplus_beta=100.0):
        super().__init__()
        config.validate()
        self.model = model
        self.config = config
        self.mode = config.mode
        self.shape_net = ShapeRemoval(model.n_beta, config.shape_widths,
                                      config.residual_init_scale,
                                      softplus_beta)
        self.bases_net = BasesNet(config.bases_widths, softplus_beta)
        self.canonical_theta = canonical_theta(config.canonical_jaw)
        self._lookups = {}

    def canonical_params(self, beta):
        return HeadParams.canonical(self.model.n_beta,
                                    self.config.canonical_jaw, beta)

    def lookup(self, beta):
        """ Ground truth component lookup on the canonical template of beta
        """
        beta = as_tensor(beta).detach()
        key = beta.numpy().tobytes()
        if key not in self._lookups:
            if len(self._lookups) > 64:
                self._lookups.clear()
            self._lookups[key] = ComponentLookup(
                self.model, self.canonical_params(beta))
        return self._lookups[key]

    def remove_shape(self, x_c, beta):
        return self.shape_net(as_tensor(x_c), beta)

    def continuous_bases(self, x_neutral):
        return self.bases_net(as_tensor(x_neutral))

    def bundle_at(self, x_c, beta):
        """ DeformBundle used by the active mode at canonical points """
        if self.mode == "f_def":
            return self.lookup(beta)(x_c.detach())[0]
        return self.continuous_bases(self.remove_shape(x_c, beta))

    def coefficients(self, params):
        """ Pose-corrective coefficients relative to the canonical pose """
        return pose_feature(params.theta) - pose_feature(self.canonical_theta)

    def deform_points(self, x_c, params, bundle=None):
        """ Canonical points [N, 3] to deformed space under params """
        x_c = as_tensor(x_c)
        params.check(self.model)
        if bundle is None:
            bundle = self.bundle_at(x_c, params.beta)
        x_p = x_c
        if self.mode != "head_fs":
            x_p = x_c + bundle.offsets(self.coefficients(params), params.psi)
        return lbs_deform(x_p, bundle.W, joints(self.model, params.beta),
                          params.theta, reference_theta=self.canonical_theta)

    def bone_transforms(self, params):
        """ Per-bone transforms from canonical to params [5, 4, 4] """
        locations = joints(self.model, params.beta)
        return rigid_transforms(params.theta, locations) @ torch.linalg.inv(
            rigid_transforms(self.canonical_theta, locations))

    def jacobian(self, x_c, params):
        """ Exact d deform / d x_c per point [N, 3, 3] """
        with torch.enable_grad():
            x = as_tensor(x_c).detach().requires_grad_(True)
            out = self.deform_points(x, params)
            rows = []
            for k in range(3):
                grad, = torch.autograd.grad(out[:, k].sum(), x,
                                            retain_graph=k < 2)
                rows.append(grad)
        return torch.stack(rows, dim=1)

    def canonical_correspondence(self, x_d, params, occupancy=None):
        """ Solve deform_points(x_c) = x_d for every row of x_d

        Keyword arguments:
            x_d - deformed points [N, 3]
            params - HeadParams of the deformed space
            occupancy - canonical occupancy evaluator, required by the
                max_occupancy root selection
        """
        x_d = as_tensor(x_d).detach().reshape(-1, 3)
        if self.config.root_selection == "max_occupancy" and occupancy is None:
            raise InvalidArgumentError(
                "max_occupancy selection needs an occupancy evaluator")
        chunks = []
        with torch.no_grad():
            transforms = torch.linalg.inv(self.bone_transforms(params))
            for start in range(0, len(x_d), self.config.chunk_size):
                chunks.append(self._correspond(
                    x_d[start:start + self.config.chunk_size], params,
                    transforms, occupancy))
        if not chunks:
            empty = torch.zeros(0, dtype=torch.long)
            return CorrespondenceResult(torch.zeros(0, 3, dtype=DTYPE),
                                        empty.bool(), empty,
                                        torch.zeros(0, dtype=DTYPE), empty)
        return CorrespondenceResult(*[torch.cat(parts) for parts in
                                      zip(*[(c.x_c, c.valid, c.iterations,
                                             c.residual, c.candidate_count)
                                            for c in chunks])])

    def _correspond(self, x_d, params, inverse, occupancy):
        n = len(x_d)
        # one start per bone: x_d carried back rigidly by that bone
        starts = (inverse[None, :, :3, :3] @ x_d[:, None, :, None])[..., 0] \
            + inverse[None, :, :3, 3]
        target = x_d[:, None].expand(n, N_JOINTS, 3).reshape(-1, 3)

        def residual(x, mask):
            return self.deform_points(x, params) - target[mask]

        roots, norms, iterations = self._broyden(
            residual, starts.reshape(-1, 3))
        roots = roots.reshape(n, N_JOINTS, 3)
        norms = norms.reshape(n, N_JOINTS)
        iterations = iterations.reshape(n, N_JOINTS)
        converged = norms <= self.config.tolerance
        count = converged.sum(1)
        valid = count > 0

        if self.config.root_selection == "max_occupancy" and valid.any():
            occ = occupancy(roots.reshape(-1, 3)).reshape(n, N_JOINTS)
            score = torch.where(converged, -occ.to(DTYPE),
                                torch.full_like(norms, np.inf))
        else:
            score = torch.where(converged, norms,
                                torch.full_like(norms, np.inf))
        # first minimum wins: ties go to the lowest bone index
        best = torch.argmin(score, dim=1)
        rows = torch.arange(n)
        x_c = roots[rows, best]
        x_c = torch.where(valid[:, None], x_c,
                          torch.full_like(x_c, float("nan")))
        residual_best = torch.where(valid, norms[rows, best],
                                    norms.min(1).values)
        return CorrespondenceResult(x_c, valid, iterations[rows, best],
                                    residual_best, count)

    def _broyden(self, g, x_init):
        """ Batched Broyden root finding with identity initial inverse
        Jacobian; g(x, mask) evaluates the rows selected by mask.
        Returns (best x, best residual norm, iterations)
        """
        tol = self.config.tolerance
        n = len(x_init)
        x = x_init.clone()
        everything = torch.ones(n, dtype=torch.bool)
        gx = g(x, everything)
        norm = gx.norm(dim=-1)
        x_best = x.clone()
        norm_best = norm.clone()
        iterations = torch.zeros(n, dtype=torch.long)
        j_inv = torch.eye(3, dtype=DTYPE).repeat(n, 1, 1)
        active = (norm_best > tol) & (norm < self.config.divergence)
        for _ in range(self.config.max_iter):
            if not active.any():
                break
            update = -(j_inv[active] @ gx[active][:, :, None])[:, :, 0]
            x[active] = x[active] + update
            g_new = g(x[active], active)
            delta_g = g_new - gx[active]
            gx[active] = g_new
            iterations[active] += 1
            norm[active] = g_new.norm(dim=-1)

            improved = norm < norm_best
            x_best[improved] = x[improved]
            norm_best[improved] = norm[improved]

            # good Broyden update of the inverse Jacobian
            j = j_inv[active]
            v = update[:, None, :] @ j
            a = update - (j @ delta_g[:, :, None])[:, :, 0]
            b = (v @ delta_g[:, :, None])[:, 0, 0]
            b = torch.where(b >= 0, b + 1e-12, b - 1e-12)
            j_inv[active] = j + (a / b[:, None])[:, :, None] @ v
            active = (norm_best > tol) & (norm < self.config.divergence)
        return x_best, norm_best, iterations

    def reattach(self, x_c, x_d, params):
        """ Roots with first order gradients w.r.t. networks and params

        x_c - J^-1 (deform(x_c) - x_d) evaluated at the converged root,
        where the bracket is zero in value but not in derivative.
        """
        x_c = x_c.detach()
        jac = self.jacobian(x_c, params)
        moved = self.deform_points(x_c, params)
        delta = moved - moved.detach()
        x_d = as_tensor(x_d)
        if x_d.requires_grad:
            delta = delta - (x_d - x_d.detach())
        correction = torch.linalg.solve(jac, delta[:, :, None])[:, :, 0]
        return x_c - correction

    def deformed_normals(self, x_c, normals, params):
        """ Canonical normals carried to deformed space, J^-T n """
        jac = self.jacobian(x_c, params).detach()
        mapped = torch.linalg.solve(jac.transpose(1, 2), normals[:, :, None])
        mapped = mapped[:, :, 0]
        return mapped / mapped.norm(dim=-1, keepdim=True).clamp_min(1e-300)

    def network_parameters(self):
        return list(self.shape_net.parameters()) \
            + list(self.bases_net.parameters())


def deformed_field_eval(deformer, fields, x_d, latents, params,
                        normals=True, colors=True, attach=False,
                        correspondence=None):
    """ Canonical fields evaluated at the roots of deformed points

    Points without a converged root read as empty space: occ 0, zero
    normal and colour. Returns (CanonicalSample, CorrespondenceResult);
    normals stay in canonical space.

    Keyword arguments:
        attach - re-attach roots so gradients reach the deformation
        correspondence - reuse a precomputed CorrespondenceResult
    """
    x_d = as_tensor(x_d).reshape(-1, 3)
    if correspondence is None:
        def occupancy(x):
            with torch.no_grad():
                return fields.occupancy(x, latents.z_shape.detach())

        correspondence = deformer.canonical_correspondence(
            x_d, params, occupancy)
    valid = correspondence.valid
    index = torch.nonzero(valid)[:, 0]
    n = len(x_d)
    occ = torch.zeros(n, dtype=DTYPE)
    sample = CanonicalSample(occ, torch.zeros(n, fields.config.n_f,
                                              dtype=DTYPE))
    if len(index) == 0:
        if normals or colors:
            sample.normal = torch.zeros(n, 3, dtype=DTYPE)
            sample.f_n = torch.zeros(n, fields.config.n_f, dtype=DTYPE)
        if colors:
            sample.color = torch.zeros(n, 3, dtype=DTYPE)
        return sample, correspondence

    x_c = correspondence.x_c[index]
    if attach:
        x_c = deformer.reattach(x_c, x_d[index], params)
    inner = fields.evaluate(x_c, latents, params.theta, params.psi,
                            normals=normals, colors=colors)

    def scatter(values, width=None):
        shape = (n,) if width is None else (n, width)
        full = torch.zeros(shape, dtype=values.dtype)
        return full.index_put((index,), values)

    sample.occ = scatter(inner.occ)
    sample.outside_box = inner.outside_box
    sample.normal_fallbacks = inner.normal_fallbacks
    sample.f_s = scatter(inner.f_s, inner.f_s.shape[1])
    if inner.normal is not None:
        sample.normal = scatter(inner.normal, 3)
        sample.f_n = scatter(inner.f_n, inner.f_n.shape[1])
    if inner.color is not None:
        sample.color = scatter(inner.color, 3)
    return sample, correspondence
