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

""" Compact parametric head model

A low-poly stand-in for the FLAME head: template, shape / expression /
pose-corrective blendshapes, a five joint kinematic chain and standard
linear blend skinning. It supervises the learned deformation and produces
the synthetic training scans.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import trimesh

from . errors import (ContractViolationError, InvalidArgumentError,
                      check_shape)
from . geometry import (DTYPE, ClosestPointQuery, as_tensor, interpolate_rows,
                        rodrigues, to_numpy)
from . mesh import Mesh, Scan

logger = logging.getLogger(__name__)

FORMAT_VERSION = "headfield-template/1"

JOINT_NAMES = ("global", "neck", "jaw", "left_eye", "right_eye")
PARENTS = (-1, 0, 1, 1, 1)
N_JOINTS = 5
N_POSE = 3 * N_JOINTS
N_POSE_BASIS = 9 * (N_JOINTS - 1)
N_PSI = 50
JAW = 2

# Skinning weights under this value are snapped to zero
_WEIGHT_FLOOR = 1e-3
# Mouth line height of the template
_MOUTH_Y = -0.12


@dataclass(frozen=True)
class TemplateModel:
    """ Template mesh with its blendshapes, skinning weights and joints """
    template_vertices: torch.Tensor
    faces: np.ndarray
    shape_bases: torch.Tensor
    expression_bases: torch.Tensor
    pose_bases: torch.Tensor
    lbs_weights: torch.Tensor
    joint_regressor: torch.Tensor
    face_region: np.ndarray
    lip_landmarks: np.ndarray
    seed: int = 0

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_beta(self):
        return self.shape_bases.shape[2]

    def validate(self):
        """ Raise ContractViolationError when an invariant is broken """
        v = self.n_vertices
        shapes = {
            "template_vertices": (self.template_vertices, (v, 3)),
            "shape_bases": (self.shape_bases, (v, 3, self.n_beta)),
            "expression_bases": (self.expression_bases, (v, 3, N_PSI)),
            "pose_bases": (self.pose_bases, (v, 3, N_POSE_BASIS)),
            "lbs_weights": (self.lbs_weights, (v, N_JOINTS)),
            "joint_regressor": (self.joint_regressor, (N_JOINTS, v)),
        }
        for name, (array, shape) in shapes.items():
            if tuple(array.shape) != shape:
                raise ContractViolationError(
                    f"{name}: expected {shape}, got {tuple(array.shape)}")
        if self.faces.min() < 0 or self.faces.max() >= v:
            raise ContractViolationError("face index out of range")
        weights = self.lbs_weights
        if (weights < 0).any():
            raise ContractViolationError("negative skinning weight")
        if ((weights.sum(1) - 1).abs() > 1e-6).any():
            raise ContractViolationError("skinning weights must sum to 1")
        if ((self.joint_regressor.sum(1) - 1).abs() > 1e-6).any():
            raise ContractViolationError("joint regressor rows must sum to 1")
        return self

    def mesh(self, vertices=None):
        """ Mesh sharing the template topology """
        vertices = self.template_vertices if vertices is None else vertices
        return Mesh(to_numpy(vertices), self.faces)


@dataclass
class HeadParams:
    """ Shape beta, axis-angle pose theta [15] and expression psi [50] """
    beta: torch.Tensor
    theta: torch.Tensor
    psi: torch.Tensor

    def __post_init__(self):
        self.beta = as_tensor(self.beta).reshape(-1)
        self.theta = as_tensor(self.theta).reshape(-1)
        self.psi = as_tensor(self.psi).reshape(-1)
        if self.theta.shape[0] != N_POSE:
            raise InvalidArgumentError(f"theta must have {N_POSE} entries")
        if self.psi.shape[0] != N_PSI:
            raise InvalidArgumentError(f"psi must have {N_PSI} entries")

    @classmethod
    def zeros(cls, n_beta):
        return cls(torch.zeros(n_beta, dtype=DTYPE),
                   torch.zeros(N_POSE, dtype=DTYPE),
                   torch.zeros(N_PSI, dtype=DTYPE))

    @classmethod
    def canonical(cls, n_beta, jaw=0.1, beta=None):
        """ Canonical convention: mouth slightly open, everything else 0 """
        params = cls.zeros(n_beta)
        if beta is not None:
            params.beta = as_tensor(beta).reshape(-1)
        params.theta = canonical_theta(jaw)
        return params

    def check(self, model):
        if self.beta.shape[0] != model.n_beta:
            raise InvalidArgumentError(
                f"beta has {self.beta.shape[0]} entries, model expects "
                f"{model.n_beta}")
        return self

    def with_pose(self, theta=None, psi=None):
        return HeadParams(self.beta,
                          self.theta if theta is None else theta,
                          self.psi if psi is None else psi)

    def to_dict(self):
        return {"beta": to_numpy(self.beta).tolist(),
                "theta": to_numpy(self.theta).tolist(),
                "psi": to_numpy(self.psi).tolist()}

    @classmethod
    def from_dict(cls, values):
        return cls(values["beta"], values["theta"], values["psi"])


def canonical_theta(jaw=0.1):
    """ Pose vector of the canonical space: jaw opened around x """
    theta = torch.zeros(N_POSE, dtype=DTYPE)
    theta[3 * JAW] = jaw
    return theta


def pose_feature(theta):
    """ Flattened (R(theta_j) - I) of the four non-global joints [..., 36] """
    theta = as_tensor(theta)
    rot = rodrigues(theta.reshape(theta.shape[:-1] + (N_JOINTS, 3)))
    eye = torch.eye(3, dtype=rot.dtype)
    return (rot[..., 1:, :, :] - eye).reshape(theta.shape[:-1] + (36,))


def shaped_vertices(model, beta):
    """ Template plus shape blendshapes """
    beta = as_tensor(beta)
    if beta.shape[-1] != model.n_beta:
        raise InvalidArgumentError("beta dimension does not match model")
    return model.template_vertices + torch.einsum(
        "vkl,l->vk", model.shape_bases, beta)


def joints(model, beta):
    """ Joint locations J(beta) regressed from the shaped template """
    return model.joint_regressor @ shaped_vertices(model, beta)


def blend_shape(model, params):
    """ T + B_S(beta) + B_P(theta) + B_E(psi) """
    params.check(model)
    offsets = torch.einsum("vkl,l->vk", model.pose_bases,
                           pose_feature(params.theta))
    offsets = offsets + torch.einsum("vkl,l->vk", model.expression_bases,
                                     params.psi)
    return shaped_vertices(model, params.beta) + offsets


def rigid_transforms(theta, joint_locations):
    """ World transforms of every bone relative to its rest pose [5, 4, 4]

    A point x attached rigidly to bone j moves to A_j [x, 1].
    """
    theta = as_tensor(theta)
    joint_locations = as_tensor(joint_locations)
    rot = rodrigues(theta.reshape(N_JOINTS, 3))
    parents = torch.tensor(PARENTS[1:])
    offsets = torch.cat([joint_locations[:1],
                         joint_locations[1:] - joint_locations[parents]])
    bottom = torch.tensor([[[0.0, 0.0, 0.0, 1.0]]], dtype=DTYPE).expand(
        N_JOINTS, 1, 4)
    local = torch.cat([torch.cat([rot, offsets[:, :, None]], dim=2), bottom],
                      dim=1)
    chain = [local[0]]
    for j in range(1, N_JOINTS):
        chain.append(chain[PARENTS[j]] @ local[j])
    world = torch.stack(chain)
    # remove the rest location of each joint
    rest = world[:, :3, :3] @ joint_locations[:, :, None]
    correction = torch.cat([torch.zeros(N_JOINTS, 3, 3, dtype=DTYPE), rest],
                           dim=2)
    correction = torch.cat([correction, torch.zeros(N_JOINTS, 1, 4,
                                                    dtype=DTYPE)], dim=1)
    return world - correction


def lbs_deform(points, weights, joint_locations, theta, reference_theta=None):
    """ Linear blend skinning of points [N, 3] with weights [N, 5]

    With reference_theta the transforms are taken relative to that pose,
    so points posed at reference_theta are mapped to theta.
    """
    points = as_tensor(points)
    weights = as_tensor(weights)
    check_shape("points", points, (None, 3))
    check_shape("weights", weights, (points.shape[0], N_JOINTS))
    if ((weights.sum(-1) - 1).abs() > 1e-6).any():
        raise ContractViolationError("skinning weight rows must sum to 1")
    transforms = rigid_transforms(theta, joint_locations)
    if reference_theta is not None:
        transforms = transforms @ torch.linalg.inv(
            rigid_transforms(reference_theta, joint_locations))
    blended = torch.einsum("nj,jab->nab", weights, transforms)
    return (blended[:, :3, :3] @ points[:, :, None])[:, :, 0] \
        + blended[:, :3, 3]


def posed_vertices(model, params):
    """ Vertices of M(beta, theta, psi) """
    return lbs_deform(blend_shape(model, params), model.lbs_weights,
                      joints(model, params.beta), params.theta)


def flame_forward(model, params):
    """ Posed head mesh, same topology as the template """
    return model.mesh(posed_vertices(model, params))


class ComponentLookup:
    """ Template components transferred to arbitrary points

    Each query point takes the barycentric blend of the W, P and E rows at
    its nearest point on the surface posed by params.
    """

    def __init__(self, model, params):
        self.model = model
        self.posed = to_numpy(posed_vertices(model, params))
        self.finder = ClosestPointQuery(self.posed, model.faces)
        self.weights = to_numpy(model.lbs_weights)
        self.pose = to_numpy(model.pose_bases).transpose(0, 2, 1)
        self.expression = to_numpy(model.expression_bases)

    def __call__(self, query):
        """ Returns (DeformBundle, distances to the surface) """
        faces = self.model.faces
        face_ids, bary, _, distance = self.finder.query(to_numpy(query))
        bundle = DeformBundle(
            as_tensor(interpolate_rows(self.expression, faces, face_ids,
                                       bary)),
            as_tensor(interpolate_rows(self.pose, faces, face_ids, bary)),
            as_tensor(interpolate_rows(self.weights, faces, face_ids, bary)))
        return bundle, distance


def sample_components_at(model, params, query):
    """ DeformBundle of the nearest posed surface points and their distances
    """
    return ComponentLookup(model, params)(query)


@dataclass
class DeformBundle:
    """ Per-point deformation components

    E [N, 3, 50] expression bases, P [N, 36, 3] pose-corrective bases and
    W [N, 5] skinning weights.
    """
    E: torch.Tensor
    P: torch.Tensor
    W: torch.Tensor

    def __len__(self):
        return self.W.shape[0]

    def detach(self):
        return DeformBundle(self.E.detach(), self.P.detach(),
                            self.W.detach())

    def index(self, mask):
        return DeformBundle(self.E[mask], self.P[mask], self.W[mask])

    def offsets(self, pose_coeff, psi):
        """ B_P + B_E for coefficient vectors [36] and [50] """
        pose_offsets = torch.einsum("nkc,k->nc", self.P, as_tensor(pose_coeff))
        expression_offsets = torch.einsum("nck,k->nc", self.E, as_tensor(psi))
        return pose_offsets + expression_offsets


def make_synthetic_scan(model, params, texture_seed, subject_id=""):
    """ Posed head with procedural colour, deterministic in its inputs """
    mesh = flame_forward(model, params)
    colors = procedural_colors(model, texture_seed)
    return Scan(mesh.vertices, mesh.faces, colors, mesh.vertex_normals(),
                params, subject_id)


def procedural_colors(model, seed):
    """ Smooth noise keyed by seed plus skin, hair, lip and eye tints

    Evaluated on template positions so colours follow the surface.
    """
    rng = np.random.default_rng(seed)
    points = to_numpy(model.template_vertices)
    frequencies = rng.normal(0.0, 4.0, size=(8, 3))
    phases = rng.uniform(0.0, 2 * np.pi, size=8)
    mixing = rng.normal(0.0, 1.0, size=(8, 3))
    noise = np.sin(points @ frequencies.T + phases) @ mixing / np.sqrt(8.0)

    skin = np.array([0.80, 0.62, 0.52]) + rng.uniform(-0.12, 0.08, 3)
    hair = np.array([0.22, 0.15, 0.10]) * rng.uniform(0.6, 1.6)
    lips = np.array([0.70, 0.30, 0.30])
    eyes = np.array([0.15, 0.20, 0.30]) + rng.uniform(0.0, 0.3, 3)

    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    hair_mask = _smoothstep(0.05, 0.18, y - 0.25 * np.maximum(z, 0.0))
    lip_mask = (_smoothstep(0.06, 0.02, np.abs(y - _MOUTH_Y))
                * _smoothstep(0.10, 0.05, np.abs(x))
                * _smoothstep(0.15, 0.30, z))
    weights = to_numpy(model.lbs_weights)
    eye_mask = weights[:, 3] + weights[:, 4]

    colors = skin[None] + 0.06 * noise
    colors = _blend(colors, hair[None] + 0.03 * noise, hair_mask)
    colors = _blend(colors, lips[None], lip_mask)
    colors = _blend(colors, eyes[None], eye_mask)
    return np.clip(colors, 0.0, 1.0)


def _blend(a, b, t):
    return a * (1 - t[:, None]) + b * t[:, None]


def _smoothstep(edge0, edge1, x):
    t = np.clip((np.asarray(x) - edge0) / (edge1 - edge0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _wendland(distance, radius):
    """ Compactly supported smooth bump, exactly 0 beyond radius """
    q = np.clip(distance / radius, 0.0, 1.0)
    return (1 - q) ** 4 * (4 * q + 1)


def _nearest_ids(points, target, count):
    order = np.argsort(np.linalg.norm(points - target, axis=1),
                       kind="stable")
    return order[:count]


def _band(values, low, high, minimum=6):
    ids = np.nonzero((values >= low) & (values <= high))[0]
    if len(ids) < minimum:
        center = 0.5 * (low + high)
        ids = np.argsort(np.abs(values - center), kind="stable")[:minimum]
    return ids


def build_template_model(config):
    """ Generate the head template and its bases from config.seed """
    config.validate()
    rng = np.random.default_rng(config.seed)
    sphere = trimesh.creation.icosphere(subdivisions=config.subdivisions)
    directions = np.asarray(sphere.vertices, dtype=np.float64)
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    faces = np.asarray(sphere.faces, dtype=np.int64)

    # radial head shell: ellipsoid with nose, chin and brow features
    radii = np.asarray(config.radii, dtype=np.float64)
    radius = 1.0 / np.sqrt(((directions / radii) ** 2).sum(axis=1))
    features = (
        0.10 * _wendland(np.linalg.norm(
            directions - _unit([0.0, -0.05, 1.0]), axis=1), 0.35)
        + 0.05 * _wendland(np.linalg.norm(
            directions - _unit([0.0, -0.55, 0.85]), axis=1), 0.45)
        + 0.03 * _wendland(np.linalg.norm(
            directions - _unit([0.0, 0.30, 0.95]), axis=1), 0.50))
    vertices = directions * (radius * (1.0 + features))[:, None]
    normals = np.asarray(trimesh.Trimesh(
        vertices, faces, process=False).vertex_normals)
    x, y, z = vertices[:, 0], vertices[:, 1], vertices[:, 2]

    # skinning weights
    neck = _smoothstep(-0.28, -0.40, y)
    jaw = (_smoothstep(_MOUTH_Y, _MOUTH_Y - 0.08, y)
           * _smoothstep(-0.10, 0.05, z) * (1.0 - neck))
    eye_centers = []
    eye_weights = []
    for side in (1.0, -1.0):
        target = _unit([0.35 * side, 0.12, 0.93]) * 0.6
        center = vertices[_nearest_ids(vertices, target, 1)[0]]
        eye_centers.append(center)
        eye_weights.append(_smoothstep(
            0.07, 0.035, np.linalg.norm(vertices - center, axis=1)))
    weights = np.stack([np.zeros_like(y), neck, jaw] + eye_weights, axis=1)
    weights[:, 0] = np.clip(1.0 - weights[:, 1:].sum(axis=1), 0.0, None)
    weights = _snap(weights)

    # joint regressor: averages of vertex bands, rows sum to 1
    regressor = np.zeros((N_JOINTS, len(vertices)))
    regressor[0] = 1.0 / len(vertices)
    for j, ids in ((1, _band(y, -0.33, -0.27)),
                   (2, _band(y, _MOUTH_Y + 0.02, _MOUTH_Y + 0.1))):
        regressor[j, ids] = 1.0 / len(ids)
    for j, center in zip((3, 4), eye_centers):
        ids = np.nonzero(np.linalg.norm(vertices - center, axis=1) < 0.06)[0]
        if len(ids) < 3:
            ids = _nearest_ids(vertices, center, 3)
        regressor[j, ids] = 1.0 / len(ids)

    # shape bases: a few coarse bumps then local ones
    n_beta = config.n_beta
    shape = np.zeros((len(vertices), 3, n_beta))
    for k in range(n_beta):
        center = vertices[rng.integers(len(vertices))]
        reach = 0.45 if k < 4 else config.bump_radius
        amplitude = config.shape_amplitude / np.sqrt(1.0 + k / 4.0)
        direction = _unit(rng.normal(size=3))
        profile = _wendland(np.linalg.norm(vertices - center, axis=1), reach)
        shape[:, :, k] = amplitude * profile[:, None] * (
            0.8 * normals + 0.2 * direction)

    # expression bases: bumps on the face
    face_ids = np.nonzero((z > 0.15) & (y > -0.35) & (y < 0.25))[0]
    expression = np.zeros((len(vertices), 3, N_PSI))
    for k in range(N_PSI):
        center = vertices[face_ids[rng.integers(len(face_ids))]]
        reach = rng.uniform(0.10, 0.20)
        direction = _unit(rng.normal(size=3) + np.array([0.0, 0.0, 0.5]))
        profile = _wendland(np.linalg.norm(vertices - center, axis=1), reach)
        expression[:, :, k] = config.expression_amplitude * profile[:, None] \
            * (0.5 * normals + 0.5 * direction)

    # pose correctives, supported where the driving joint has weight
    pose = np.zeros((len(vertices), 3, N_POSE_BASIS))
    for j in range(1, N_JOINTS):
        support = np.nonzero(weights[:, j] > 0)[0]
        for c in range(9):
            column = 9 * (j - 1) + c
            center = vertices[support[rng.integers(len(support))]]
            direction = _unit(rng.normal(size=3))
            profile = _wendland(np.linalg.norm(vertices - center, axis=1),
                                0.25) * weights[:, j]
            pose[:, :, column] = config.pose_amplitude * profile[:, None] \
                * direction[None]

    upper = _nearest_ids(vertices, np.array([0.0, _MOUTH_Y + 0.04, 0.6]), 1)
    lower = _nearest_ids(vertices, np.array([0.0, _MOUTH_Y - 0.10, 0.6]), 1)
    model = TemplateModel(
        template_vertices=as_tensor(vertices),
        faces=faces,
        shape_bases=as_tensor(shape),
        expression_bases=as_tensor(expression),
        pose_bases=as_tensor(pose),
        lbs_weights=as_tensor(weights),
        joint_regressor=as_tensor(regressor),
        face_region=face_ids.astype(np.int64),
        lip_landmarks=np.array([upper[0], lower[0]], dtype=np.int64),
        seed=config.seed)
    logger.info("built head template: %d vertices, %d faces, %d shape bases",
                model.n_vertices, len(faces), n_beta)
    return model.validate()


def _snap(weights):
    weights = np.where(weights < _WEIGHT_FLOOR, 0.0, weights)
    return weights / weights.sum(axis=1, keepdims=True)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def save_template_model(model, path):
    """ Write the model as a versioned npz asset """
    np.savez(path,
             format_version=np.array(FORMAT_VERSION),
             template_vertices=to_numpy(model.template_vertices),
             faces=model.faces,
             shape_bases=to_numpy(model.shape_bases),
             expression_bases=to_numpy(model.expression_bases),
             pose_bases=to_numpy(model.pose_bases),
             lbs_weights=to_numpy(model.lbs_weights),
             joint_regressor=to_numpy(model.joint_regressor),
             face_region=model.face_region,
             lip_landmarks=model.lip_landmarks,
             seed=np.array(model.seed))
    return path


def load_template_model(path):
    """ Read and validate a model asset """
    with np.load(path, allow_pickle=False) as data:
        version = str(data["format_version"])
        if version != FORMAT_VERSION:
            raise InvalidArgumentError(
                f"{path}: unsupported template version {version}")
        model = TemplateModel(
            template_vertices=as_tensor(data["template_vertices"]),
            faces=data["faces"].astype(np.int64),
            shape_bases=as_tensor(data["shape_bases"]),
            expression_bases=as_tensor(data["expression_bases"]),
            pose_bases=as_tensor(data["pose_bases"]),
            lbs_weights=as_tensor(data["lbs_weights"]),
            joint_regressor=as_tensor(data["joint_regressor"]),
            face_region=data["face_region"].astype(np.int64),
            lip_landmarks=data["lip_landmarks"].astype(np.int64),
            seed=int(data["seed"]))
    return model.validate()
