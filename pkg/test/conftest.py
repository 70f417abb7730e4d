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

import numpy as np
import pytest
import torch
import trimesh

from headfield.avatar import HeadAvatar
from headfield.config import RunConfig, merge
from headfield.dataset import synthesize_dataset
from headfield.headmodel import HeadParams, build_template_model
from headfield.mesh import Mesh

#
# Every test runs on a scaled down configuration:
#   642 vertex template with 10 shape bases
#   narrow networks with 8 dimensional codes
#   2 training subjects x 2 expressions, 1 held-out subject
#
TINY = {
    "headmodel": {"n_beta": 10},
    "network": {
        "n_f": 8, "n_s": 8, "n_d": 8, "n_c": 8,
        "grid_resolution": 4, "grid_channels": 4, "generator_hidden": 8,
        "geometry_widths": [16, 16, 16], "normal_widths": [16],
        "texture_widths": [16],
    },
    "deform": {
        "shape_widths": [16], "bases_widths": [32, 32],
        "tolerance": 1e-8, "max_iter": 40,
    },
    "render": {"resolution": 12, "steps": 24, "window_steps": 8},
    "data": {
        "n_subjects": 2, "n_expressions": 2, "n_holdout": 1,
        "near_points": 96, "uniform_points": 48, "surface_points": 48,
        "beta_scale": 0.5, "psi_scale": 0.5,
    },
    "train": {
        "epochs_stage1": 1, "epochs_stage2": 1,
        "batch_stage1": 2, "batch_stage2": 2,
        "points_per_step": 64, "surface_per_step": 24, "aux_points": 8,
    },
    "fit": {"iterations": 2, "eval_resolution": 16, "metric_samples": 200},
}

# The same configuration as command line overrides
TINY_OVERRIDES = [
    f"{section}.{key}={value}".replace("'", '"')
    for section, values in TINY.items() for key, value in values.items()
]


def tiny_config(**sections):
    """ TINY configuration with extra per-section values """
    config = merge(RunConfig(), TINY)
    if sections:
        config = merge(config, sections)
    return config.validate()


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture(scope="session")
def model():
    """ Template model shared by the whole session, never modified """
    return build_template_model(tiny_config().headmodel)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    """ Synthetic dataset written once per session """
    directory = tmp_path_factory.mktemp("dataset")
    synthesize_dataset(tiny_config(), str(directory))
    return str(directory)


@pytest.fixture
def avatar(model, config):
    """ Untrained avatar over two subjects """
    return HeadAvatar(model, config, ["s000", "s001"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_params(model, rng):
    """ Mild pose, no expression: the untrained deformation stays
    invertible everywhere """
    theta = np.zeros(15)
    theta[3:6] = rng.uniform(-0.1, 0.1, 3)
    theta[6] = 0.2
    return HeadParams(rng.normal(0.0, 0.5, model.n_beta), theta,
                      np.zeros(50))


@pytest.fixture
def sphere():
    """ Coloured icosphere of radius 0.5 centred at the origin """
    tm = trimesh.creation.icosphere(subdivisions=3, radius=0.5)
    vertices = np.asarray(tm.vertices, dtype=np.float64)
    colors = 0.5 + 0.5 * vertices / 0.5 * np.array([1.0, 0.5, 0.25])
    return Mesh(vertices, np.asarray(tm.faces), np.clip(colors, 0.0, 1.0))


@pytest.fixture
def cube():
    """ Closed unit cube [0, 1]^3, outward oriented """
    tm = trimesh.creation.box(extents=(1.0, 1.0, 1.0))
    return Mesh(np.asarray(tm.vertices) + 0.5, np.asarray(tm.faces))


class SphereField:
    """ Analytic occupancy 0.5 + (radius - |x|) with constant shading """

    def __init__(self, radius=0.5):
        self.radius = radius

    def __call__(self, points):
        return self.occupancy(points)

    def occupancy(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return 0.5 + (self.radius - np.linalg.norm(points, axis=1))

    def shade(self, points):
        points = np.asarray(points, dtype=np.float64)
        normal = points / np.linalg.norm(points, axis=1, keepdims=True)
        rgb = np.full((len(points), 3), 0.25)
        return rgb, normal, points.copy()


@pytest.fixture
def sphere_field():
    return SphereField()


def directional_error(loss_fn, params, rng, step=1e-5):
    """ Relative error between autograd and central differences along a
    random direction of every parameter in params, which are perturbed in
    place and restored
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    directions = []
    for p in params:
        d = torch.as_tensor(rng.normal(size=tuple(p.shape)), dtype=p.dtype)
        directions.append(d / d.norm())
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, directions)
                   if g is not None)
    with torch.no_grad():
        for p, d in zip(params, directions):
            p.add_(step * d)
    plus = float(loss_fn())
    with torch.no_grad():
        for p, d in zip(params, directions):
            p.sub_(2 * step * d)
    minus = float(loss_fn())
    with torch.no_grad():
        for p, d in zip(params, directions):
            p.add_(step * d)
    numeric = (plus - minus) / (2 * step)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
