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

""" Layered run configuration

Defaults live in the dataclasses below. A JSON file overrides them and
dotted "key.sub=value" pairs override the file. The resolved dictionary is
the snapshot written next to every run output.
"""

import json
import logging
import os
from dataclasses import dataclass, field, fields, asdict, is_dataclass

from . errors import InvalidArgumentError

logger = logging.getLogger(__name__)

SNAPSHOT_NAME = "config.json"


@dataclass
class HeadModelConfig:
    """ Low-poly parametric head generation """
    seed: int = 0
    # icosphere subdivisions: 3 gives 642 vertices, 4 gives 2562
    subdivisions: int = 3
    n_beta: int = 100
    radii: tuple = (0.36, 0.46, 0.42)
    shape_amplitude: float = 0.03
    expression_amplitude: float = 0.015
    pose_amplitude: float = 0.01
    bump_radius: float = 0.22

    def validate(self):
        if not 1 <= self.subdivisions <= 5:
            raise InvalidArgumentError("subdivisions must be in [1, 5]")
        if self.n_beta < 1:
            raise InvalidArgumentError("n_beta must be positive")


@dataclass
class NetworkConfig:
    """ Widths and latent sizes of the canonical networks """
    n_f: int = 32
    n_s: int = 64
    n_d: int = 64
    n_c: int = 64
    grid_resolution: int = 8
    grid_channels: int = 32
    generator_hidden: int = 32
    geometry_widths: tuple = (128, 128, 128)
    geometry_skip: int = 2
    normal_widths: tuple = (128, 128)
    texture_widths: tuple = (128, 128)
    softplus_beta: float = 100.0
    ellipsoid_radii: tuple = (0.36, 0.46, 0.42)
    ellipsoid_gain: float = 6.0
    seed: int = 0

    def validate(self):
        for name in ("n_f", "n_s", "n_d", "n_c", "grid_channels"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.grid_resolution < 2:
            raise InvalidArgumentError("grid_resolution must be >= 2")


@dataclass
class DeformConfig:
    """ Deformation networks and correspondence search """
    canonical_jaw: float = 0.1
    max_iter: int = 30
    tolerance: float = 1e-5
    divergence: float = 1.0
    root_selection: str = "min_residual"
    # full, head_fs (pure skinning) or f_def (template bases lookup)
    mode: str = "full"
    shape_widths: tuple = (64, 64)
    bases_widths: tuple = (128, 128, 128)
    residual_init_scale: float = 1e-3
    chunk_size: int = 8192

    MODES = ("full", "head_fs", "f_def")
    SELECTIONS = ("min_residual", "max_occupancy")

    def validate(self):
        if self.mode not in self.MODES:
            raise InvalidArgumentError(f"unknown deformation mode {self.mode}")
        if self.root_selection not in self.SELECTIONS:
            raise InvalidArgumentError(
                f"unknown root selection {self.root_selection}")
        if self.max_iter < 0 or self.tolerance <= 0:
            raise InvalidArgumentError("invalid root finding budget")


@dataclass
class RenderConfig:
    """ Ray marcher and rasterizer settings """
    resolution: int = 128
    steps: int = 128
    secant_iters: int = 5
    background: float = 1.0
    half_extent: float = 0.6
    # stage-2 precomputation marches only this close to the scan depth
    window: float = 0.08
    window_steps: int = 16
    chunk_size: int = 16384

    def validate(self):
        if self.resolution < 1 or self.steps < 2:
            raise InvalidArgumentError("invalid render resolution or steps")


@dataclass
class DataConfig:
    """ Synthetic dataset generation """
    n_subjects: int = 8
    n_expressions: int = 5
    n_holdout: int = 4
    seed: int = 0
    beta_scale: float = 1.0
    psi_scale: float = 1.0
    jaw_max: float = 0.3
    neck_max: float = 0.15
    near_points: int = 2048
    uniform_points: int = 1229
    surface_points: int = 819
    near_sigma: float = 0.01

    def validate(self):
        if self.n_subjects < 1 or self.n_expressions < 1:
            raise InvalidArgumentError(
                "dataset needs subjects and expressions")
        if min(self.near_points, self.uniform_points,
               self.surface_points) < 0:
            raise InvalidArgumentError("sample counts must be >= 0")


@dataclass
class TrainConfig:
    """ Two-stage training, loss weights and ablation switches """
    lambda_d: float = 10.0
    lambda_l: float = 1.0
    lambda_r: float = 1e-3
    lambda_p: float = 1.0
    lambda_e: float = 1.0
    lambda_c: float = 1.0
    lambda_n: float = 1.0
    # inner weights of the colour, normal and code regularisation terms
    lambda_color_point: float = 1.0
    lambda_normal_point: float = 1.0
    lambda_color_code: float = 1.0
    epochs_stage1: int = 50
    epochs_stage2: int = 30
    batch_stage1: int = 4
    batch_stage2: int = 2
    lr_network: float = 1e-3
    lr_latent: float = 1e-3
    latent_init_std: float = 0.01
    points_per_step: int = 2048
    surface_per_step: int = 512
    auxiliary_epochs: int = 1
    aux_points: int = 64
    aux_bone_radius: float = 0.02
    aux_joint_radius: float = 0.03
    seed: int = 0
    head_fs: bool = False
    f_def: bool = False
    no_lbs_loss: bool = False

    def validate(self):
        for f in fields(self):
            if f.name.startswith("lambda_") and getattr(self, f.name) < 0:
                raise InvalidArgumentError(f"{f.name} must be >= 0")
        if sum([self.head_fs, self.f_def, self.no_lbs_loss]) > 1:
            raise InvalidArgumentError("ablation switches are exclusive")
        if self.batch_stage1 < 1 or self.batch_stage2 < 1:
            raise InvalidArgumentError("batch sizes must be positive")

    @property
    def ablation(self):
        """ Name of the active ablation or "full" """
        for name in ("head_fs", "f_def", "no_lbs_loss"):
            if getattr(self, name):
                return name
        return "full"

    def deform_mode(self):
        """ Deformation path selected by the ablation switches """
        if self.head_fs:
            return "head_fs"
        if self.f_def:
            return "f_def"
        return "full"


@dataclass
class FitConfig:
    """ Latent code fitting to a raw scan """
    iterations: int = 400
    lr: float = 5e-3
    lambda_c: float = 1.0
    lambda_n: float = 1.0
    lambda_r: float = 1e-3
    lambda_shape: float = 1.0
    lambda_detail: float = 1.0
    lambda_color: float = 1.0
    divergence_factor: float = 10.0
    eval_resolution: int = 128
    # forward: canonical extraction then deformed vertices
    # field: marching cubes on the deformed field
    extraction: str = "forward"
    metric_samples: int = 10000
    tau: float = 0.05
    face_radius: float = 0.05
    seed: int = 0

    def validate(self):
        if self.iterations < 0:
            raise InvalidArgumentError("iterations must be >= 0")
        if self.extraction not in ("forward", "field"):
            raise InvalidArgumentError(
                f"unknown extraction {self.extraction}")
        if self.eval_resolution < 8:
            raise InvalidArgumentError("eval_resolution must be >= 8")


@dataclass
class RunConfig:
    """ Root configuration of one command invocation """
    command: str = ""
    seed: int = 0
    threads: int = 0
    out: str = ""
    headmodel: HeadModelConfig = field(default_factory=HeadModelConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    deform: DeformConfig = field(default_factory=DeformConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fit: FitConfig = field(default_factory=FitConfig)

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if is_dataclass(value):
                value.validate()
        return self

    def snapshot(self):
        """ Resolved configuration as a JSON compatible dictionary """
        return asdict(self)

    def write_snapshot(self, directory, name=SNAPSHOT_NAME):
        """ Write the snapshot (config.json) in directory, return its path """
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, name)
        with open(path, "w") as fd:
            json.dump(self.snapshot(), fd, indent=2, sort_keys=True)
        return path

    @classmethod
    def from_snapshot(cls, snapshot):
        """ Rebuild a configuration from a snapshot dictionary """
        return merge(cls(), snapshot).validate()

    @classmethod
    def load(cls, path=None, overrides=()):
        """ Defaults < JSON file < dotted overrides """
        config = cls()
        if path:
            with open(path) as fd:
                config = merge(config, json.load(fd))
        for item in overrides:
            config = apply_override(config, item)
        return config.validate()


def merge(instance, values):
    """ Return a copy of the dataclass instance updated from a dictionary
    Nested dataclasses are merged recursively, unknown keys are rejected
    """
    if not isinstance(values, dict):
        raise InvalidArgumentError(
            f"expected a mapping for {type(instance).__name__}")
    known = {f.name: f for f in fields(instance)}
    updates = {}
    for key, value in values.items():
        if key not in known:
            raise InvalidArgumentError(
                f"unknown configuration key {type(instance).__name__}.{key}")
        current = getattr(instance, key)
        if is_dataclass(current):
            updates[key] = merge(current, value)
        elif isinstance(current, tuple):
            updates[key] = tuple(value)
        else:
            updates[key] = _coerce(key, current, value)
    result = type(instance)(**{
        name: updates.get(name, getattr(instance, name)) for name in known})
    return result


def apply_override(config, item):
    """ Apply one "dotted.key=value" override """
    if "=" not in item:
        raise InvalidArgumentError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested = value
    for part in reversed(key.strip().split(".")):
        nested = {part: nested}
    return merge(config, nested)


def _coerce(key, current, value):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise InvalidArgumentError(f"{key} expects a boolean")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise InvalidArgumentError(f"{key} expects an integer")
        return value
    if isinstance(current, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise InvalidArgumentError(f"{key} expects a number")
        return float(value)
    if isinstance(current, str) and not isinstance(value, str):
        return str(value)
    return value
