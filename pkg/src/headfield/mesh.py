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

""" Plain mesh, scan and sample containers """

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import trimesh

from . errors import InvalidArgumentError
from . geometry import boundary_edge_count, triangle_areas

logger = logging.getLogger(__name__)


@dataclass
class Mesh:
    """ Triangle mesh with optional per-vertex colour and normal """
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray = None
    normals: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.vertices = self.vertices.reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
        if len(self.faces) and (self.faces.min() < 0
                                or self.faces.max() >= len(self.vertices)):
            raise InvalidArgumentError("face index out of range")

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self):
        return len(self.faces) == 0

    @property
    def has_colors(self):
        return self.colors is not None and len(self.colors) == len(
            self.vertices)

    def to_trimesh(self):
        """ trimesh view of the mesh, vertex order preserved """
        kwargs = {}
        if self.has_colors:
            rgba = np.concatenate(
                [_to_uint8(self.colors),
                 np.full((len(self.colors), 1), 255, np.uint8)], axis=1)
            kwargs["vertex_colors"] = rgba
        if self.normals is not None:
            kwargs["vertex_normals"] = self.normals
        return trimesh.Trimesh(self.vertices, self.faces, process=False,
                               **kwargs)

    def vertex_normals(self):
        """ Area weighted vertex normals """
        if self.is_empty:
            return np.zeros_like(self.vertices)
        return np.asarray(trimesh.Trimesh(
            self.vertices, self.faces, process=False).vertex_normals,
            dtype=np.float64)

    def with_normals(self):
        """ Copy with analytic vertex normals filled in when missing """
        if self.normals is not None:
            return self
        return Mesh(self.vertices, self.faces, self.colors,
                    self.vertex_normals())

    def areas(self):
        return triangle_areas(self.vertices, self.faces)

    def is_watertight(self):
        return not self.is_empty and boundary_edge_count(self.faces) == 0

    def euler_characteristic(self):
        edges = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                                self.faces[:, [2, 0]]])
        n_edges = len(np.unique(np.sort(edges, axis=1), axis=0))
        used = len(np.unique(self.faces))
        return used - n_edges + len(self.faces)

    def sample_surface(self, count, rng):
        """ Area uniform samples
        Returns (points [count, 3], face ids [count], barycentric [count, 3])
        """
        if self.is_empty:
            raise InvalidArgumentError("cannot sample an empty mesh")
        areas = self.areas()
        total = areas.sum()
        if total <= 0:
            raise InvalidArgumentError("cannot sample a zero-area mesh")
        face_ids = rng.choice(len(self.faces), size=count, p=areas / total)
        r1 = np.sqrt(rng.random(count))
        r2 = rng.random(count)
        bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
        tri = self.vertices[self.faces[face_ids]]
        points = (bary[:, :, None] * tri).sum(axis=1)
        return points, face_ids, bary

    def interpolate(self, values, face_ids, bary):
        """ Barycentric interpolation of per-vertex values """
        corner = np.asarray(values)[self.faces[face_ids]]
        return (bary[:, :, None] * corner).sum(axis=1)

    def remove_degenerate_faces(self, eps=0.0):
        """ Copy without zero-area faces and unreferenced vertices """
        if self.is_empty:
            return self
        keep = self.areas() > eps
        faces = self.faces[keep]
        used, inverse = np.unique(faces, return_inverse=True)
        pick = (lambda a: None if a is None else a[used])
        return Mesh(self.vertices[used], inverse.reshape(-1, 3),
                    pick(self.colors), pick(self.normals))

    def content_hash(self):
        """ SHA-256 over geometry and attributes """
        digest = hashlib.sha256()
        for array in (self.vertices, self.faces, self.colors, self.normals):
            if array is not None:
                digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()


@dataclass
class SampleSet:
    """ Occupancy and surface supervision drawn from one scan """
    points: np.ndarray
    occ_gt: np.ndarray
    surface_points: np.ndarray
    color_gt: np.ndarray
    normal_gt: np.ndarray
    bbox: np.ndarray

    @property
    def counts(self):
        return (len(self.points), len(self.surface_points))


@dataclass
class Scan:
    """ Textured triangle mesh with its fitted head parameters """
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray
    normals: np.ndarray
    params: object
    subject_id: str = ""
    samples: SampleSet = None
    # True when the mesh is closed and parity labelling is allowed
    watertight: bool = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.watertight is None:
            self.watertight = boundary_edge_count(self.faces) == 0

    @property
    def mesh(self):
        return Mesh(self.vertices, self.faces, self.colors, self.normals)

    @property
    def bbox(self):
        return np.stack([self.vertices.min(axis=0),
                         self.vertices.max(axis=0)])

    def content_hash(self):
        return self.mesh.content_hash()


def _to_uint8(colors):
    return np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(
        np.uint8)
