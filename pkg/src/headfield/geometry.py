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

""" Low level geometry shared by the head model, metrics and renderers

Rotations are torch (they sit inside differentiable deformations), the
triangle queries are numpy (they only produce supervision and metrics).
"""

import logging

import numpy as np
import torch
from scipy.spatial import cKDTree

from . errors import InvalidArgumentError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

# Below this squared angle the rotation series are used instead of sin/cos
_SMALL_ANGLE2 = 1e-8


def as_tensor(value, dtype=DTYPE):
    """ Convert arrays, lists and tensors to a float64 tensor """
    if isinstance(value, torch.Tensor):
        return value.to(dtype)
    return torch.as_tensor(np.asarray(value), dtype=dtype)


def to_numpy(value):
    """ Detached float64 numpy copy of a tensor or array """
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy().astype(np.float64)
    return np.asarray(value, dtype=np.float64)


def skew(v):
    """ Cross product matrices of [..., 3] vectors """
    zero = torch.zeros_like(v[..., 0])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack([
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ], dim=-2)


def rodrigues(rotvec):
    """ Axis-angle [..., 3] to rotation matrices [..., 3, 3]
    Exact identity for a zero vector and smooth gradients around it
    """
    rotvec = as_tensor(rotvec)
    angle2 = (rotvec * rotvec).sum(-1)
    small = angle2 < _SMALL_ANGLE2
    safe2 = torch.where(small, torch.ones_like(angle2), angle2)
    angle = torch.sqrt(safe2)
    a = torch.where(small, 1 - angle2 / 6 + angle2 * angle2 / 120,
                    torch.sin(angle) / angle)
    b = torch.where(small, 0.5 - angle2 / 24 + angle2 * angle2 / 720,
                    (1 - torch.cos(angle)) / safe2)
    k = skew(rotvec)
    eye = torch.eye(3, dtype=rotvec.dtype).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def triangle_areas(vertices, faces):
    """ Area of each face """
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def _dot(x, y):
    """ Row-wise dot product of [N, 3] arrays, fixed summation order """
    return x[:, 0] * y[:, 0] + x[:, 1] * y[:, 1] + x[:, 2] * y[:, 2]


def closest_point_on_triangles(points, a, b, c):
    """ Closest point of each triangle (a, b, c) to the matching point

    All arguments are [N, 3] arrays, row i of points is tested against
    triangle i. Returns (closest [N, 3], barycentric [N, 3], distance [N]).
    The computation is element-wise, so results do not depend on how
    queries are batched.
    """
    ab = b - a
    ac = c - a
    ap = points - a
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    bp = points - b
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    cp = points - c
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = len(points)
    bary = np.empty((n, 3))
    done = np.zeros(n, dtype=bool)

    def assign(mask, u, v, w):
        mask = mask & ~done
        bary[mask, 0] = u[mask] if np.ndim(u) else u
        bary[mask, 1] = v[mask] if np.ndim(v) else v
        bary[mask, 2] = w[mask] if np.ndim(w) else w
        done[mask] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        # vertex regions
        assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        # edge ab
        v_ab = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - v_ab, v_ab, 0.0)
        assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        # edge ac
        w_ac = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - w_ac, 0.0, w_ac)
        # edge bc
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
               0.0, 1 - w_bc, w_bc)
        # face interior
        denom = 1.0 / (va + vb + vc)
        v_in = vb * denom
        w_in = vc * denom
        assign(np.ones(n, dtype=bool), 1 - v_in - w_in, v_in, w_in)

    # degenerate triangles fall back to their first vertex
    bad = ~np.isfinite(bary).all(axis=1)
    bary[bad] = (1.0, 0.0, 0.0)
    closest = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    delta = points - closest
    distance = np.sqrt(_dot(delta, delta))
    return closest, bary, distance


class ClosestPointQuery:
    """ Nearest surface point queries on a triangle mesh

    Candidate triangles are pruned with a kd-tree over face centroids:
    a triangle cannot be closer than its centroid distance minus its
    bounding radius. The exact test then runs on every surviving
    candidate so the answer equals the brute force scan over all faces,
    ties going to the lowest face index.
    """

    def __init__(self, vertices, faces, seed_candidates=8):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        if len(self.faces) == 0:
            raise InvalidArgumentError("closest point query on empty mesh")
        tri = self.vertices[self.faces]
        self.centroids = tri.mean(axis=1)
        self.radius = np.linalg.norm(
            tri - self.centroids[:, None], axis=2).max()
        self.tree = cKDTree(self.centroids)
        self.seed_candidates = min(seed_candidates, len(self.faces))

    def query(self, points):
        """ Returns (face index [N], barycentric [N, 3], closest [N, 3],
        distance [N])
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        face_ids = np.empty(n, dtype=np.int64)
        bary = np.empty((n, 3))
        closest = np.empty((n, 3))
        distance = np.empty(n)
        if n == 0:
            return face_ids, bary, closest, distance

        # upper bound from the faces with the nearest centroids
        _, seeds = self.tree.query(points, k=self.seed_candidates)
        seeds = np.asarray(seeds).reshape(n, -1)
        seed_dist = self._distances(np.repeat(points, seeds.shape[1], 0),
                                    seeds.ravel()).reshape(n, -1)
        bound = seed_dist.min(axis=1)
        neighbours = self.tree.query_ball_point(
            points, bound + self.radius + 1e-12)

        for i in range(n):
            candidates = np.unique(np.asarray(neighbours[i], dtype=np.int64))
            p = np.repeat(points[i:i + 1], len(candidates), axis=0)
            tri = self.vertices[self.faces[candidates]]
            c, b, d = closest_point_on_triangles(
                p, tri[:, 0], tri[:, 1], tri[:, 2])
            best = np.argmin(d)
            face_ids[i] = candidates[best]
            bary[i] = b[best]
            closest[i] = c[best]
            distance[i] = d[best]
        return face_ids, bary, closest, distance

    def _distances(self, points, face_ids):
        tri = self.vertices[self.faces[face_ids]]
        return closest_point_on_triangles(
            points, tri[:, 0], tri[:, 1], tri[:, 2])[2]


def brute_force_closest(vertices, faces, points):
    """ O(N*F) nearest triangle scan, ties to the lowest face index """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = vertices[faces]
    face_ids = np.empty(len(points), dtype=np.int64)
    bary = np.empty((len(points), 3))
    distance = np.empty(len(points))
    for i, p in enumerate(points):
        q = np.repeat(p[None], len(faces), axis=0)
        _, b, d = closest_point_on_triangles(
            q, tri[:, 0], tri[:, 1], tri[:, 2])
        best = np.argmin(d)
        face_ids[i] = best
        bary[i] = b[best]
        distance[i] = d[best]
    return face_ids, bary, distance


def interpolate_rows(values, faces, face_ids, bary):
    """ Barycentric interpolation of per-vertex rows [V, ...] """
    corner = values[faces[face_ids]]
    shape = (len(face_ids), 3) + (1,) * (corner.ndim - 2)
    return (bary.reshape(shape) * corner).sum(axis=1)


def winding_number(vertices, faces, points, chunk=4096):
    """ Generalized winding number of points w.r.t. a triangle soup

    Sum of signed solid angles over 4 pi, using the closed form of
    Van Oosterom and Strackee. Close to 1 inside, 0 outside.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = vertices[faces]
    result = np.empty(len(points))
    for start in range(0, len(points), chunk):
        p = points[start:start + chunk]
        a = tri[None, :, 0] - p[:, None]
        b = tri[None, :, 1] - p[:, None]
        c = tri[None, :, 2] - p[:, None]
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        det = np.einsum("ijk,ijk->ij", a, np.cross(b, c))
        div = (la * lb * lc
               + np.einsum("ijk,ijk->ij", a, b) * lc
               + np.einsum("ijk,ijk->ij", b, c) * la
               + np.einsum("ijk,ijk->ij", c, a) * lb)
        omega = 2.0 * np.arctan2(det, div)
        result[start:start + chunk] = omega.sum(axis=1) / (4.0 * np.pi)
    return result


def boundary_edge_count(faces):
    """ Number of edges used by exactly one face """
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return 0
    edges = np.concatenate(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return int((counts == 1).sum())


def ray_parity(vertices, faces, points, direction=None):
    """ Inside test by counting crossings of a ray, odd means inside

    The default direction is irrational enough to avoid edges and
    vertices of meshes built on regular grids.
    """
    if direction is None:
        direction = np.array([0.5773502691896258, 0.5883484054145521,
                              0.5661364333743211])
    direction = direction / np.linalg.norm(direction)
    vertices = np.asarray(vertices, dtype=np.float64)
    tri = vertices[np.asarray(faces, dtype=np.int64)]
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pvec = np.cross(direction, e2)
    det = _dot(e1, pvec)
    valid = np.abs(det) > 1e-15
    inv = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0)
    inside = np.empty(len(points), dtype=bool)
    for i, p in enumerate(points):
        tvec = p - tri[:, 0]
        u = _dot(tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = (qvec @ direction) * inv
        t = _dot(e2, qvec) * inv
        hit = valid & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        inside[i] = bool(hit.sum() % 2)
    return inside
