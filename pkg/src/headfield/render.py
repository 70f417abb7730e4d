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

""" Orthographic renderers for the image losses

render_field ray marches an occupancy field, render_scan rasterizes a
triangle mesh; both fill the same RenderOut layout so image losses are
per-pixel differences.
"""

import logging
import os
from dataclasses import dataclass

import numpy as np
from mathutils import Vector
from PIL import Image

from . errors import InvalidArgumentError
from . mesh import Scan

logger = logging.getLogger(__name__)

LEVEL = 0.5

# View name and viewing direction of the fixed rig; +z is the face front
RIG_VIEWS = (
    ("front", (0.0, 0.0, -1.0)),
    ("left", (-1.0, 0.0, 0.0)),
    ("right", (1.0, 0.0, 0.0)),
    ("back", (0.0, 0.0, 1.0)),
)


@dataclass
class Camera:
    """ Orthographic camera

    Rays start on the plane center - depth * forward and travel along
    forward for 2 * depth. Pixel (0, 0) is the top left corner.
    """
    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray
    center: np.ndarray
    half_extent: float
    width: int
    height: int
    depth: float = 1.0
    name: str = ""

    def __post_init__(self):
        for key in ("right", "up", "forward", "center"):
            setattr(self, key, np.asarray(getattr(self, key),
                                          dtype=np.float64))
        basis = np.stack([self.right, self.up, self.forward])
        if np.abs(basis @ basis.T - np.eye(3)).max() > 1e-8:
            raise InvalidArgumentError("camera frame is not orthonormal")
        if self.width < 1 or self.height < 1 or self.half_extent <= 0:
            raise InvalidArgumentError("invalid camera size")

    @property
    def shape(self):
        return (self.height, self.width)

    def pixel_offsets(self):
        """ Image plane coordinates (u, v) of pixel centres [H, W] """
        u = ((np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0) \
            * self.half_extent
        v = (1.0 - (np.arange(self.height) + 0.5) / self.height * 2.0) \
            * self.half_extent
        return np.meshgrid(u, v)

    def rays(self):
        """ Ray origins [H * W, 3]; every ray travels along forward """
        u, v = self.pixel_offsets()
        origin = self.center - self.depth * self.forward
        return (origin + u.reshape(-1, 1) * self.right
                + v.reshape(-1, 1) * self.up)

    def project(self, points):
        """ Continuous pixel coordinates (column, row) and ray depth t """
        rel = np.asarray(points, dtype=np.float64) - self.center
        x = rel @ self.right
        y = rel @ self.up
        t = rel @ self.forward + self.depth
        column = (x / self.half_extent + 1.0) / 2.0 * self.width - 0.5
        row = (1.0 - y / self.half_extent) / 2.0 * self.height - 0.5
        return column, row, t


def camera_frame(forward):
    """ (right, up, forward) for a view direction, up along +y

    The rotation comes from a track quaternion (-Z to forward, Y up) and
    is re-orthonormalized in double precision.
    """
    forward = np.asarray(forward, dtype=np.float64)
    forward = forward / np.linalg.norm(forward)
    rotation = Vector(tuple(forward)).to_track_quat("-Z", "Y").to_matrix()
    up = np.array([rotation[k][1] for k in range(3)], dtype=np.float64)
    up = up - np.dot(up, forward) * forward
    up = up / np.linalg.norm(up)
    right = np.cross(forward, up)
    return right, up, forward


def camera_rig(resolution=128, half_extent=0.6, center=(0.0, 0.0, 0.0),
               depth=1.0):
    """ Fixed front, left, right and back orthographic views """
    cameras = []
    for name, direction in RIG_VIEWS:
        right, up, forward = camera_frame(direction)
        cameras.append(Camera(right, up, forward, np.asarray(center),
                              half_extent, resolution, resolution, depth,
                              name))
    return cameras


@dataclass
class RenderOut:
    """ Images of one view

    points are surface points in the rendered space, canonical the
    matching canonical points when known, both NaN off the mask.
    """
    rgb: np.ndarray
    normal: np.ndarray
    mask: np.ndarray
    points: np.ndarray
    canonical: np.ndarray
    depth: np.ndarray

    @classmethod
    def blank(cls, shape, background=1.0):
        h, w = shape
        nan = np.full((h, w, 3), np.nan)
        return cls(np.full((h, w, 3), float(background)),
                   np.zeros((h, w, 3)), np.zeros((h, w), dtype=bool),
                   nan.copy(), nan.copy(), np.full((h, w), np.inf))


def render_field(field, camera, steps=128, secant_iters=5, background=1.0,
                 depth_hint=None, window=0.08, window_steps=16,
                 chunk=16384):
    """ Ray march the 0.5 level set of a deformed occupancy field

    field provides occupancy(points) -> [N] and
    shade(points) -> (rgb [N, 3], normal [N, 3], canonical [N, 3]).
    Each ray is sampled at fixed steps, the first outside to inside
    crossing is refined by secant iterations and the surface point is
    shaded. With depth_hint [H, W] only pixels with a finite hint are
    marched, over [hint - window, hint + window] with window_steps
    samples.
    """
    out = RenderOut.blank(camera.shape, background)
    origins = camera.rays()
    forward = camera.forward
    n_rays = len(origins)

    if depth_hint is None:
        ray_ids = np.arange(n_rays)
        count = steps
        lower = np.zeros(n_rays)
        upper = np.full(n_rays, 2.0 * camera.depth)
    else:
        hint = np.asarray(depth_hint, dtype=np.float64).reshape(-1)
        ray_ids = np.nonzero(np.isfinite(hint))[0]
        count = window_steps
        lower = np.maximum(hint - window, 0.0)
        upper = hint + window
    if count < 2:
        raise InvalidArgumentError("ray marching needs at least 2 steps")

    hit_t = np.full(n_rays, np.inf)
    per_chunk = max(1, chunk // count)
    fraction = np.linspace(0.0, 1.0, count)
    for start in range(0, len(ray_ids), per_chunk):
        ids = ray_ids[start:start + per_chunk]
        t = lower[ids, None] + fraction[None] * (upper - lower)[ids, None]
        points = origins[ids, None] + t[..., None] * forward
        occ = np.asarray(field.occupancy(points.reshape(-1, 3)),
                         dtype=np.float64).reshape(len(ids), count)
        inside = occ >= LEVEL
        # only an outside to inside crossing is a hit, a ray starting
        # inside misses until it leaves and enters again
        entering = ~inside[:, :-1] & inside[:, 1:]
        hit = entering.any(axis=1)
        rows = np.nonzero(hit)[0]
        if len(rows):
            first = np.argmax(entering[rows], axis=1) + 1
            hit_t[ids[rows]] = _secant(
                field, origins[ids[rows]], forward,
                t[rows, first - 1], occ[rows, first - 1],
                t[rows, first], occ[rows, first], secant_iters)

    hits = np.nonzero(np.isfinite(hit_t))[0]
    if len(hits):
        points = origins[hits] + hit_t[hits, None] * forward
        rgb, normal, canonical = field.shade(points)
        rows, cols = np.unravel_index(hits, camera.shape)
        out.rgb[rows, cols] = np.asarray(rgb)
        out.normal[rows, cols] = np.asarray(normal)
        out.canonical[rows, cols] = np.asarray(canonical)
        out.points[rows, cols] = points
        out.mask[rows, cols] = True
        out.depth[rows, cols] = hit_t[hits]
    return out


def _secant(field, origins, forward, t_a, f_a, t_b, f_b, iterations):
    """ Bracketed secant refinement of occ(t) = 0.5 """
    f_a = f_a - LEVEL
    f_b = f_b - LEVEL
    t_best = t_b.copy()
    for _ in range(iterations):
        denom = f_b - f_a
        safe = np.where(np.abs(denom) > 1e-300, denom, 1.0)
        t_new = np.where(np.abs(denom) > 1e-300,
                         t_a - f_a * (t_b - t_a) / safe, 0.5 * (t_a + t_b))
        points = origins + t_new[:, None] * forward
        f_new = np.asarray(field.occupancy(points),
                           dtype=np.float64) - LEVEL
        t_best = t_new
        outside = f_new < 0
        t_a = np.where(outside, t_new, t_a)
        f_a = np.where(outside, f_new, f_a)
        t_b = np.where(outside, t_b, t_new)
        f_b = np.where(outside, f_b, f_new)
    return t_best


def render_scan(scan, camera, background=1.0):
    """ Rasterize a coloured mesh with barycentric interpolation

    Nearer surfaces win the depth test, equal depths keep the first face.
    """
    mesh = scan.mesh if isinstance(scan, Scan) else scan
    if mesh.normals is None:
        mesh = mesh.with_normals()
    out = RenderOut.blank(camera.shape, background)
    if mesh.is_empty:
        return out
    h, w = camera.shape
    column, row, t = camera.project(mesh.vertices)
    face_of_pixel = np.full((h, w), -1, dtype=np.int64)
    bary_of_pixel = np.zeros((h, w, 3))

    for f, (a, b, c) in enumerate(mesh.faces):
        xs = column[[a, b, c]]
        ys = row[[a, b, c]]
        c0 = max(int(np.ceil(xs.min())), 0)
        c1 = min(int(np.floor(xs.max())), w - 1)
        r0 = max(int(np.ceil(ys.min())), 0)
        r1 = min(int(np.floor(ys.max())), h - 1)
        if c0 > c1 or r0 > r1:
            continue
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) \
            - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(area) < 1e-14:
            continue
        px, py = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
        w0 = ((xs[1] - px) * (ys[2] - py) - (xs[2] - px) * (ys[1] - py)) \
            / area
        w1 = ((xs[2] - px) * (ys[0] - py) - (xs[0] - px) * (ys[2] - py)) \
            / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12)
        if not inside.any():
            continue
        depth = w0 * t[a] + w1 * t[b] + w2 * t[c]
        py, px = py[inside], px[inside]
        depth = depth[inside]
        closer = depth < out.depth[py, px]
        py, px = py[closer], px[closer]
        out.depth[py, px] = depth[closer]
        face_of_pixel[py, px] = f
        bary_of_pixel[py, px] = np.stack(
            [w0[inside][closer], w1[inside][closer], w2[inside][closer]], -1)

    rows, cols = np.nonzero(face_of_pixel >= 0)
    faces = face_of_pixel[rows, cols]
    bary = bary_of_pixel[rows, cols]
    out.mask[rows, cols] = True
    out.points[rows, cols] = mesh.interpolate(mesh.vertices, faces, bary)
    normal = mesh.interpolate(mesh.normals, faces, bary)
    out.normal[rows, cols] = normal / np.maximum(
        np.linalg.norm(normal, axis=1, keepdims=True), 1e-300)
    if mesh.has_colors:
        out.rgb[rows, cols] = mesh.interpolate(mesh.colors, faces, bary)
    else:
        out.rgb[rows, cols] = 0.5
    return out


def save_render_png(out, prefix):
    """ Write <prefix>_rgb.png, <prefix>_normal.png and <prefix>_mask.png

    Normals are stored as (n + 1) / 2.
    """
    directory = os.path.dirname(prefix)
    if directory:
        os.makedirs(directory, exist_ok=True)
    paths = []
    images = {
        "rgb": out.rgb,
        "normal": np.where(out.mask[..., None], (out.normal + 1.0) / 2.0,
                           0.5),
        "mask": out.mask.astype(np.float64),
    }
    for key, image in images.items():
        data = np.clip(np.round(np.nan_to_num(image) * 255.0), 0, 255)
        path = f"{prefix}_{key}.png"
        Image.fromarray(data.astype(np.uint8)).save(path)
        paths.append(path)
    return paths
