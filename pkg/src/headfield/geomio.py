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

""" Scan input and output, supervision sampling, iso-surface extraction
and evaluation metrics
"""

import json
import logging
import os

import numpy as np
import trimesh
from scipy.spatial import cKDTree
from skimage import measure

from . errors import ContractViolationError, InvalidArgumentError
from . geometry import ClosestPointQuery, ray_parity, winding_number
from . headmodel import HeadParams
from . mesh import Mesh, SampleSet, Scan

logger = logging.getLogger(__name__)

SAMPLES_VERSION = "headfield-samples/1"
MESH_FORMATS = ("obj", "ply")

# Occupancy threshold shared by labelling and extraction
LEVEL = 0.5


def label_occupancy(scan, points, mode="winding"):
    """ Inside (1) or outside (0) label of each point

    winding: generalized winding number, a point counts as inside when
    the number is >= 0.5. parity: ray crossing count, only for watertight
    scans.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if mode == "parity":
        if not scan.watertight:
            raise ContractViolationError(
                "parity labelling needs a watertight scan")
        return ray_parity(scan.vertices, scan.faces, points).astype(np.uint8)
    if mode != "winding":
        raise InvalidArgumentError(f"unknown labelling mode {mode}")
    winding = winding_number(scan.vertices, scan.faces, points)
    return (winding >= LEVEL).astype(np.uint8)


def sample_training_points(scan, rng, near=2048, uniform=1229, surface=819,
                           sigma=0.01):
    """ Occupancy and surface supervision for one scan

    Keyword arguments:
        near - surface samples jittered by a Gaussian of std sigma
        uniform - samples uniform in the bounding box grown by 10%
        surface - on-surface samples carrying colour and normal
    """
    if min(near, uniform, surface) < 0:
        raise InvalidArgumentError("sample counts must be >= 0")
    mesh = scan.mesh
    if mesh.normals is None:
        mesh = mesh.with_normals()
    bbox = scan.bbox
    center = bbox.mean(axis=0)
    half = 0.55 * (bbox[1] - bbox[0])

    near_points = mesh.sample_surface(near, rng)[0] \
        + rng.normal(0.0, sigma, size=(near, 3))
    uniform_points = center + rng.uniform(-1.0, 1.0, size=(uniform, 3)) * half
    points = np.concatenate([near_points, uniform_points])
    occ = label_occupancy(scan, points)

    surface_points, face_ids, bary = mesh.sample_surface(surface, rng)
    if mesh.has_colors:
        colors = mesh.interpolate(mesh.colors, face_ids, bary)
    else:
        colors = np.zeros((surface, 3))
    normals = mesh.interpolate(mesh.normals, face_ids, bary)
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True),
                          1e-300)
    return SampleSet(points, occ, surface_points, colors, normals, bbox)


def samples_key(scan, seed, counts):
    return {"scan_hash": scan.content_hash(), "seed": int(seed),
            "counts": [int(c) for c in counts]}


def save_samples(path, samples, key):
    """ Versioned sample cache next to a scan """
    np.savez(path, version=np.array(SAMPLES_VERSION),
             key=np.array(json.dumps(key, sort_keys=True)),
             points=samples.points, occ_gt=samples.occ_gt,
             surface_points=samples.surface_points,
             color_gt=samples.color_gt, normal_gt=samples.normal_gt,
             bbox=samples.bbox)
    return path


def load_samples(path, key=None):
    """ Cached SampleSet, or None when missing or built for another key """
    if not os.path.exists(path):
        return None
    with np.load(path, allow_pickle=False) as data:
        if str(data["version"]) != SAMPLES_VERSION:
            logger.info("ignoring sample cache %s: old version", path)
            return None
        if key is not None and \
                json.loads(str(data["key"])) != json.loads(
                    json.dumps(key, sort_keys=True)):
            logger.info("ignoring sample cache %s: key mismatch", path)
            return None
        return SampleSet(data["points"], data["occ_gt"],
                         data["surface_points"], data["color_gt"],
                         data["normal_gt"], data["bbox"])


def cached_samples(scan, path, seed, counts, sigma=0.01):
    """ Load samples from path or draw and store them """
    key = samples_key(scan, seed, counts)
    samples = load_samples(path, key)
    if samples is None:
        samples = sample_training_points(
            scan, np.random.default_rng(seed), *counts, sigma=sigma)
        save_samples(path, samples, key)
    return samples


def grid_points(bbox, resolution):
    """ Regular grid over bbox [2, 3], shape [resolution^3, 3] """
    bbox = np.asarray(bbox, dtype=np.float64)
    axes = [np.linspace(bbox[0, k], bbox[1, k], resolution) for k in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)


def marching_cubes(field, bbox, resolution, chunk=65536):
    """ Triangle mesh of the 0.5 level set of an occupancy evaluator

    field maps points [N, 3] to occupancy [N]. Faces are oriented
    outward (positive signed volume). A field with no crossing gives an
    empty mesh.
    """
    if resolution < 8:
        raise InvalidArgumentError("resolution must be >= 8")
    bbox = np.asarray(bbox, dtype=np.float64)
    points = grid_points(bbox, resolution)
    values = np.empty(len(points))
    for start in range(0, len(points), chunk):
        values[start:start + chunk] = np.asarray(
            field(points[start:start + chunk]), dtype=np.float64)
    volume = values.reshape(resolution, resolution, resolution)
    if not (volume.min() < LEVEL < volume.max()):
        return Mesh.empty()
    spacing = tuple((bbox[1] - bbox[0]) / (resolution - 1))
    vertices, faces, _, _ = measure.marching_cubes(
        volume, level=LEVEL, spacing=spacing, allow_degenerate=False)
    mesh = Mesh(vertices + bbox[0], faces).remove_degenerate_faces()
    if signed_volume(mesh) < 0:
        mesh = Mesh(mesh.vertices, mesh.faces[:, ::-1])
    return mesh


def signed_volume(mesh):
    if mesh.is_empty:
        return 0.0
    tri = mesh.vertices[mesh.faces]
    return float(np.einsum("ij,ij->i", tri[:, 0],
                           np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def _surface_samples(mesh, count, seed):
    points, face_ids, bary = mesh.sample_surface(
        count, np.random.default_rng(seed))
    return points, face_ids, bary


def face_region_mask(face_points, radius=0.05):
    """ Selector of points within radius of a facial vertex set """
    tree = cKDTree(np.asarray(face_points, dtype=np.float64))

    def select(points):
        distance, _ = tree.query(points)
        return distance <= radius

    return select


def _masked_mean(values, mask):
    if mask is None:
        return float(values.mean()) if len(values) else float("nan")
    if not mask.any():
        return float("nan")
    return float(values[mask].mean())


def _fscore(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2.0 * (precision * recall) / (precision + recall)


def chamfer_and_fscore(mesh_a, mesh_b, tau=0.05, samples=10000, seed=0,
                       region=None):
    """ Symmetric Chamfer distance and F-score at tau, in percent

    Both meshes are sampled area-uniformly with the same seed and each
    sample is measured against the other surface. region optionally
    selects the samples taking part.
    """
    if mesh_a.is_empty or mesh_b.is_empty:
        raise InvalidArgumentError("cannot compare an empty mesh")
    points_a = _surface_samples(mesh_a, samples, seed)[0]
    points_b = _surface_samples(mesh_b, samples, seed)[0]
    d_ab = ClosestPointQuery(mesh_b.vertices, mesh_b.faces).query(
        points_a)[3]
    d_ba = ClosestPointQuery(mesh_a.vertices, mesh_a.faces).query(
        points_b)[3]
    return _chamfer_fscore(points_a, d_ab, points_b, d_ba, tau, region)


def point_chamfer_and_fscore(points_a, points_b, tau=0.05, region=None):
    """ Point cloud version of chamfer_and_fscore """
    points_a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    points_b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(points_a) == 0 or len(points_b) == 0:
        raise InvalidArgumentError("cannot compare an empty point cloud")
    d_ab = cKDTree(points_b).query(points_a)[0]
    d_ba = cKDTree(points_a).query(points_b)[0]
    return _chamfer_fscore(points_a, d_ab, points_b, d_ba, tau, region)


def _chamfer_fscore(points_a, d_ab, points_b, d_ba, tau, region):
    mask_a = None if region is None else region(points_a)
    mask_b = None if region is None else region(points_b)
    mean_ab = _masked_mean(d_ab, mask_a)
    mean_ba = _masked_mean(d_ba, mask_b)
    chamfer = 0.5 * (mean_ab + mean_ba)
    precision = _masked_mean((d_ab < tau).astype(np.float64), mask_a)
    recall = _masked_mean((d_ba < tau).astype(np.float64), mask_b)
    if np.isnan(precision) or np.isnan(recall):
        return chamfer, float("nan")
    return chamfer, _fscore(precision, recall)


def color_distance(mesh_a, mesh_b, samples=10000, seed=0, region=None):
    """ Symmetric mean absolute RGB difference, scaled by 100

    Each sample's colour is compared with the colour interpolated at its
    nearest point on the other surface.
    """
    if not (mesh_a.has_colors and mesh_b.has_colors):
        raise InvalidArgumentError("color distance needs coloured meshes")
    if mesh_a.is_empty or mesh_b.is_empty:
        raise InvalidArgumentError("cannot compare an empty mesh")
    one_way = []
    for source, target in ((mesh_a, mesh_b), (mesh_b, mesh_a)):
        points, face_ids, bary = _surface_samples(source, samples, seed)
        own = source.interpolate(source.colors, face_ids, bary)
        t_faces, t_bary, _, _ = ClosestPointQuery(
            target.vertices, target.faces).query(points)
        other = target.interpolate(target.colors, t_faces, t_bary)
        error = np.abs(own - other).mean(axis=1)
        one_way.append(_masked_mean(
            error, None if region is None else region(points)))
    return 100.0 * 0.5 * (one_way[0] + one_way[1])


def mesh_format(path):
    ext = os.path.splitext(path)[1].lower().lstrip(".")
    if ext not in MESH_FORMATS:
        raise InvalidArgumentError(f"unsupported mesh format {path}")
    return ext


def write_mesh(mesh, path, binary=True):
    """ Write OBJ or PLY with vertex colours and normals """
    ext = mesh_format(path)
    if mesh.normals is None and not mesh.is_empty:
        mesh = mesh.with_normals()
    tm = mesh.to_trimesh()
    if ext == "ply":
        data = tm.export(file_type="ply",
                         encoding="binary" if binary else "ascii",
                         vertex_normal=not mesh.is_empty)
    else:
        data = tm.export(file_type="obj", include_normals=True,
                         include_color=mesh.has_colors, include_texture=False)
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode) as fd:
        fd.write(data)
    return path


def read_mesh(path):
    """ Read OBJ or PLY keeping vertex order; normals recomputed if absent
    """
    mesh_format(path)
    tm = trimesh.load(path, process=False, force="mesh")
    colors = None
    if tm.visual.kind == "vertex":
        colors = np.asarray(tm.visual.vertex_colors, dtype=np.float64)[
            :, :3] / 255.0
    normals = np.asarray(tm.vertex_normals, dtype=np.float64) \
        if len(tm.faces) else None
    return Mesh(np.asarray(tm.vertices, dtype=np.float64),
                np.asarray(tm.faces, dtype=np.int64), colors, normals)


def save_scan(scan, directory, binary=True):
    """ Scan directory: mesh.ply and params.json """
    os.makedirs(directory, exist_ok=True)
    write_mesh(scan.mesh, os.path.join(directory, "mesh.ply"), binary)
    meta = {"subject_id": scan.subject_id, "watertight": bool(scan.watertight),
            "params": scan.params.to_dict() if scan.params is not None
            else None}
    with open(os.path.join(directory, "params.json"), "w") as fd:
        json.dump(meta, fd, indent=2, sort_keys=True)
    return directory


def load_scan(directory):
    """ Inverse of save_scan """
    mesh = read_mesh(os.path.join(directory, "mesh.ply"))
    with open(os.path.join(directory, "params.json")) as fd:
        meta = json.load(fd)
    params = HeadParams.from_dict(meta["params"]) if meta["params"] else None
    return Scan(mesh.vertices, mesh.faces, mesh.colors, mesh.normals, params,
                meta["subject_id"], watertight=meta["watertight"])
