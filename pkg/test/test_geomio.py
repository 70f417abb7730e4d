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

import json
import os

import numpy as np
import pytest

from headfield.errors import ContractViolationError, InvalidArgumentError
from headfield.geometry import brute_force_closest
from headfield.geomio import (cached_samples, chamfer_and_fscore,
                              color_distance, face_region_mask, grid_points,
                              label_occupancy, load_samples, load_scan,
                              marching_cubes, mesh_format,
                              point_chamfer_and_fscore, read_mesh,
                              sample_training_points, save_scan,
                              signed_volume, write_mesh)
from headfield.headmodel import HeadParams
from headfield.mesh import Mesh, Scan


def as_scan(mesh, params=None, subject_id="sphere"):
    return Scan(mesh.vertices, mesh.faces, mesh.colors, mesh.normals, params,
                subject_id)


def half_open(mesh):
    """ The mesh without its upper faces """
    keep = mesh.vertices[mesh.faces].mean(axis=1)[:, 2] < 0.3
    return Mesh(mesh.vertices, mesh.faces[keep], mesh.colors)


class Test_label_occupancy():
    """ Verifications of inside / outside labels """

    def test_winding_and_parity_agree(self, sphere, rng):
        # Prepare
        scan = as_scan(sphere)
        points = rng.uniform(-0.6, 0.6, (200, 3))
        radius = np.linalg.norm(points, axis=1)
        points = points[(radius < 0.45) | (radius > 0.55)]
        # Test
        winding = label_occupancy(scan, points, "winding")
        parity = label_occupancy(scan, points, "parity")
        # Check
        assert winding.dtype == np.uint8
        assert np.array_equal(winding, parity)
        assert np.array_equal(
            winding, (np.linalg.norm(points, axis=1) < 0.5).astype(np.uint8))

    def test_parity_needs_watertight(self, sphere):
        # Prepare
        scan = as_scan(half_open(sphere))
        # Test / Check
        assert not scan.watertight
        with pytest.raises(ContractViolationError):
            label_occupancy(scan, np.zeros((1, 3)), "parity")

    def test_open_scan_winding(self, sphere):
        """ Deep inside a scan with a hole still counts as inside """
        # Prepare
        scan = as_scan(half_open(sphere))
        # Test
        labels = label_occupancy(scan, [[0.0, 0.0, -0.3], [0.0, 0.0, -0.9]])
        # Check
        assert labels.tolist() == [1, 0]

    def test_unknown_mode(self, sphere):
        # Test / Check
        with pytest.raises(InvalidArgumentError):
            label_occupancy(as_scan(sphere), np.zeros((1, 3)), "voxels")

    def test_vertex_order(self, sphere, rng):
        """ Renumbering the vertices does not change any label """
        # Prepare
        order = rng.permutation(len(sphere.vertices))
        inverse = np.argsort(order)
        shuffled = Mesh(sphere.vertices[order], inverse[sphere.faces])
        points = rng.uniform(-0.6, 0.6, (300, 3))
        # Test
        for mode in ("winding", "parity"):
            labels = label_occupancy(as_scan(shuffled), points, mode)
            # Check
            assert np.array_equal(
                labels, label_occupancy(as_scan(sphere), points, mode))


class Test_sample_training_points():
    """ Verifications of the supervision sampler """

    def test_counts_and_ranges(self, sphere):
        # Test
        samples = sample_training_points(as_scan(sphere),
                                         np.random.default_rng(0),
                                         near=100, uniform=50, surface=30)
        # Check
        assert samples.points.shape == (150, 3)
        assert samples.occ_gt.shape == (150,)
        assert set(np.unique(samples.occ_gt)) <= {0, 1}
        assert samples.surface_points.shape == (30, 3)
        assert np.all((samples.color_gt >= 0) & (samples.color_gt <= 1))
        assert np.allclose(np.linalg.norm(samples.normal_gt, axis=1), 1.0)
        assert np.allclose(np.linalg.norm(samples.surface_points, axis=1),
                           0.5, atol=0.01)
        assert samples.counts == (150, 30)

    def test_deterministic(self, sphere):
        # Test
        a = sample_training_points(as_scan(sphere), np.random.default_rng(4),
                                   10, 10, 10)
        b = sample_training_points(as_scan(sphere), np.random.default_rng(4),
                                   10, 10, 10)
        # Check
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.color_gt, b.color_gt)

    def test_negative_count(self, sphere):
        # Test / Check
        with pytest.raises(InvalidArgumentError):
            sample_training_points(as_scan(sphere), np.random.default_rng(0),
                                   near=-1)

    def test_cache(self, sphere, tmp_path):
        # Prepare
        scan = as_scan(sphere)
        path = str(tmp_path / "samples.npz")
        # Test
        first = cached_samples(scan, path, 3, (10, 5, 5))
        again = cached_samples(scan, path, 3, (10, 5, 5))
        other = load_samples(path, {"seed": 4})
        # Check
        assert os.path.exists(path)
        assert np.array_equal(first.points, again.points)
        assert np.array_equal(first.normal_gt, again.normal_gt)
        assert other is None
        assert load_samples(str(tmp_path / "none.npz")) is None


class Test_marching_cubes():
    """ Verifications of iso-surface extraction """

    def test_sphere(self, sphere_field):
        # Prepare
        bbox = np.array([[-0.6] * 3, [0.6] * 3])
        cell = 1.2 / 31
        # Test
        mesh = marching_cubes(sphere_field, bbox, 32)
        # Check
        radius = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(radius - 0.5).max() < 0.5 * cell
        assert mesh.is_watertight()
        assert signed_volume(mesh) == pytest.approx(4 / 3 * np.pi * 0.125,
                                                    rel=0.03)

    def test_sphere_closed(self, sphere_field):
        """ At resolution 64 the sphere is closed and within 1.5 cells """
        # Prepare
        bbox = np.array([[-0.6] * 3, [0.6] * 3])
        cell = 1.2 / 63
        # Test
        mesh = marching_cubes(sphere_field, bbox, 64)
        # Check
        radius = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(radius - 0.5).max() < 1.5 * cell
        assert mesh.is_watertight()
        assert mesh.euler_characteristic() == 2

    def test_empty_field(self):
        # Prepare
        bbox = np.array([[-1.0] * 3, [1.0] * 3])
        # Test
        mesh = marching_cubes(lambda p: np.zeros(len(p)), bbox, 8)
        # Check
        assert mesh.is_empty

    def test_low_resolution(self, sphere_field):
        # Test / Check
        with pytest.raises(InvalidArgumentError):
            marching_cubes(sphere_field, [[-1] * 3, [1] * 3], 4)

    def test_grid_points(self):
        # Test
        points = grid_points([[0, 0, 0], [1, 2, 3]], 3)
        # Check
        assert points.shape == (27, 3)
        assert np.array_equal(points[0], [0, 0, 0])
        assert np.array_equal(points[-1], [1, 2, 3])
        assert np.array_equal(points[1], [0, 0, 1.5])


def brute_chamfer(points_a, points_b, tau):
    """ Symmetric chamfer and F-score from full distance matrices """
    d = np.linalg.norm(points_a[:, None] - points_b[None], axis=2)
    d_ab, d_ba = d.min(axis=1), d.min(axis=0)
    precision, recall = (d_ab < tau).mean(), (d_ba < tau).mean()
    fscore = 0.0 if precision + recall == 0 else \
        100.0 * 2 * precision * recall / (precision + recall)
    return 0.5 * (d_ab.mean() + d_ba.mean()), fscore


class Test_metrics():
    """ Verifications of chamfer, F-score and colour distances """

    def test_point_chamfer_oracle(self, rng):
        # Prepare
        a = rng.normal(size=(150, 3))
        b = rng.normal(size=(120, 3)) + 0.05
        # Test
        chamfer, fscore = point_chamfer_and_fscore(a, b, tau=0.3)
        # Check
        expected_chamfer, expected_fscore = brute_chamfer(a, b, 0.3)
        assert chamfer == pytest.approx(expected_chamfer, abs=1e-12)
        assert fscore == pytest.approx(expected_fscore, abs=1e-9)

    def test_identical_meshes(self, sphere):
        # Test
        chamfer, fscore = chamfer_and_fscore(sphere, sphere, samples=500)
        # Check
        assert chamfer < 1e-12
        assert fscore == 100.0

    def test_symmetric(self, sphere, cube):
        # Prepare
        shifted = Mesh(sphere.vertices + 0.1, sphere.faces)
        # Test
        forward = chamfer_and_fscore(shifted, cube, tau=0.1, samples=400,
                                     seed=3)
        swapped = chamfer_and_fscore(cube, shifted, tau=0.1, samples=400,
                                     seed=3)
        # Check
        assert forward == swapped
        assert forward[0] > 0.0

    def test_mesh_chamfer_oracle(self, sphere, cube):
        # Prepare
        seed = 5
        points_a = sphere.sample_surface(
            300, np.random.default_rng(seed))[0]
        points_b = cube.sample_surface(300, np.random.default_rng(seed))[0]
        d_ab = brute_force_closest(cube.vertices, cube.faces, points_a)[2]
        d_ba = brute_force_closest(sphere.vertices, sphere.faces,
                                   points_b)[2]
        tau = 0.2
        # Test
        chamfer, fscore = chamfer_and_fscore(sphere, cube, tau=tau,
                                             samples=300, seed=seed)
        # Check
        assert chamfer == pytest.approx(0.5 * (d_ab.mean() + d_ba.mean()),
                                        abs=1e-12)
        precision, recall = (d_ab < tau).mean(), (d_ba < tau).mean()
        assert fscore == pytest.approx(
            100.0 * 2 * precision * recall / (precision + recall), abs=1e-9)

    def test_region(self, sphere):
        # Prepare
        nowhere = face_region_mask(np.array([[5.0, 5.0, 5.0]]), 0.1)
        front = face_region_mask(np.array([[0.0, 0.0, 0.5]]), 0.2)
        # Test
        empty = chamfer_and_fscore(sphere, sphere, samples=200,
                                   region=nowhere)
        local = chamfer_and_fscore(sphere, sphere, samples=200, region=front)
        # Check
        assert np.isnan(empty[0]) and np.isnan(empty[1])
        assert local[1] == 100.0

    def test_empty_mesh(self, sphere):
        # Test / Check
        with pytest.raises(InvalidArgumentError):
            chamfer_and_fscore(sphere, Mesh.empty())
        with pytest.raises(InvalidArgumentError):
            point_chamfer_and_fscore(np.zeros((0, 3)), np.zeros((2, 3)))

    def test_color_distance(self, cube):
        # Prepare
        dark = Mesh(cube.vertices, cube.faces,
                    np.full((len(cube.vertices), 3), 0.3))
        light = Mesh(cube.vertices, cube.faces,
                     np.full((len(cube.vertices), 3), 0.5))
        # Test
        same = color_distance(dark, dark, samples=200)
        shifted = color_distance(dark, light, samples=200)
        # Check
        assert same < 1e-12
        assert shifted == pytest.approx(20.0, abs=1e-9)

    def test_color_distance_needs_colors(self, cube, sphere):
        # Test / Check
        with pytest.raises(InvalidArgumentError):
            color_distance(cube, sphere)


class Test_mesh_files():
    """ Verifications of mesh and scan input / output """

    def test_mesh_format(self):
        # Test / Check
        assert mesh_format("a/b.PLY") == "ply"
        assert mesh_format("head.obj") == "obj"
        with pytest.raises(InvalidArgumentError):
            mesh_format("head.stl")

    def test_ply(self, sphere, tmp_path):
        # Prepare
        path = str(tmp_path / "sphere.ply")
        # Test
        write_mesh(sphere, path)
        again = read_mesh(path)
        # Check
        assert np.allclose(again.vertices, sphere.vertices, rtol=0,
                           atol=1e-6)
        assert np.array_equal(again.faces, sphere.faces)
        # 8-bit channels
        assert np.array_equal(again.colors,
                              np.round(sphere.colors * 255.0) / 255.0)

    def test_ply_colors_on_lattice(self, sphere, tmp_path):
        """ Colours already on the 8-bit lattice come back bit exact """
        # Prepare
        path = str(tmp_path / "sphere.ply")
        write_mesh(sphere, path)
        stored = read_mesh(path)
        again_path = str(tmp_path / "again.ply")
        # Test
        write_mesh(stored, again_path)
        again = read_mesh(again_path)
        # Check
        assert np.array_equal(again.colors, stored.colors)

    def test_scan(self, model, tmp_path):
        # Prepare
        params = HeadParams.canonical(model.n_beta)
        mesh = model.mesh()
        scan = Scan(mesh.vertices, mesh.faces,
                    np.full((model.n_vertices, 3), 0.5), None, params, "s007")
        directory = str(tmp_path / "s007")
        # Test
        save_scan(scan, directory)
        again = load_scan(directory)
        # Check
        assert again.subject_id == "s007"
        assert again.watertight
        assert again.params.to_dict() == params.to_dict()
        assert len(again.vertices) == model.n_vertices
        with open(os.path.join(directory, "params.json")) as fd:
            assert json.load(fd)["subject_id"] == "s007"
