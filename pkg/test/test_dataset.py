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
import shutil

import numpy as np
import pytest

from headfield.dataset import (MANIFEST, load_dataset, read_manifest,
                               subject_name, synthesize_dataset,
                               verify_manifest)
from headfield.errors import ContractViolationError, InvalidArgumentError
from headfield.geometry import to_numpy
from headfield.headmodel import canonical_theta

from conftest import tiny_config


@pytest.fixture
def copy_dir(dataset_dir, tmp_path):
    """ Private copy of the session dataset, free to modify """
    directory = str(tmp_path / "copy")
    shutil.copytree(dataset_dir, directory)
    return directory


class Test_synthesize_dataset():
    """ Verifications of the synthetic dataset layout """

    def test_layout(self, dataset_dir):
        # Test
        train = sorted(os.listdir(os.path.join(dataset_dir, "train")))
        holdout = sorted(os.listdir(os.path.join(dataset_dir, "holdout")))
        # Check
        assert train == ["s000_e0", "s000_e1", "s001_e0", "s001_e1"]
        assert holdout == ["h000_e0", "h000_e1"]
        for name in ("manifest.json", "config.json", "model.npz"):
            assert os.path.exists(os.path.join(dataset_dir, name))
        for name in ("mesh.ply", "params.json", "samples.npz"):
            assert os.path.exists(
                os.path.join(dataset_dir, "train", "s000_e0", name))

    def test_manifest(self, dataset_dir):
        # Test
        manifest = read_manifest(dataset_dir)
        # Check
        assert "train/s001_e1/mesh.ply" in manifest["files"]
        assert "model.npz" in manifest["files"]
        assert MANIFEST not in manifest["files"]
        verify_manifest(dataset_dir)

    def test_neutral_first_expression(self, dataset_dir, config):
        # Test
        dataset = load_dataset(dataset_dir)
        # Check
        first, second = dataset.scans[0], dataset.scans[1]
        assert np.array_equal(to_numpy(first.params.psi), np.zeros(50))
        assert np.allclose(
            to_numpy(first.params.theta),
            to_numpy(canonical_theta(config.deform.canonical_jaw)))
        assert np.array_equal(to_numpy(first.params.beta),
                              to_numpy(second.params.beta))
        assert np.any(to_numpy(second.params.psi) != 0.0)

    def test_deterministic(self, dataset_dir, tmp_path):
        """ Meshes and parameters repeat; sample caches are zip files
        carrying timestamps """
        # Prepare
        directory = str(tmp_path / "again")
        # Test
        synthesize_dataset(tiny_config(), directory)
        # Check
        for name in ("mesh.ply", "params.json"):
            for scan in ("s000_e1", "s001_e0"):
                with open(os.path.join(dataset_dir, "train", scan,
                                       name), "rb") as a, \
                        open(os.path.join(directory, "train", scan,
                                          name), "rb") as b:
                    assert a.read() == b.read()

    def test_refuses_non_empty(self, tmp_path):
        # Prepare
        directory = tmp_path / "busy"
        directory.mkdir()
        (directory / "notes.txt").write_text("keep")
        # Test / Check
        with pytest.raises(InvalidArgumentError):
            synthesize_dataset(tiny_config(), str(directory))
        assert os.listdir(str(directory)) == ["notes.txt"]

    def test_subject_name(self):
        # Test / Check
        assert subject_name("train", 7) == "s007"
        assert subject_name("holdout", 12) == "h012"


class Test_load_dataset():
    """ Verifications of dataset loading and manifest checks """

    def test_splits(self, dataset_dir):
        # Test
        train = load_dataset(dataset_dir)
        holdout = load_dataset(dataset_dir, "holdout", verify=True)
        # Check
        assert len(train) == 4
        assert train.subject_ids == ["s000", "s001"]
        assert holdout.subject_ids == ["h000"]
        assert holdout.names == ["h000_e0", "h000_e1"]
        assert all(scan.samples is not None for scan in train.scans)
        assert all(scan.watertight for scan in train.scans)
        assert train.scans[0].samples.counts == (96 + 48, 48)

    def test_without_samples(self, dataset_dir):
        # Test
        dataset = load_dataset(dataset_dir, samples=False)
        # Check
        assert all(scan.samples is None for scan in dataset.scans)

    def test_unknown_split(self, dataset_dir):
        # Test / Check
        with pytest.raises(InvalidArgumentError):
            load_dataset(dataset_dir, "validation")

    def test_not_a_dataset(self, tmp_path):
        # Test / Check
        with pytest.raises(InvalidArgumentError):
            load_dataset(str(tmp_path))

    def test_modified_file(self, copy_dir):
        # Prepare
        path = os.path.join(copy_dir, "train", "s000_e0", "params.json")
        with open(path) as fd:
            params = json.load(fd)
        params["subject_id"] = "intruder"
        with open(path, "w") as fd:
            json.dump(params, fd)
        # Test / Check
        with pytest.raises(ContractViolationError):
            load_dataset(copy_dir, verify=True)
        assert len(load_dataset(copy_dir)) == 4

    def test_missing_file(self, copy_dir):
        # Prepare
        os.remove(os.path.join(copy_dir, "holdout", "h000_e1", "mesh.ply"))
        # Test / Check
        with pytest.raises(ContractViolationError):
            verify_manifest(copy_dir)

    def test_missing_sample_cache(self, copy_dir):
        # Prepare
        os.remove(os.path.join(copy_dir, "train", "s001_e0", "samples.npz"))
        # Test / Check
        with pytest.raises(ContractViolationError):
            load_dataset(copy_dir)

    def test_version(self, copy_dir):
        # Prepare
        path = os.path.join(copy_dir, MANIFEST)
        with open(path) as fd:
            manifest = json.load(fd)
        manifest["format_version"] = "other/9"
        with open(path, "w") as fd:
            json.dump(manifest, fd)
        # Test / Check
        with pytest.raises(InvalidArgumentError):
            read_manifest(copy_dir)
