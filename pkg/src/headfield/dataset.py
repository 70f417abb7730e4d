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

""" Synthetic scan datasets

Layout of a dataset directory:

    manifest.json          every file with its SHA-256
    config.json            resolved configuration of the synthesis
    model.npz              template model the scans were posed with
    train/<scan>/          mesh.ply, params.json and samples.npz
    holdout/<scan>/        same, subjects never seen in training
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from . errors import ContractViolationError, InvalidArgumentError
from . geomio import cached_samples, load_samples, load_scan, save_scan
from . headmodel import (JAW, N_PSI, HeadParams, build_template_model,
                         canonical_theta, load_template_model,
                         make_synthetic_scan, save_template_model)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MANIFEST_VERSION = "headfield-dataset/1"
MODEL_FILE = "model.npz"
SAMPLES_FILE = "samples.npz"
SPLITS = ("train", "holdout")


@dataclass
class Dataset:
    """ Scans of one split with their template model """
    root: str
    model: object
    scans: list = field(default_factory=list)
    split: str = "train"
    # directory name of each scan
    names: list = field(default_factory=list)

    @property
    def subject_ids(self):
        """ Distinct subjects in first appearance order """
        seen = []
        for scan in self.scans:
            if scan.subject_id not in seen:
                seen.append(scan.subject_id)
        return seen

    def __len__(self):
        return len(self.scans)


def subject_name(split, index):
    return f"{'s' if split == 'train' else 'h'}{index:03d}"


def random_params(model, rng, config, jaw_canonical, neutral=False):
    """ Head parameters of one synthetic expression

    A neutral expression keeps the canonical pose and psi = 0.
    """
    beta = rng.normal(0.0, config.beta_scale, size=model.n_beta)
    theta = canonical_theta(jaw_canonical).numpy().copy()
    psi = np.zeros(N_PSI)
    if not neutral:
        theta[3:6] = rng.uniform(-config.neck_max, config.neck_max, 3)
        theta[3 * JAW] = rng.uniform(0.0, config.jaw_max)
        psi = rng.normal(0.0, config.psi_scale, size=N_PSI)
    return beta, theta, psi


def synthesize_dataset(config, directory, force=False):
    """ Write the train and holdout splits of config.data to directory

    Subject i of a split shares its shape and texture across expressions;
    its first expression is the neutral canonical pose.

    Keyword arguments:
        config - RunConfig
        directory - output, must be missing or empty unless force
        force - allow writing into a non-empty directory
    Returns the training Dataset.
    """
    data = config.data
    data.validate()
    if os.path.isdir(directory) and os.listdir(directory) and not force:
        raise InvalidArgumentError(
            f"{directory} is not empty, use --force to overwrite")
    os.makedirs(directory, exist_ok=True)
    model = build_template_model(config.headmodel)
    save_template_model(model, os.path.join(directory, MODEL_FILE))
    config.write_snapshot(directory)

    counts = (data.near_points, data.uniform_points, data.surface_points)
    splits = {}
    for split, n_subjects in (("train", data.n_subjects),
                              ("holdout", data.n_holdout)):
        rng = np.random.default_rng([data.seed, SPLITS.index(split)])
        scans, names = [], []
        for s in tqdm(range(n_subjects), desc=f"synthesize {split}",
                      disable=not logger.isEnabledFor(logging.INFO)):
            subject = subject_name(split, s)
            texture_seed = int(rng.integers(2 ** 31))
            beta = None
            for e in range(data.n_expressions):
                b, theta, psi = random_params(model, rng, data,
                                              config.deform.canonical_jaw,
                                              neutral=e == 0)
                beta = b if beta is None else beta
                params = HeadParams(beta, theta, psi)
                scan = make_synthetic_scan(model, params, texture_seed,
                                           subject)
                scan_dir = os.path.join(directory, split, f"{subject}_e{e}")
                save_scan(scan, scan_dir)
                scan.samples = cached_samples(
                    scan, os.path.join(scan_dir, SAMPLES_FILE),
                    int(rng.integers(2 ** 31)), counts, data.near_sigma)
                scans.append(scan)
                names.append(f"{subject}_e{e}")
        splits[split] = (scans, names)
    write_manifest(directory)
    logger.info("synthesized %d training and %d holdout scans in %s",
                len(splits["train"][0]), len(splits["holdout"][0]), directory)
    scans, names = splits["train"]
    return Dataset(directory, model, scans, "train", names)


def file_digest(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fd:
        for block in iter(lambda: fd.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(directory):
    """ manifest.json listing every file below directory with its hash """
    files = {}
    for root, _, names in os.walk(directory):
        for name in sorted(names):
            path = os.path.join(root, name)
            rel = os.path.relpath(path, directory).replace(os.sep, "/")
            if rel == MANIFEST:
                continue
            files[rel] = file_digest(path)
    manifest = {"format_version": MANIFEST_VERSION,
                "files": dict(sorted(files.items()))}
    path = os.path.join(directory, MANIFEST)
    with open(path, "w") as fd:
        json.dump(manifest, fd, indent=2, sort_keys=True)
    return path


def read_manifest(directory):
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise InvalidArgumentError(f"{directory} has no {MANIFEST}")
    with open(path) as fd:
        manifest = json.load(fd)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise InvalidArgumentError(
            f"{path}: unsupported dataset version "
            f"{manifest.get('format_version')}")
    return manifest


def verify_manifest(directory):
    """ Raise ContractViolationError on a missing or modified file """
    for rel, expected in read_manifest(directory)["files"].items():
        path = os.path.join(directory, *rel.split("/"))
        if not os.path.exists(path):
            raise ContractViolationError(f"dataset file {rel} is missing")
        if file_digest(path) != expected:
            raise ContractViolationError(f"dataset file {rel} was modified")


def load_dataset(directory, split="train", verify=False, samples=True):
    """ Dataset of one split, scans in directory order

    Keyword arguments:
        verify - check every file against the manifest first
        samples - attach the cached training samples
    """
    if split not in SPLITS:
        raise InvalidArgumentError(f"unknown split {split}")
    read_manifest(directory)
    if verify:
        verify_manifest(directory)
    model = load_template_model(os.path.join(directory, MODEL_FILE))
    split_dir = os.path.join(directory, split)
    scans = []
    names = sorted(os.listdir(split_dir)) if os.path.isdir(split_dir) else []
    for name in names:
        scan_dir = os.path.join(split_dir, name)
        scan = load_scan(scan_dir)
        if samples:
            scan.samples = _load_cached(scan_dir)
        scans.append(scan)
    logger.info("loaded %d %s scans from %s", len(scans), split, directory)
    return Dataset(directory, model, scans, split, names)


def _load_cached(scan_dir):
    samples = load_samples(os.path.join(scan_dir, SAMPLES_FILE))
    if samples is None:
        raise ContractViolationError(f"{scan_dir} has no sample cache")
    return samples
