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

""" AMF export of extracted heads

The document is streamed to a temporary xml file and stored deflated in a
zip archive under the name <stem>.amf, the usual packaging of AMF.
"""

import logging
import os
import tempfile
from zipfile import ZIP_DEFLATED, ZipFile

import numpy as np
from mathutils import Matrix

from . errors import InvalidArgumentError
from . fastxml import XMLWriter

logger = logging.getLogger(__name__)

AMF_VERSION = "1.1"

# Canonical box units are treated as meters
UNIT_CONVERSION = {
    "meter": 1,
    "millimeter": 1e3,
    "micron": 1e6,
    "inch": 39.37008,
    "feet": 3.28084,
}


def compute_scaling(target_unit):
    """ Returns (unit, scale, 4x4 scaling Matrix) for target_unit
    Unknown units raise InvalidArgumentError
    """
    if target_unit not in UNIT_CONVERSION:
        raise InvalidArgumentError(
            f"unknown unit {target_unit}, expected one of "
            f"{', '.join(UNIT_CONVERSION)}")
    scale = UNIT_CONVERSION[target_unit]
    return target_unit, scale, Matrix.Scale(scale, 4)


def transform_vertices(vertices, matrix):
    """ Apply a mathutils 4x4 matrix to vertices [N, 3] """
    rows = np.array([list(row) for row in matrix], dtype=np.float64)
    vertices = np.asarray(vertices, dtype=np.float64)
    return vertices @ rows[:3, :3].T + rows[:3, 3]


def write_document(xml, meshes, unit, scale, matrix):
    """ Write the <amf> element for a list of (name, Mesh) """
    with xml.element("amf", {"unit": unit, "version": AMF_VERSION}) as root:
        with root.helement("metadata", {"type": "producer"}) as meta:
            meta.text("headfield")
        with root.helement("metadata", {"type": "scale"}) as meta:
            meta.text(scale)
        for object_id, (name, mesh) in enumerate(meshes):
            with root.element("object", {"id": object_id}) as xobj:
                with xobj.helement("metadata", {"type": "name"}) as meta:
                    meta.text(name)
                write_mesh(xobj, mesh, matrix)


def write_mesh(xml, mesh, matrix):
    vertices = transform_vertices(mesh.vertices, matrix)
    colors = mesh.colors if mesh.has_colors else None
    with xml.element("mesh") as xmesh:
        with xmesh.element("vertices") as xvs:
            for i, vertex in enumerate(vertices):
                with xvs.helement("vertex") as xv:
                    with xv.helement("coordinates") as xc:
                        for axis, value in zip("xyz", vertex):
                            xc.leaf(axis, float(value))
                    if colors is not None:
                        with xv.helement("color") as xcol:
                            for channel, value in zip("rgb", colors[i]):
                                xcol.leaf(channel, float(value))
        with xmesh.element("volume") as xvo:
            for face in mesh.faces:
                with xvo.helement("triangle") as xt:
                    for key, index in zip(("v1", "v2", "v3"), face):
                        xt.leaf(key, int(index))


def export_amf(meshes, path, unit="millimeter"):
    """ Write meshes to a zipped AMF file

    Keyword arguments:
        meshes - a Mesh or a list of (name, Mesh)
        path   - output .amf path
        unit   - one of UNIT_CONVERSION
    """
    if not isinstance(meshes, (list, tuple)):
        meshes = [(os.path.splitext(os.path.basename(path))[0], meshes)]
    for name, mesh in meshes:
        if mesh.is_empty:
            raise InvalidArgumentError(f"mesh {name} is empty")
    unit, scale, matrix = compute_scaling(unit)
    stem = os.path.splitext(os.path.basename(path))[0]
    with tempfile.TemporaryDirectory() as tmp:
        xml_path = os.path.join(tmp, f"{stem}.xml")
        with open(xml_path, "w", encoding="utf-8") as fd:
            with XMLWriter(fd, "utf-8") as xml:
                write_document(xml, meshes, unit, scale, matrix)
        with ZipFile(path, "w", ZIP_DEFLATED) as archive:
            archive.write(xml_path, arcname=f"{stem}.amf")
    logger.info("wrote %s (%d objects, unit %s)", path, len(meshes), unit)
    return path
