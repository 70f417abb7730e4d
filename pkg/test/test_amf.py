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

import io
import os
import xml.etree.ElementTree as ET
from zipfile import ZipFile

import numpy as np
import pytest
import xmlschema
from mathutils import Matrix

from headfield.amf import compute_scaling, export_amf, transform_vertices
from headfield.errors import InvalidArgumentError
from headfield.fastxml import XMLWriter
from headfield.mesh import Mesh

AMF_SCHEMA = os.path.join(os.path.dirname(__file__), "amf.xsd")


def is_scaling_matrix(matrix):
    """ A scaling only matrix has non zero values on its diagonal """
    scaling = Matrix.Identity(4)
    scaling[0][0] = matrix[0][0]
    scaling[1][1] = matrix[1][1]
    scaling[2][2] = matrix[2][2]
    scaling[3][3] = matrix[3][3]
    return matrix == scaling


def read_amf(path):
    """ Text of the single xml document stored in an AMF archive """
    with ZipFile(path, 'r') as amffile:
        ziplist = amffile.infolist()
        assert len(ziplist) == 1
        assert ziplist[0].is_dir() is False
        return ziplist[0].filename, amffile.read(ziplist[0]).decode("utf-8")


class Test_compute_scaling():
    """ Verifications of compute_scaling """

    def test_compute_scaling_invalid(self):
        # Test / Check
        with pytest.raises(InvalidArgumentError):
            compute_scaling('ua')

    def test_compute_scaling_meter(self):
        # Test
        (target_unit, scale, matrix) = compute_scaling('meter')
        # Check
        assert target_unit == 'meter'
        assert scale == 1
        assert isinstance(matrix, Matrix) is True
        assert matrix == Matrix.Identity(4)

    def test_compute_scaling_inch(self):
        # Test
        (target_unit, scale, matrix) = compute_scaling('inch')
        # Check
        assert target_unit == 'inch'
        assert scale == 39.37008
        assert isinstance(matrix, Matrix) is True
        assert is_scaling_matrix(matrix) is True

    def test_transform_vertices(self):
        # Prepare
        vertices = np.array([[1.0, -2.0, 0.5], [0.0, 0.0, 0.0]])
        _, _, matrix = compute_scaling('millimeter')
        # Test
        out = transform_vertices(vertices, matrix)
        # Check
        assert np.allclose(out, vertices * 1000.0, rtol=0, atol=1e-9)


class Test_xml_writer():
    """ Verifications of the streaming xml writer """

    def test_nested_elements(self):
        # Prepare
        fd = io.StringIO()
        # Test
        with XMLWriter(fd, 'utf-8') as xml:
            with xml.element("root", {"a": 1}) as root:
                with root.helement("child") as child:
                    child.text("x < y & z")
                root.leaf("value", 0.25)
                with root.element("empty"):
                    pass
        # Check
        tree = ET.fromstring(fd.getvalue().encode("utf-8"))
        assert tree.tag == "root"
        assert tree.attrib == {"a": "1"}
        assert tree.find("child").text == "x < y & z"
        assert float(tree.find("value").text) == 0.25
        assert tree.find("empty") is not None
        assert "&lt;" in fd.getvalue()

    def test_quoted_attribute(self):
        # Prepare
        fd = io.StringIO()
        # Test
        with XMLWriter(fd, 'utf-8', pretty=False) as xml:
            with xml.helement("a", {"name": 'say "hi"'}):
                pass
        # Check
        tree = ET.fromstring(fd.getvalue().encode("utf-8"))
        assert tree.attrib["name"] == 'say "hi"'


class Test_export_amf():
    """ Verifications of the AMF archive """

    def test_export_single_mesh(self, tmp_path, sphere):
        # Prepare
        path = str(tmp_path / "head.amf")
        # Test
        export_amf(sphere, path, "millimeter")
        # Check
        name, text = read_amf(path)
        assert name == "head.amf"
        amf_schema = xmlschema.XMLSchema(AMF_SCHEMA)
        amf_schema.validate(io.BytesIO(text.encode("utf-8")))
        tree = ET.fromstring(text.encode("utf-8"))
        assert tree.attrib["unit"] == "millimeter"
        vertices = tree.findall("./object/mesh/vertices/vertex")
        triangles = tree.findall("./object/mesh/volume/triangle")
        assert len(vertices) == len(sphere.vertices)
        assert len(triangles) == len(sphere.faces)
        first = vertices[0].find("coordinates")
        x = float(first.find("x").text)
        assert x == pytest.approx(1000.0 * sphere.vertices[0, 0], abs=1e-9)
        assert vertices[0].find("color") is not None

    def test_export_several_objects(self, tmp_path, sphere, cube):
        # Prepare
        path = str(tmp_path / "pair.amf")
        # Test
        export_amf([("sphere", sphere), ("cube", cube)], path, "meter")
        # Check
        _, text = read_amf(path)
        amf_schema = xmlschema.XMLSchema(AMF_SCHEMA)
        amf_schema.validate(io.BytesIO(text.encode("utf-8")))
        tree = ET.fromstring(text.encode("utf-8"))
        objects = tree.findall("./object")
        assert [o.attrib["id"] for o in objects] == ["0", "1"]
        names = [o.find("metadata").text for o in objects]
        assert names == ["sphere", "cube"]
        # the cube has no colour
        assert objects[1].find("./mesh/vertices/vertex/color") is None

    def test_export_empty_mesh(self, tmp_path):
        # Test / Check
        with pytest.raises(InvalidArgumentError):
            export_amf(Mesh.empty(), str(tmp_path / "empty.amf"))
        assert not os.path.exists(str(tmp_path / "empty.amf"))

    def test_export_unknown_unit(self, tmp_path, cube):
        # Test / Check
        with pytest.raises(InvalidArgumentError):
            export_amf(cube, str(tmp_path / "cube.amf"), "parsec")
