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

from setuptools import setup, find_packages

setup(
    name="headfield",
    version="0.1.0",
    description="Generative animatable head avatars from raw scans",
    python_requires=">=3.9",
    packages=find_packages(where='src'),
    package_dir={"": "src"},
    install_requires=[
        "numpy",
        "scipy",
        "torch",
        "trimesh",
        "scikit-image",
        "Pillow",
        "tqdm",
        "mathutils<5; python_version < '3.13'",
        "mathutils; python_version >= '3.13'",
    ],
    entry_points={
        "console_scripts": ["headfield = headfield.cli:main"],
    },
)
