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

# Small streaming xml writer: elements are context managers that write
# their start tag on enter and their end tag on exit, nothing is buffered

from xml.sax.saxutils import escape, quoteattr

_DEFAULT_INDENTATION = 2


class _Element:

    def __init__(self, fd, doc, name, attrs, indent, level):
        """ One open element
        Keyword arguments:
            fd     - output file-like writable object
            doc    - owning document
            name   - tag name
            attrs  - attribute mapping, values are converted with str
            indent - put children on their own indented line
            level  - indentation of this element's children
        """
        self.fd = fd
        self.doc = doc
        self.name = name
        self.attrs = attrs
        self.indent = indent
        self.level = level
        self.opened = False

    def element(self, name, attrs=None):
        """ Child whose content is laid out on indented lines """
        return self._child(name, attrs, True)

    def helement(self, name, attrs=None):
        """ Child kept on a single line """
        return self._child(name, attrs, False)

    def leaf(self, name, value, attrs=None):
        """ Write <name>value</name> in one go """
        with self.helement(name, attrs) as child:
            child.text(value)

    def text(self, value):
        """ Escaped character data """
        self._open()
        self.fd.write(escape(_format(value)))

    def _child(self, name, attrs, indent):
        self._open()
        level = self.level
        if self.doc.pretty and self.indent:
            self.fd.write("\n" + " " * self.level)
            level += self.doc.indentation
        return _Element(self.fd, self.doc, name, attrs or {}, indent, level)

    def _open(self):
        if not self.opened:
            self.fd.write(">")
            self.opened = True

    def __enter__(self):
        self.fd.write("<" + self.name)
        for key, value in self.attrs.items():
            self.fd.write(f" {key}={quoteattr(_format(value))}")
        return self

    def __exit__(self, type, value, traceback):
        if not self.opened:
            self.fd.write("/>")
            return
        if self.doc.pretty and self.indent:
            self.fd.write("\n" + " " * (self.level - self.doc.indentation))
        self.fd.write(f"</{self.name}>")


class _Document(_Element):
    """ Root of the output, writes the xml declaration """

    def __init__(self, fd, encoding, pretty, indentation):
        super().__init__(fd, self, "", {}, True, 0)
        self.encoding = encoding
        self.pretty = pretty
        self.indentation = indentation

    def __enter__(self):
        self.fd.write(f"<?xml version=\"1.0\" encoding=\"{self.encoding}\"?>")
        self.opened = True
        return self

    def __exit__(self, type, value, traceback):
        if self.pretty:
            self.fd.write("\n")


def _format(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def XMLWriter(fd, encoding="utf-8", pretty=True,
              indentation=_DEFAULT_INDENTATION):
    """ Document writing to fd
    Keyword arguments:
        fd          - object with a write(text) method
        encoding    - declared encoding, fd must honour it
        pretty      - indent nested elements
        indentation - spaces per nesting level
    """
    return _Document(fd, encoding, pretty, indentation)
