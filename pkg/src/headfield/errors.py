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

""" Exceptions raised by headfield

Soft failures such as a correspondence that does not converge or an empty
iso-surface are returned as values. Everything below is a hard failure.
"""


class HeadFieldError(Exception):
    """ Base class of every headfield error """

    # Process exit status used by the command line
    exit_code = 1


class InvalidArgumentError(HeadFieldError, ValueError):
    """ Caller passed arguments of wrong shape, range or kind """

    exit_code = 2


class ContractViolationError(HeadFieldError):
    """ A documented precondition does not hold """

    exit_code = 3


class UnavailableStateError(HeadFieldError):
    """ Operation needs state that has not been produced yet """

    exit_code = 3


class NumericFailureError(HeadFieldError):
    """ NaN, divergence or other numeric breakdown

    Keyword arguments:
        dump_path - file holding diagnostic data written before raising
    """

    exit_code = 4

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


def check_shape(name, array, shape):
    """ Raise InvalidArgumentError unless array has the given shape
    None entries in shape match any size
    """
    actual = tuple(array.shape)
    if len(actual) != len(shape) or any(
            s is not None and s != a for s, a in zip(shape, actual)):
        raise InvalidArgumentError(
            f"{name}: expected shape {shape}, got {actual}")
