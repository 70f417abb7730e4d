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

""" Neural primitives shared by the canonical and deformation fields

Everything runs in float64 on the CPU. Reverse mode gradients come from
torch autograd; GradTape pins a forward pass to the parameter versions it
was recorded with so a gradient is never taken through weights that have
moved since.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . errors import (ContractViolationError, InvalidArgumentError,
                      UnavailableStateError)
from . geometry import DTYPE

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "headfield-checkpoint/1"

ACTIVATIONS = ("softplus", "relu", "sine", "none", "sigmoid")


def activation(name, x, softplus_beta=100.0):
    """ Apply the activation called name """
    if name == "softplus":
        return F.softplus(x, beta=softplus_beta)
    if name == "relu":
        return F.relu(x)
    if name == "sine":
        return torch.sin(x)
    if name == "sigmoid":
        return torch.sigmoid(x)
    if name == "none":
        return x
    raise InvalidArgumentError(f"unknown activation {name}")


class Mlp(nn.Module):
    """ Fully connected network with an optional condition vector

    The condition is concatenated to the input and, when skip is set, to
    the hidden state entering layer skip together with the input.

    Keyword arguments:
        in_dim - size of the point input
        widths - hidden layer widths
        out_dim - output size
        cond_dim - condition size, 0 for none
        hidden_activation - activation of hidden layers
        out_activation - activation of the output layer
        skip - index of the layer receiving the input again
        softplus_beta - sharpness of the softplus activation
        last_scale - multiplier of the initial output layer weights
    """

    def __init__(self, in_dim, widths, out_dim, cond_dim=0,
                 hidden_activation="softplus", out_activation="none",
                 skip=None, softplus_beta=100.0, last_scale=1.0):
        super().__init__()
        if hidden_activation not in ACTIVATIONS \
                or out_activation not in ACTIVATIONS:
            raise InvalidArgumentError("unknown activation")
        self.in_dim = in_dim
        self.cond_dim = cond_dim
        self.out_dim = out_dim
        self.widths = tuple(widths)
        self.skip = skip
        self.softplus_beta = softplus_beta
        dims = (in_dim + cond_dim,) + self.widths + (out_dim,)
        layers = []
        for i in range(len(dims) - 1):
            fan_in = dims[i]
            if skip is not None and i == skip and i > 0:
                fan_in += in_dim + cond_dim
            layers.append(nn.Linear(fan_in, dims[i + 1], dtype=DTYPE))
        self.layers = nn.ModuleList(layers)
        self.activations = [hidden_activation] * len(self.widths) \
            + [out_activation]
        self.reset_parameters(last_scale)

    def reset_parameters(self, last_scale=1.0):
        """ Scaled Gaussian fan-in weights, zero biases """
        with torch.no_grad():
            for i, layer in enumerate(self.layers):
                std = math.sqrt(2.0 / layer.in_features)
                if self.activations[i] == "sine":
                    std = math.sqrt(1.0 / layer.in_features)
                layer.weight.normal_(0.0, std)
                layer.bias.zero_()
            self.layers[-1].weight.mul_(last_scale)

    @property
    def parameter_count(self):
        return sum((layer.in_features + 1) * layer.out_features
                   for layer in self.layers)

    def forward(self, x, condition=None, return_hidden=False):
        """ Output [N, out_dim], plus the last hidden state when asked """
        inputs = self._inputs(x, condition)
        h = inputs
        hidden = h
        for i, layer in enumerate(self.layers):
            if self.skip is not None and i == self.skip and i > 0:
                h = torch.cat([h, inputs], dim=-1)
            if i == len(self.layers) - 1:
                hidden = h
            h = activation(self.activations[i], layer(h), self.softplus_beta)
        if return_hidden:
            return h, hidden
        return h

    def _inputs(self, x, condition):
        if x.shape[-1] != self.in_dim:
            raise InvalidArgumentError(
                f"input has {x.shape[-1]} features, expected {self.in_dim}")
        if self.cond_dim == 0:
            if condition is not None and condition.shape[-1] != 0:
                raise InvalidArgumentError("network takes no condition")
            return x
        if condition is None or condition.shape[-1] != self.cond_dim:
            raise InvalidArgumentError(
                f"condition must have {self.cond_dim} features")
        if condition.dim() == 1:
            condition = condition.expand(x.shape[:-1] + (self.cond_dim,))
        return torch.cat([x, condition], dim=-1)


class FeatureVolume(nn.Module):
    """ Spatially varying features generated from a latent code

    A small dense generator maps the code to a cubic grid of feature
    vectors over [-1, 1]^3 which is sampled trilinearly. Grid node i along
    an axis sits at -1 + 2 i / (resolution - 1).
    """

    def __init__(self, code_dim, resolution=8, channels=32, hidden=32):
        super().__init__()
        self.resolution = resolution
        self.channels = channels
        self.generator = Mlp(code_dim, (hidden,), resolution ** 3 * channels,
                             hidden_activation="softplus", softplus_beta=1.0,
                             last_scale=0.1)

    def grid(self, code):
        """ Feature grid [channels, D, H, W] for one code """
        r = self.resolution
        values = self.generator(code.reshape(1, -1))
        return values.reshape(self.channels, r, r, r)

    def sample(self, grid, points):
        """ Trilinear features [N, channels] at points [N, 3] """
        coords = points.reshape(1, -1, 1, 1, 3).to(grid.dtype)
        out = F.grid_sample(grid[None], coords, mode="bilinear",
                            padding_mode="border", align_corners=True)
        return out.reshape(self.channels, -1).T

    def forward(self, code, points):
        return self.sample(self.grid(code), points)

    def node(self, i, j, k):
        """ Position of grid node (i, j, k) along (x, y, z) """
        step = 2.0 / (self.resolution - 1)
        return torch.tensor([-1 + i * step, -1 + j * step, -1 + k * step],
                            dtype=DTYPE)


class GradTape:
    """ One recorded forward pass, good for a single backward """

    def __init__(self, net, output, inputs):
        self.net = net
        self.output = output
        self.inputs = inputs
        self.versions = [p._version for p in net.parameters()]
        self.consumed = False

    @property
    def stale(self):
        if self.consumed:
            return True
        return any(p._version != v
                   for p, v in zip(self.net.parameters(), self.versions))


def mlp_forward(net, x, condition=None):
    """ Forward pass recording a GradTape

    Returns (output, tape). Gradients w.r.t. x and condition are
    available from backward.
    """
    x = x.detach().to(DTYPE).requires_grad_(True)
    inputs = {"x": x}
    if condition is not None:
        condition = condition.detach().to(DTYPE).requires_grad_(True)
        inputs["condition"] = condition
    output = net(x, condition)
    return output, GradTape(net, output, inputs)


def backward(tape, output_grad):
    """ Reverse mode gradients of <output, output_grad>

    Returns a dictionary with "params" (name to gradient) and one entry
    per recorded input.
    """
    if tape.stale:
        raise ContractViolationError(
            "gradient tape is stale: already used or parameters changed")
    tape.consumed = True
    names = [name for name, _ in tape.net.named_parameters()]
    params = [p for _, p in tape.net.named_parameters()]
    keys = list(tape.inputs)
    grads = torch.autograd.grad(
        tape.output, params + [tape.inputs[k] for k in keys],
        grad_outputs=output_grad.to(tape.output.dtype), allow_unused=True)
    result = {"params": {}}
    for name, p, g in zip(names, params, grads[:len(params)]):
        result["params"][name] = torch.zeros_like(p) if g is None else g
    for key, g in zip(keys, grads[len(params):]):
        result[key] = torch.zeros_like(tape.inputs[key]) if g is None else g
    return result


@dataclass
class AdamState:
    """ Moments and step count of the functional Adam update """
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """ One Adam update, returns (new params, new state)

    params and grads are matching lists of tensors; the inputs are not
    modified.
    """
    if len(params) != len(grads):
        raise InvalidArgumentError("params and grads differ in length")
    beta1, beta2 = betas
    m = state.m or [torch.zeros_like(p) for p in params]
    v = state.v or [torch.zeros_like(p) for p in params]
    step = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m_i, v_i in zip(params, grads, m, v):
        if p.shape != g.shape:
            raise InvalidArgumentError("gradient shape does not match")
        m_i = beta1 * m_i + (1 - beta1) * g
        v_i = beta2 * v_i + (1 - beta2) * g * g
        m_hat = m_i / (1 - beta1 ** step)
        v_hat = v_i / (1 - beta2 ** step)
        new_params.append(p - lr * m_hat / (torch.sqrt(v_hat) + eps))
        new_m.append(m_i)
        new_v.append(v_i)
    return new_params, AdamState(step, new_m, new_v)


def directional_check(fn, tensors, rng, step=1e-4):
    """ Relative error between autograd and central differences

    fn maps the list of tensors to a scalar. A random unit direction is
    drawn per tensor; the returned value compares the directional
    derivative from autograd to the central finite difference.
    """
    tensors = [t.detach().clone().requires_grad_(True) for t in tensors]
    directions = []
    for t in tensors:
        d = torch.as_tensor(rng.normal(size=tuple(t.shape)), dtype=t.dtype)
        directions.append(d / d.norm().clamp_min(1e-300))
    value = fn(tensors)
    grads = torch.autograd.grad(value, tensors, allow_unused=True)
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, directions)
                   if g is not None)
    with torch.no_grad():
        plus = fn([t + step * d for t, d in zip(tensors, directions)])
        minus = fn([t - step * d for t, d in zip(tensors, directions)])
    numeric = float(plus - minus) / (2 * step)
    scale = max(abs(analytic), abs(numeric), 1e-8)
    return abs(analytic - numeric) / scale


def parameter_digest(*modules):
    """ SHA-256 of every parameter and buffer, in registration order """
    digest = hashlib.sha256()
    for module in modules:
        for name, tensor in module.state_dict().items():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(
                tensor.detach().cpu().numpy()).tobytes())
    return digest.hexdigest()


def shape_manifest(modules):
    return {name: {key: list(value.shape)
                   for key, value in module.state_dict().items()}
            for name, module in modules.items()}


def save_checkpoint(path, modules, optimizers=None, extra=None):
    """ Write modules, optimizer states and extra data with a manifest

    Keyword arguments:
        path - output file
        modules - name to nn.Module
        optimizers - name to torch optimizer
        extra - JSON-like data and tensors stored as is
    """
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "manifest": shape_manifest(modules),
        "modules": {name: module.state_dict()
                    for name, module in modules.items()},
        "optimizers": {name: opt.state_dict()
                       for name, opt in (optimizers or {}).items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    logger.debug("saved checkpoint %s", path)
    return path


def load_checkpoint(path, modules, optimizers=None):
    """ Restore modules in place after checking the shape manifest

    Returns the extra dictionary.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise UnavailableStateError(f"checkpoint {path} does not exist")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ContractViolationError(
            f"{path}: unsupported checkpoint version "
            f"{payload.get('format_version')}")
    expected = shape_manifest(modules)
    for name in modules:
        if payload["manifest"].get(name) != expected[name]:
            raise ContractViolationError(
                f"{path}: parameter shapes of {name} do not match")
        modules[name].load_state_dict(payload["modules"][name])
    for name, opt in (optimizers or {}).items():
        if name in payload["optimizers"]:
            opt.load_state_dict(payload["optimizers"][name])
    return payload["extra"]
