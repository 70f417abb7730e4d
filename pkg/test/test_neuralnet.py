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

import numpy as np
import pytest
import torch

from headfield.errors import (ContractViolationError, InvalidArgumentError,
                              UnavailableStateError)
from headfield.geometry import DTYPE
from headfield.neuralnet import (AdamState, FeatureVolume, Mlp, adam_step,
                                 backward, directional_check, load_checkpoint,
                                 mlp_forward, parameter_digest,
                                 save_checkpoint)


def seeded(seed=0):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


class Test_mlp_forward():
    """ Verifications of the multilayer perceptron """

    def test_parameter_count(self):
        # Prepare
        seeded()
        net = Mlp(3, (16, 8), 2, cond_dim=4, skip=1)
        # Check
        expected = (7 + 1) * 16 + (16 + 7 + 1) * 8 + (8 + 1) * 2
        assert net.parameter_count == expected
        assert net.parameter_count == sum(p.numel() for p in net.parameters())

    def test_zero_weights(self):
        # Prepare
        seeded()
        net = Mlp(3, (), 2, out_activation="none")
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        # Test
        out = net(torch.ones(5, 3, dtype=DTYPE))
        # Check
        assert torch.equal(out, torch.zeros(5, 2, dtype=DTYPE))

    def test_identity_layer(self):
        # Prepare
        seeded()
        net = Mlp(3, (), 3)
        with torch.no_grad():
            net.layers[0].weight.copy_(torch.eye(3, dtype=DTYPE))
            net.layers[0].bias.zero_()
        x = torch.randn(4, 3, dtype=DTYPE)
        # Test
        out, _ = mlp_forward(net, x)
        # Check
        assert torch.equal(out.detach(), x)

    def test_condition_broadcast(self):
        # Prepare
        seeded()
        net = Mlp(3, (8,), 1, cond_dim=2)
        x = torch.randn(6, 3, dtype=DTYPE)
        code = torch.randn(2, dtype=DTYPE)
        # Test
        out = net(x, code)
        # Check
        assert out.shape == (6, 1)
        assert torch.equal(out, net(x, code.expand(6, 2)))

    def test_dimension_mismatch(self):
        # Prepare
        seeded()
        net = Mlp(3, (8,), 1, cond_dim=2)
        # Test / Check
        with pytest.raises(InvalidArgumentError):
            net(torch.zeros(4, 2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE))
        with pytest.raises(InvalidArgumentError):
            net(torch.zeros(4, 3, dtype=DTYPE))
        with pytest.raises(InvalidArgumentError):
            Mlp(3, (8,), 1, hidden_activation="tanh")

    def test_deterministic(self):
        # Prepare
        seeded()
        net = Mlp(3, (8, 8), 2, skip=1)
        x = torch.randn(10, 3, dtype=DTYPE)
        # Check
        assert torch.equal(net(x), net(x))


class Test_backward():
    """ Verifications of the reverse mode gradients """

    def test_linear_net(self):
        # Prepare
        seeded()
        net = Mlp(3, (), 2)
        x = torch.randn(4, 3, dtype=DTYPE)
        grad_out = torch.randn(4, 2, dtype=DTYPE)
        # Test
        _, tape = mlp_forward(net, x)
        grads = backward(tape, grad_out)
        # Check
        weight = net.layers[0].weight.detach()
        assert torch.allclose(grads["x"], grad_out @ weight, rtol=0,
                              atol=1e-14)
        assert torch.allclose(grads["params"]["layers.0.bias"],
                              grad_out.sum(0), rtol=0, atol=1e-14)

    def test_constant_head(self):
        # Prepare
        seeded()
        net = Mlp(3, (8,), 1)
        with torch.no_grad():
            net.layers[-1].weight.zero_()
        x = torch.randn(4, 3, dtype=DTYPE)
        # Test
        _, tape = mlp_forward(net, x)
        grads = backward(tape, torch.ones(4, 1, dtype=DTYPE))
        # Check
        assert torch.equal(grads["x"], torch.zeros(4, 3, dtype=DTYPE))

    @pytest.mark.parametrize("activation", ["softplus", "sine", "sigmoid"])
    def test_finite_differences(self, activation):
        # Prepare
        rng = seeded(3)
        net = Mlp(3, (16, 16, 16), 2, cond_dim=4, skip=2,
                  hidden_activation=activation, softplus_beta=10.0)
        x = torch.as_tensor(rng.normal(size=(5, 3)), dtype=DTYPE)
        code = torch.as_tensor(rng.normal(size=4), dtype=DTYPE)
        weights = torch.as_tensor(rng.normal(size=(5, 2)), dtype=DTYPE)
        names = [name for name, _ in net.named_parameters()]

        def fn(tensors):
            out = torch.func.functional_call(
                net, dict(zip(names, tensors[2:])), (tensors[0], tensors[1]))
            return (out * weights).sum()

        # Test
        error = directional_check(
            fn, [x, code] + [p.detach() for p in net.parameters()], rng)
        # Check
        assert error < 1e-4

    def test_stale_tape(self):
        # Prepare
        seeded()
        net = Mlp(3, (8,), 1)
        x = torch.randn(4, 3, dtype=DTYPE)
        grad_out = torch.ones(4, 1, dtype=DTYPE)
        _, used = mlp_forward(net, x)
        backward(used, grad_out)
        _, moved = mlp_forward(net, x)
        with torch.no_grad():
            net.layers[0].weight.add_(1.0)
        # Test / Check
        with pytest.raises(ContractViolationError):
            backward(used, grad_out)
        with pytest.raises(ContractViolationError):
            backward(moved, grad_out)


class Test_feature_volume():
    """ Verifications of the conditional feature grid """

    def test_nodes_are_exact(self):
        # Prepare
        seeded()
        volume = FeatureVolume(4, resolution=4, channels=3, hidden=5)
        code = torch.randn(4, dtype=DTYPE)
        grid = volume.grid(code)
        for i, j, k in ((0, 0, 0), (1, 2, 3), (3, 3, 0)):
            # Test
            features = volume.sample(grid, volume.node(i, j, k)[None])
            # Check
            assert torch.allclose(features[0], grid[:, k, j, i], rtol=0,
                                  atol=1e-7)

    def test_lipschitz(self):
        # Prepare
        rng = seeded()
        volume = FeatureVolume(4, resolution=4, channels=3, hidden=5)
        grid = volume.grid(torch.randn(4, dtype=DTYPE))
        points = torch.as_tensor(rng.uniform(-0.9, 0.9, (50, 3)),
                                 dtype=DTYPE)
        delta = 1e-6
        # Test
        a = volume.sample(grid, points)
        b = volume.sample(grid, points + delta)
        # Check
        bound = 3 * delta * grid.abs().max() * 3 * (4 - 1)
        assert float((a - b).abs().max()) <= float(bound)


class Test_adam_step():
    """ Verifications of the functional Adam update """

    def test_zero_grads(self):
        # Prepare
        params = [torch.ones(3, dtype=DTYPE)]
        state = AdamState()
        # Test
        for _ in range(3):
            new, state = adam_step(params, [torch.zeros(3, dtype=DTYPE)],
                                   state, lr=0.1)
        # Check
        assert torch.equal(new[0], params[0])
        assert torch.equal(state.m[0], torch.zeros(3, dtype=DTYPE))
        assert state.step == 3

    def test_constant_gradient(self):
        # Prepare
        g = torch.tensor([2.0, -0.5], dtype=DTYPE)
        params = [torch.zeros(2, dtype=DTYPE)]
        state = AdamState()
        lr = 1e-2
        # Test
        for _ in range(100):
            new, state = adam_step(params, [g], state, lr)
            step = new[0] - params[0]
            params = new
        # Check
        assert torch.allclose(step.abs(), torch.full((2,), lr, dtype=DTYPE),
                              rtol=1e-6, atol=0)

    def test_scalar_reference(self):
        # Prepare
        g, lr, b1, b2, eps = 0.3, 1e-3, 0.9, 0.999, 1e-8
        # Test
        new, state = adam_step([torch.tensor([1.0], dtype=DTYPE)],
                               [torch.tensor([g], dtype=DTYPE)],
                               AdamState(), lr)
        # Check
        m = (1 - b1) * g / (1 - b1)
        v = (1 - b2) * g * g / (1 - b2)
        expected = 1.0 - lr * m / (np.sqrt(v) + eps)
        assert float(new[0]) == pytest.approx(expected, abs=1e-15)
        assert state.step == 1

    def test_matches_torch_adam(self, rng):
        """ Same trajectory as torch.optim.Adam, step for step """
        # Prepare
        start = [torch.as_tensor(rng.normal(size=(4, 3)), dtype=DTYPE),
                 torch.as_tensor(rng.normal(size=5), dtype=DTYPE)]
        reference = [p.clone().requires_grad_(True) for p in start]
        optimizer = torch.optim.Adam(reference, lr=3e-2)
        params = [p.clone() for p in start]
        state = AdamState()
        for _ in range(25):
            grads = [torch.as_tensor(rng.normal(size=tuple(p.shape)),
                                     dtype=DTYPE) for p in start]
            # Test
            params, state = adam_step(params, grads, state, lr=3e-2)
            optimizer.zero_grad()
            for p, g in zip(reference, grads):
                p.grad = g.clone()
            optimizer.step()
            # Check
            for mine, theirs in zip(params, reference):
                assert torch.allclose(mine, theirs.detach(), rtol=0,
                                      atol=1e-12)
        assert state.step == 25

    def test_shape_mismatch(self):
        # Test / Check
        with pytest.raises(InvalidArgumentError):
            adam_step([torch.zeros(2)], [torch.zeros(3)], AdamState(), 0.1)


class Test_checkpoint():
    """ Verifications of save_checkpoint and load_checkpoint """

    def test_round_trip(self, tmp_path):
        # Prepare
        seeded(0)
        net = Mlp(3, (8,), 1)
        optimizer = torch.optim.Adam(net.parameters(), lr=0.1)
        net(torch.ones(2, 3, dtype=DTYPE)).sum().backward()
        optimizer.step()
        path = str(tmp_path / "net.pt")
        save_checkpoint(path, {"net": net}, {"adam": optimizer},
                        {"epoch": 3})
        seeded(1)
        other = Mlp(3, (8,), 1)
        other_opt = torch.optim.Adam(other.parameters(), lr=0.1)
        # Test
        extra = load_checkpoint(path, {"net": other}, {"adam": other_opt})
        # Check
        assert extra == {"epoch": 3}
        assert parameter_digest(other) == parameter_digest(net)
        assert other_opt.state_dict()["state"][0]["step"] == 1

    def test_shape_mismatch(self, tmp_path):
        # Prepare
        seeded()
        path = str(tmp_path / "net.pt")
        save_checkpoint(path, {"net": Mlp(3, (8,), 1)})
        # Test / Check
        with pytest.raises(ContractViolationError):
            load_checkpoint(path, {"net": Mlp(3, (4,), 1)})

    def test_missing(self, tmp_path):
        # Test / Check
        with pytest.raises(UnavailableStateError):
            load_checkpoint(str(tmp_path / "none.pt"), {})
