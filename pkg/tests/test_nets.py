import numpy as np
import pytest
import torch

from conftest import zero_weights
from ugvae.errors import ContractError
from ugvae.nets import (LossNode, Mlp, MlpSpec, backward, gradient_check, init_bundle)
from ugvae.numerics import CategoricalDist, DiagGaussian, RngStream


def test_mnist_dims_bundle():
    b = init_bundle(784, 10, 20, 10, seed=0)
    assert len(b.theta_z) == 10
    assert b.phi_beta.in_features == 256 + 10
    assert b.phi_beta.spec.sizes == (266, 40)
    assert b.h.spec.sizes == (784, 256)
    assert b.phi_d.spec.sizes == (10, 256, 10)
    assert b.theta_x.spec.sizes == (30, 256, 784)


def test_init_is_seeded():
    a = init_bundle(16, 2, 2, 3, seed=5)
    b = init_bundle(16, 2, 2, 3, seed=5)
    c = init_bundle(16, 2, 2, 3, seed=6)
    for (na, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(pa, pb)
        if na.endswith("weight"):
            assert not torch.equal(pa, pc)
        else:
            assert not pa.any()


def test_init_glorot_bounds():
    b = init_bundle(784, 10, 20, 10, seed=0)
    w = b.h.layers[0].weight
    bound = (6.0 / (784 + 256)) ** 0.5
    assert float(w.abs().max()) <= bound
    assert float(w.abs().max()) > 0.95 * bound


def test_single_component_bundle():
    b = init_bundle(16, 2, 2, 1, seed=0)
    assert len(b.theta_z) == 1
    assert b.phi_beta.in_features == 257


def test_zero_weight_heads():
    b = zero_weights(init_bundle(16, 3, 2, 4, seed=0, dtype=torch.float64))
    q = b.phi_z(torch.zeros(256, dtype=torch.float64))
    assert isinstance(q, DiagGaussian)
    assert not q.mean.any() and not q.log_var.any()
    pi = b.phi_d(torch.ones(3, dtype=torch.float64))
    assert isinstance(pi, CategoricalDist)
    assert torch.allclose(pi.probs, torch.full((4,), 0.25, dtype=torch.float64))
    out = b.theta_x(torch.zeros(5, dtype=torch.float64))
    assert torch.equal(out, torch.full((16,), 0.5, dtype=torch.float64))


def test_split_gaussian_clamps_log_var():
    net = Mlp(MlpSpec((1, 2), head="split-gaussian")).double()
    with torch.no_grad():
        net.layers[0].weight.fill_(1000.0)
    out = net(torch.tensor([1.0], dtype=torch.float64))
    assert float(out.log_var) == 10.0


def test_spec_validation():
    with pytest.raises(ContractError):
        MlpSpec((4, 3), head="split-gaussian")
    with pytest.raises(ContractError):
        MlpSpec((4,))
    with pytest.raises(ContractError):
        MlpSpec((4, 2), hidden="gelu")


def test_width_mismatch():
    b = init_bundle(16, 2, 2, 2, seed=0)
    with pytest.raises(ContractError):
        b.h(torch.zeros(15))


def test_sigmoid_range():
    b = init_bundle(16, 2, 2, 2, seed=0, dtype=torch.float64)
    out = b.theta_x(torch.from_numpy(RngStream(0).normal((100, 4)) * 10))
    assert float(out.min()) > 0 and float(out.max()) < 1


# Recorded from this implementation (seed 0, float64) when the format was fixed.
GOLDEN_DECODER_SUM = 7.922125359906053
GOLDEN_PHI_Z_MEAN0 = -0.12256096769497449


def test_forward_golden():
    b = init_bundle(16, 2, 2, 2, seed=0, dtype=torch.float64)
    x = torch.from_numpy(RngStream(99).uniform((16,)))
    zb = torch.from_numpy(RngStream(98).normal((4,)))
    assert b.theta_x(zb).sum().item() == pytest.approx(GOLDEN_DECODER_SUM, abs=1e-12)
    assert b.phi_z(b.h(x)).mean[0].item() == pytest.approx(GOLDEN_PHI_Z_MEAN0, abs=1e-12)


def test_forward_bitwise_deterministic():
    b = init_bundle(64, 4, 3, 5, seed=2)
    x = torch.rand(8, 64, generator=torch.Generator().manual_seed(0))
    assert torch.equal(b.phi_z(b.h(x)).mean, b.phi_z(b.h(x)).mean)


@pytest.mark.parametrize("scale", [1.0, 10.0, 50.0])
def test_softmax_sums_to_one(scale):
    net = Mlp(MlpSpec((6, 7), head="softmax")).double()
    with torch.no_grad():
        net.layers[0].weight.copy_(torch.eye(7, 6, dtype=torch.float64))
    x = torch.from_numpy(RngStream(1).uniform((500, 6), -scale, scale))
    probs = net(x).probs
    assert torch.all(torch.isfinite(probs))
    assert float((probs.sum(-1) - 1).abs().max()) <= 1e-9


def test_backward_sum_of_squares():
    b = init_bundle(8, 2, 2, 2, seed=0, dtype=torch.float64)
    b.zero_grad(set_to_none=True)
    backward(sum((p ** 2).sum() for p in b.parameters()), b)
    for pt in b.param_tensors():
        np.testing.assert_allclose(pt.grad, 2 * pt.values, rtol=0, atol=1e-15)
        assert pt.grad.shape == pt.values.shape


def test_backward_unreachable_grad_is_zero():
    b = init_bundle(8, 2, 2, 2, seed=0, dtype=torch.float64)
    b.zero_grad(set_to_none=True)
    backward((b.h.layers[0].weight ** 2).sum(), b)
    assert not b.theta_x.layers[0].weight.grad.any()
    assert not b.phi_d.layers[1].bias.grad.any()


def test_backward_twice_is_contract_violation():
    b = init_bundle(8, 2, 2, 2, seed=0, dtype=torch.float64)
    node = LossNode((b.h.layers[0].weight ** 2).sum())
    node.backward(b)
    with pytest.raises(ContractError):
        node.backward(b)


def test_backward_linearity():
    b = init_bundle(8, 2, 2, 2, seed=3, dtype=torch.float64)
    x = torch.from_numpy(RngStream(4).uniform((3, 8)))

    def l1():
        return (b.phi_z(b.h(x)).mean ** 2).sum()

    def l2():
        return b.theta_x(torch.ones(4, dtype=torch.float64)).sum()

    grads = []
    for fn in (l1, l2, lambda: 2.5 * l1() - 0.7 * l2()):
        b.zero_grad(set_to_none=True)
        backward(fn(), b)
        grads.append([p.grad.clone() for p in b.parameters()])
    for g1, g2, g12 in zip(*grads):
        assert torch.allclose(g12, 2.5 * g1 - 0.7 * g2, rtol=0, atol=1e-10)


def quadratic_bundle():
    b = init_bundle(6, 2, 2, 2, seed=1, hidden=8, feature=8, dtype=torch.float64)
    # shifted so no gradient coordinate sits near zero, where relative error is ill-conditioned
    return b, (lambda bb: sum(((p + 2.0) ** 2).sum() for p in bb.parameters()))


def test_gradient_check_quadratic():
    b, fn = quadratic_bundle()
    rep = gradient_check(b, fn, tolerance=1e-8)
    assert rep.passed
    assert rep.max_rel <= 1e-8
    assert set(rep.per_tensor) == {n for n, _ in b.named_parameters()}


def test_gradient_check_zero_tolerance_fails():
    b, fn = quadratic_bundle()
    assert not gradient_check(b, lambda bb: fn(bb) + sum((p ** 3).sum() for p in bb.parameters()),
                              tolerance=0.0).passed


def test_relu_margin_is_smallest_relu_input():
    from ugvae.nets import relu_margin

    b = init_bundle(6, 2, 2, 2, seed=3, hidden=5, feature=4, dtype=torch.float64)
    x = torch.linspace(0, 1, 6, dtype=torch.float64)
    with torch.no_grad():
        margin = relu_margin(b, lambda: b.h(x))
        pre = b.h.layers[0](x)
    assert margin == float(pre.abs().min())
    assert relu_margin(b, lambda: None) == float("inf")
