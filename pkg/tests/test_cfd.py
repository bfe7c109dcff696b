import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from crossseq.cfd import (
    CFD, LcscConfig, ParameterError, PredNet, decompose, decomposition_loss, density, pearson_cc,
    prednet_forward, soft_threshold,
)
from oracles import central_fd, rel_error


def _net(n_filters=4, kernel_size=3, n_blocks=2, seed=0):
    torch.manual_seed(seed)
    return PredNet(LcscConfig(n_filters=n_filters, kernel_size=kernel_size, n_blocks=n_blocks)).double()


# soft thresholding


def test_soft_threshold_examples():
    z = torch.tensor([[[[0.5]], [[-0.1]]]], dtype=torch.float64)
    out = soft_threshold(z, torch.tensor([0.2, 0.2]))
    assert out[0, 0, 0, 0].item() == pytest.approx(0.3)
    assert out[0, 1, 0, 0].item() == 0.0
    z = torch.randn(2, 3, 5, 5)
    assert torch.equal(soft_threshold(z, torch.zeros(3)), z)


def test_soft_threshold_channelwise():
    z = torch.ones(1, 2, 2, 2)
    out = soft_threshold(z, torch.tensor([0.25, 2.0]))
    assert torch.all(out[:, 0] == 0.75) and torch.all(out[:, 1] == 0)


def test_soft_threshold_negative_lambda():
    with pytest.raises(ParameterError):
        soft_threshold(torch.ones(1, 1, 2, 2), torch.tensor([-0.1]))


def test_config_validation():
    with pytest.raises(ParameterError):
        LcscConfig(kernel_size=4)
    with pytest.raises(ParameterError):
        LcscConfig(n_blocks=-1)


# prediction network


def test_prednet_zero_input_zero_codes():
    net = _net()
    f = net.codes(torch.zeros(2, 1, 16, 16, dtype=torch.float64))
    assert torch.count_nonzero(f) == 0


def test_prednet_zero_blocks_is_first_stage():
    net = _net(n_blocks=2, seed=3)
    x = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    f0 = soft_threshold(torch.nn.functional.conv2d(x, net.c0, padding=1), net.lam)
    assert torch.allclose(prednet_forward(x, net.c0, net.c1, net.c2, net.lam, 0), f0)


def test_prednet_wiring_without_threshold_or_feedback():
    net = _net(seed=5)
    x = torch.rand(2, 1, 12, 12, dtype=torch.float64)
    with torch.no_grad():
        net.lam.zero_()
        net.c1.zero_()
    expected = torch.nn.functional.conv2d(x, net.c0, padding=1)
    assert torch.allclose(net.codes(x), expected, atol=1e-12)


def test_prednet_shape_mismatch():
    net = _net()
    with pytest.raises(ValueError):
        net.codes(torch.rand(1, 2, 8, 8, dtype=torch.float64))


def test_prednet_output_sparser_than_input():
    # untrained random parameters, 100 random inputs: thresholding only removes entries
    rng = torch.Generator().manual_seed(0)
    for trial in range(100):
        net = _net(seed=trial)
        x = torch.rand(1, 1, 16, 16, generator=rng, dtype=torch.float64) + 0.01
        assert density(net.codes(x)) < density(x)


def test_raising_lambda_never_adds_nonzeros():
    gen = torch.Generator().manual_seed(1)
    for trial in range(200):
        net = _net(seed=100 + trial)
        x = torch.rand(1, 1, 16, 16, generator=gen, dtype=torch.float64)
        lam = torch.rand(4, generator=gen, dtype=torch.float64) * 0.2
        scale = 1 + 2 * torch.rand(4, generator=gen, dtype=torch.float64)
        with torch.no_grad():
            net.lam.copy_(lam)
            before = torch.count_nonzero(net.codes(x))
            net.lam.copy_(lam * scale)
            after = torch.count_nonzero(net.codes(x))
        assert after <= before


def test_lambda_clamped_nonnegative():
    net = _net()
    with torch.no_grad():
        net.lam.fill_(-0.3)
    net.clamp_()
    assert torch.all(net.lam == 0)


# decomposition


def test_decompose_zero_input():
    net = _net()
    x = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
    d = decompose(x, torch.zeros_like(x), net)
    for t in (d.codes, d.unique, d.nonunique):
        assert torch.count_nonzero(t) == 0


def test_decompose_exact_reconstruction_random_draws():
    gen = torch.Generator().manual_seed(7)
    for trial in range(50):
        net = _net(n_filters=3, kernel_size=5, seed=trial)
        x = torch.randn(2, 1, 16, 16, generator=gen, dtype=torch.float64)
        d = decompose(x, torch.randn(x.shape, generator=gen, dtype=torch.float64), net)
        assert torch.max(torch.abs(d.nonunique + d.unique - x)) <= 1e-6


def test_decompose_uses_nonunique_estimate():
    net = _net(seed=2)
    x = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    a = decompose(x, torch.zeros_like(x), net)
    b = decompose(x, torch.ones_like(x), net)
    assert not torch.allclose(a.codes, b.codes)
    with pytest.raises(ValueError):
        decompose(x, torch.zeros(1, 1, 8, 8, dtype=torch.float64), net)


def test_cfd_pair_shapes():
    torch.manual_seed(0)
    cfd = CFD(LcscConfig(n_filters=4), LcscConfig(n_filters=6))
    x = torch.rand(3, 1, 16, 16)
    d1, d2 = cfd(x, x)
    assert d1.codes.shape == (3, 4, 16, 16) and d2.codes.shape == (3, 6, 16, 16)
    assert d1.unique.shape == x.shape


# correlation loss


def test_pearson_examples():
    a = torch.randn(50, dtype=torch.float64)
    assert pearson_cc(a, a).item() == pytest.approx(1.0)
    assert pearson_cc(a, -a).item() == pytest.approx(-1.0)
    assert pearson_cc(torch.tensor([1.0, 2, 3]), torch.tensor([2.0, 4, 6])).item() == pytest.approx(1.0)


def test_pearson_constant_input_is_zero():
    assert pearson_cc(torch.ones(10), torch.randn(10)).item() == 0.0


def test_pearson_matches_numpy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 4, 16, 16))
    expected = np.corrcoef(a.ravel(), b.ravel())[0, 1]
    assert pearson_cc(torch.tensor(a), torch.tensor(b)).item() == pytest.approx(expected, abs=1e-12)


def test_decomposition_loss_examples():
    a = torch.randn(64, dtype=torch.float64)
    b = a - a.mean()
    # orthogonal centred vectors have zero correlation
    c = torch.tensor([1.0, -1.0] * 32, dtype=torch.float64)
    d = torch.tensor([1.0, 1.0, -1.0, -1.0] * 16, dtype=torch.float64)
    assert decomposition_loss(c, d, a, b).item() == pytest.approx(0.0, abs=1e-15)
    assert decomposition_loss(a, a, b, b, epsilon=1.01).item() == pytest.approx(1 / 2.01)
    with pytest.raises(ParameterError):
        decomposition_loss(a, a, b, b, epsilon=1.0)


@given(st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_decomposition_loss_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    f1, f2, c1, c2 = (torch.randn(2, 8, 8, generator=g, dtype=torch.float64) for _ in range(4))
    assert decomposition_loss(f1, f2, c1, c2).item() >= 0


@pytest.mark.parametrize("which", range(4))
def test_decomposition_loss_gradient(which):
    g = torch.Generator().manual_seed(which)
    inputs = [torch.randn(2, 16, 16, generator=g, dtype=torch.float64) for _ in range(4)]
    # give the non-unique pair a positive correlation so the loss is well inside its domain
    inputs[3] = inputs[2] + 0.5 * inputs[3]

    def fn(x):
        args = list(inputs)
        args[which] = x
        return decomposition_loss(*args)

    x = inputs[which].clone().requires_grad_(True)
    args = list(inputs)
    args[which] = x
    decomposition_loss(*args).backward()
    assert rel_error(x.grad, central_fd(fn, inputs[which])) < 1e-4


@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-5, 5))
@settings(max_examples=40, deadline=None)
def test_decomposition_loss_ignores_residual_offset_and_scale(seed, scale, shift):
    # only correlations enter the loss, so the magnitude of u is not pinned by it
    g = torch.Generator().manual_seed(seed)
    f1, f2, c1, c2 = (torch.randn(2, 8, 8, generator=g, dtype=torch.float64) for _ in range(4))
    base = decomposition_loss(f1, f2, c1, c2)
    moved = decomposition_loss(f1, f2, scale * c1 + shift, c2 - shift)
    assert moved.item() == pytest.approx(base.item(), rel=1e-9, abs=1e-12)
