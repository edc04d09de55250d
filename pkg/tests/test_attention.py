import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mrcn.attention import ChannelAttention, attention_weights, distill, hidden_dim
from mrcn.errors import ContractError
from mrcn.modality_norm import FeatureMap, Modality


def residual(n, c, h=3, w=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    return FeatureMap(torch.randn(n, c, h, w, generator=g, dtype=torch.float64), Modality.VIS)


def test_hidden_dim_floor_at_one():
    assert hidden_dim(64) == 4
    assert hidden_dim(16) == 1
    assert hidden_dim(8) == 1


def test_param_count_matches_module():
    for c in (8, 16, 64, 256):
        att = ChannelAttention(c)
        assert sum(p.numel() for p in att.parameters()) == ChannelAttention.param_count(c)


def test_zero_weights_give_half():
    att = ChannelAttention(32).double()
    for p in att.parameters():
        torch.nn.init.zeros_(p)
    w = attention_weights(residual(3, 32), att)
    assert w.shape == (3, 32)
    assert torch.equal(w, torch.full_like(w, 0.5))


def test_single_hidden_unit_hand_evaluation():
    c = 16
    att = ChannelAttention(c, 16).double()
    w1 = torch.linspace(-1, 1, c, dtype=torch.float64)
    b1 = 0.25
    w2 = torch.linspace(2, -2, c, dtype=torch.float64)
    b2 = torch.linspace(-0.5, 0.5, c, dtype=torch.float64)
    with torch.no_grad():
        att.w1.weight.copy_(w1[None, :])
        att.w1.bias.fill_(b1)
        att.w2.weight.copy_(w2[:, None])
        att.w2.bias.copy_(b2)
    levels = [0.3 * k - 2.0 for k in range(c)]
    m = FeatureMap(torch.tensor(levels, dtype=torch.float64)[None, :, None, None].expand(1, c, 4, 2).clone(),
                   Modality.NIR)
    hidden = max(0.0, sum(float(a) * b for a, b in zip(w1, levels)) + b1)
    expect = [1.0 / (1.0 + math.exp(-(float(w2[k]) * hidden + float(b2[k])))) for k in range(c)]
    got = attention_weights(m, att)[0].tolist()
    assert got == pytest.approx(expect, abs=1e-12)


@given(st.integers(0, 10_000), st.floats(0.01, 30.0))
def test_weights_strictly_inside_unit_interval(seed, scale):
    torch.manual_seed(seed)
    att = ChannelAttention(16)
    m = FeatureMap(scale * torch.randn(2, 16, 3, 3), Modality.VIS)
    w = attention_weights(m, att)
    assert bool((w > 0).all()) and bool((w < 1).all())


def test_distill_elementwise_cases():
    m = residual(2, 8)
    ones = torch.ones(2, 8, dtype=torch.float64)
    assert torch.equal(distill(m, ones).data, m.data)
    assert torch.equal(distill(m, torch.zeros_like(ones)).data, torch.zeros_like(m.data))
    assert torch.equal(distill(m, 0.5 * ones).data, m.data / 2)


@given(st.integers(0, 10_000))
def test_distill_bilinear_in_weights(seed):
    g = torch.Generator().manual_seed(seed)
    m = residual(2, 8, seed=seed)
    a = torch.rand(2, 8, generator=g, dtype=torch.float64)
    b = torch.rand(2, 8, generator=g, dtype=torch.float64)
    lhs = distill(m, a).data + distill(m, b).data
    assert (lhs - distill(m, a + b).data).abs().max() <= 1e-6


def test_large_output_bias_saturates_gate():
    att = ChannelAttention(16).double()
    m = residual(2, 16)
    with torch.no_grad():
        att.w2.bias.fill_(40.0)
    w = attention_weights(m, att)
    assert torch.allclose(w, torch.ones_like(w))
    assert torch.allclose(distill(m, w).data, m.data)


def test_shape_contracts():
    att = ChannelAttention(16)
    with pytest.raises(ContractError):
        attention_weights(FeatureMap(torch.randn(2, 8, 3, 3), Modality.VIS), att)
    with pytest.raises(ContractError):
        distill(FeatureMap(torch.randn(2, 8, 3, 3), Modality.VIS), torch.ones(2, 7))
    with pytest.raises(ContractError):
        ChannelAttention(16, 0)


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    att = ChannelAttention(16).double()
    m = residual(2, 16)
    params = list(att.parameters())

    def objective():
        return distill(m, attention_weights(m, att)).data.pow(2).sum()

    objective().backward()
    h = 1e-6
    for p in params:
        grad = p.grad.detach().clone()
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = float(flat[i])
            with torch.no_grad():
                flat[i] = old + h
                up = float(objective())
                flat[i] = old - h
                down = float(objective())
                flat[i] = old
            fd = (up - down) / (2 * h)
            g = float(grad.view(-1)[i])
            assert abs(fd - g) <= 1e-4 * max(1.0, abs(fd))


def test_init_scheme():
    att = ChannelAttention(64)
    assert torch.equal(att.w1.bias, torch.zeros_like(att.w1.bias))
    assert torch.equal(att.w2.bias, torch.zeros_like(att.w2.bias))
