import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vdsm.transition import Transition

D = torch.float64


def make(kz=2, kd=2, hidden=3, seed=0):
    torch.manual_seed(seed)
    return Transition(kz, kd, hidden).double()


def lin(layer, x):
    return layer.weight.detach().numpy() @ x + layer.bias.detach().numpy()


def manual(t, z, d):
    zd = np.concatenate([z, d])
    g = 1 / (1 + np.exp(-lin(t.f2, np.maximum(lin(t.f1, zd), 0))))
    h = lin(t.f4, np.maximum(lin(t.f3, zd), 0))
    loc = g * h + (1 - g) * lin(t.f5, zd)
    scale = np.log1p(np.exp(lin(t.f6, np.maximum(h, 0)))) + 1e-5
    return loc, scale, h, lin(t.f5, zd)


def test_matches_manual_formula():
    t = make()
    rng = np.random.default_rng(0)
    z, d = rng.normal(size=2), rng.normal(size=2)
    loc, scale, _, _ = manual(t, z, d)
    out = t.transition_step(torch.tensor(z), torch.tensor(d))
    assert np.abs(out.loc.detach().numpy() - loc).max() < 1e-14
    assert np.abs(out.scale.detach().numpy() - scale).max() < 1e-14


@pytest.mark.parametrize("bias, pick", [(60.0, "h"), (-60.0, "skip")])
def test_gate_limits(bias, pick):
    t = make()
    with torch.no_grad():
        t.f2.weight.zero_()
        t.f2.bias.fill_(bias)
    z, d = np.array([0.4, -1.2]), np.array([0.7, 0.1])
    _, _, h, skip = manual(t, z, d)
    out = t(torch.tensor(z), torch.tensor(d)).loc.detach().numpy()
    assert np.abs(out - (h if pick == "h" else skip)).max() < 1e-6


def test_gate_bias_starts_neutral():
    t = Transition(3, 2, 8)
    assert torch.all(t.f2.bias == 0)


def test_dimension_mismatch():
    t = make()
    with pytest.raises(ValueError):
        t(torch.zeros(3, dtype=D), torch.zeros(2, dtype=D))
    with pytest.raises(ValueError):
        t(torch.zeros(2, dtype=D), torch.zeros(1, dtype=D))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4))
def test_gate_open_interval_and_positive_scale(v):
    t = make()
    zd = torch.tensor(v, dtype=D)
    g = t.gate(zd)
    # saturation can round to the endpoints in floating point for huge inputs
    assert ((g >= 0) & (g <= 1)).all()
    assert (t(zd[:2], zd[2:]).scale > 0).all()


def test_gate_strictly_inside_for_moderate_inputs():
    t = make()
    g = t.gate(torch.randn(100, 4, dtype=D))
    assert ((g > 0) & (g < 1)).all()


def test_rollout_single_step():
    t = make()
    z1 = torch.randn(2, dtype=D)
    out = t.rollout(z1, torch.randn(2, dtype=D), 1, [])
    assert out.shape == (1, 2) and torch.equal(out[0], z1)


def test_rollout_zero_noise_follows_means():
    t = make()
    z1, d = torch.randn(2, dtype=D), torch.randn(2, dtype=D)
    out = t.rollout(z1, d, 4, [torch.zeros(2, dtype=D)] * 3)
    z = z1
    for k in range(1, 4):
        z = t(z, d).loc
        assert torch.equal(out[k], z)


def test_rollout_matches_manual_chaining():
    t = make()
    rng = np.random.default_rng(1)
    z1, d = rng.normal(size=2), rng.normal(size=2)
    noise = rng.normal(size=(2, 2))
    z, expected = z1, [z1]
    for eps in noise:
        loc, scale, _, _ = manual(t, z, d)
        z = loc + scale * eps
        expected.append(z)
    got = t.rollout(torch.tensor(z1), torch.tensor(d), 3, [torch.tensor(e) for e in noise])
    assert np.abs(got.detach().numpy() - np.array(expected)).max() < 1e-13


def test_rollout_batched_and_errors():
    t = make()
    out = t.rollout(torch.randn(5, 2, dtype=D), torch.randn(5, 2, dtype=D), 3, list(torch.randn(2, 5, 2, dtype=D)))
    assert out.shape == (5, 3, 2)
    with pytest.raises(ValueError):
        t.rollout(torch.randn(2, dtype=D), torch.randn(2, dtype=D), 3, [torch.zeros(2, dtype=D)])
    with pytest.raises(ValueError):
        t.rollout(torch.randn(2, dtype=D), torch.randn(2, dtype=D), 0, [])


def test_gradients_match_finite_differences():
    t = make()
    z = torch.randn(2, dtype=D, requires_grad=True)
    d = torch.randn(2, dtype=D, requires_grad=True)

    def f(zz, dd, *ps):
        out = t(zz, dd)
        return out.loc.sum() + out.scale.log().sum()

    params = [t.f1.weight, t.f2.bias, t.f3.weight, t.f4.weight, t.f5.weight, t.f6.bias]
    assert torch.autograd.gradcheck(f, (z, d, *params), eps=1e-6, atol=1e-7, rtol=1e-4)
