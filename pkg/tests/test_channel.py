import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ditjscc.channel import ChannelConfig, cbr, equalize, normalize_power, pass_through, to_real, transmit


def test_normalize_unit_input_unchanged():
    s = normalize_power(torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64))
    assert torch.equal(s, torch.tensor([1 + 0j, 1 + 0j], dtype=torch.complex128))


def test_normalize_scales_uniformly():
    s = normalize_power(torch.tensor([2.0, 0.0, 2.0, 0.0], dtype=torch.float64))
    assert torch.allclose(s, torch.tensor([1 + 0j, 1 + 0j], dtype=torch.complex128), atol=0, rtol=1e-15)


def test_normalize_large_vector_power():
    g = torch.Generator().manual_seed(0)
    raw = 3.7 * torch.randn(10**6, generator=g, dtype=torch.float64) + 0.5
    s = normalize_power(raw)
    # independent power computation in numpy
    a = raw.numpy()
    power = np.mean((a[0::2] / 1.0) ** 2 + a[1::2] ** 2)
    assert abs(np.mean(np.abs(s.numpy()) ** 2) - 1.0) < 1e-9
    assert np.allclose(s.numpy().real, a[0::2] / math.sqrt(power))


def test_normalize_rows_independently():
    raw = torch.tensor([[1.0, 0.0, 1.0, 0.0], [4.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
    s = normalize_power(raw)
    assert torch.allclose(s.abs().square().mean(-1), torch.ones(2, dtype=torch.float64))


@pytest.mark.parametrize("raw", [torch.zeros(4), torch.ones(3), torch.ones(0)])
def test_normalize_rejects_bad_input(raw):
    with pytest.raises(ValueError):
        normalize_power(raw)


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=40).map(lambda v: v + v))
@settings(max_examples=60, deadline=None)
def test_normalize_power_property(values):
    raw = torch.tensor(values, dtype=torch.float64)
    if float(raw.square().sum()) < 1e-12:
        return
    s = normalize_power(raw)
    assert s.shape == (len(values) // 2,)
    assert abs(float(s.abs().square().mean()) - 1.0) < 1e-9
    # packing order: phase of each symbol follows its (re, im) pair
    back = to_real(s)
    assert torch.allclose(back * raw.norm() / back.norm(), raw, atol=1e-9 * (1 + float(raw.abs().max())))


def test_noiseless_awgn_is_identity():
    s = normalize_power(torch.randn(64, dtype=torch.float64))
    s_hat, h = transmit(s, ChannelConfig("awgn", math.inf))
    assert torch.equal(s_hat, s)
    assert torch.equal(h, torch.ones_like(s))


def test_awgn_noise_power_and_snr():
    g = torch.Generator().manual_seed(1)
    n = 10**6
    s = torch.ones(n, dtype=torch.complex128)
    s_hat, _ = transmit(s, ChannelConfig("awgn", 0.0), g)
    noise = (s_hat - s).numpy()
    p = np.mean(np.abs(noise) ** 2)
    assert abs(p - 1.0) < 0.005
    # real and imaginary parts each carry half the variance
    assert abs(np.var(noise.real) - 0.5) < 0.005 and abs(np.var(noise.imag) - 0.5) < 0.005


@pytest.mark.parametrize("snr", [-5.0, 0.0, 7.0, 20.0])
def test_awgn_empirical_snr(snr):
    g = torch.Generator().manual_seed(2)
    s = normalize_power(torch.randn(2 * 10**6, generator=g, dtype=torch.float64))
    s_hat, _ = transmit(s, ChannelConfig("awgn", snr), g)
    measured = 10 * math.log10(float(s.abs().square().mean()) / float((s_hat - s).abs().square().mean()))
    assert abs(measured - snr) < 0.1


def test_rayleigh_gain_moments():
    g = torch.Generator().manual_seed(3)
    s = torch.ones(10**6, dtype=torch.complex128)
    _, h = transmit(s, ChannelConfig("rayleigh", 10.0), g)
    hn = h.numpy()
    assert abs(np.mean(np.abs(hn) ** 2) - 1.0) < 0.005
    assert abs(np.mean(hn)) < 0.005  # circular symmetry: zero mean
    assert abs(np.mean(hn.real * hn.imag)) < 0.005


def test_equalize_identity_and_inversion():
    s = torch.tensor([0.3 + 0.4j, -1.0 + 0.0j], dtype=torch.complex128)
    assert torch.equal(equalize(s, torch.ones_like(s), 0.0), s)
    h = torch.full_like(s, 2.0)
    assert torch.allclose(equalize(2 * s, h, 0.0), s, rtol=0, atol=1e-15)


def test_equalize_mmse_scalar():
    out = equalize(torch.tensor([1 + 0j]), torch.tensor([1 + 0j]), 1.0)
    assert out.item() == 0.5


def test_equalize_zero_gain_zero_noise_errors():
    with pytest.raises(ValueError):
        equalize(torch.tensor([1 + 0j]), torch.tensor([0j]), 0.0)


def test_pass_through_noiseless_recovers_normalized_input():
    raw = torch.randn(3, 32, dtype=torch.float64)
    out = pass_through(raw, ChannelConfig("awgn", math.inf))
    expected = to_real(normalize_power(raw))
    assert torch.equal(out, expected)
    out_r = pass_through(raw, ChannelConfig("rayleigh", math.inf), torch.Generator().manual_seed(0))
    assert torch.allclose(out_r, expected, atol=1e-12)


def test_pass_through_empty_branch():
    raw = torch.zeros(2, 0)
    assert pass_through(raw, ChannelConfig()).shape == (2, 0)


def test_pass_through_seeded_and_fresh():
    raw = torch.randn(2, 16)
    cfg = ChannelConfig("rayleigh", 5.0)
    a = pass_through(raw, cfg, torch.Generator().manual_seed(9))
    b = pass_through(raw, cfg, torch.Generator().manual_seed(9))
    assert torch.equal(a, b)
    g = torch.Generator().manual_seed(9)
    assert not torch.equal(pass_through(raw, cfg, g), pass_through(raw, cfg, g))


def test_cbr_values():
    assert cbr(4096, 256, 256) == 1 / 48
    assert cbr(0, 256, 256) == 0
    assert cbr(2048, 512, 512) == 1 / 384
    with pytest.raises(ValueError):
        cbr(1, 0, 4)


def test_unknown_channel_model():
    with pytest.raises(ValueError, match="awgn"):
        ChannelConfig("rician")
