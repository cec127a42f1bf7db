import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from noqs import NOQS, FNOConfig, TransformerConfig
from noqs.lattice import all_configs
from noqs.neural_operator import (FourierLayer, LatentSeries, grid_spectral_derivative, mirror_extend,
                                  spectral_derivative)
from noqs.protocols import FourierProtocolSpec, Protocol, TimeGrid, make_constant, sample_fourier_protocol

from conftest import SMALL_F, SMALL_T, random_model


def _cos_protocol(grid, seed=0, modes=6):
    """Protocol that is band-limited in cos(pi m t / T)."""
    rng = np.random.default_rng(seed)
    t = grid.points / grid.T_max
    hx = 1 + sum(rng.normal() * 0.3 / m * np.cos(np.pi * m * t) for m in range(1, modes))
    hz = sum(rng.normal() * 0.05 / m * np.cos(np.pi * m * t) for m in range(1, modes))
    return Protocol(grid, hx, hz, None, {"kind": "raw"})


# -- spectral derivative ------------------------------------------------------

def test_mirror_extend():
    x = torch.arange(5.0)[:, None]
    assert mirror_extend(x, 0)[:, 0].tolist() == [0, 1, 2, 3, 4, 3, 2, 1]


def test_derivative_of_constant_is_zero():
    np.testing.assert_allclose(spectral_derivative(np.full(64, 3.2), 1.0), 0.0, atol=1e-12)


def test_derivative_of_sine():
    T = 2.5
    t = np.arange(128) * T / 128
    d = spectral_derivative(np.sin(2 * np.pi * t / T), T)
    np.testing.assert_allclose(d, 2 * np.pi / T * np.cos(2 * np.pi * t / T), atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_derivative_is_linear(seed):
    rng = np.random.default_rng(seed)
    n, T = 64, 1.0
    t = np.arange(n) / n

    def band():
        return sum(rng.normal() * np.cos(2 * np.pi * k * t + rng.uniform(0, 6)) for k in range(8))

    a, b = band(), band()
    c = rng.normal()
    np.testing.assert_allclose(spectral_derivative(a + c * b, T),
                               spectral_derivative(a, T) + c * spectral_derivative(b, T), atol=1e-9)


def test_derivative_matches_fourth_order_differences():
    T, n = 1.0, 200
    t = np.arange(n) * T / (n - 1)
    f = np.cos(np.pi * t) + 0.3 * np.cos(3 * np.pi * t)  # smooth and even
    d = grid_spectral_derivative(f, T)
    h = t[1]
    fd = (-f[4:] + 8 * f[3:-1] - 8 * f[1:-3] + f[:-4]) / (12 * h)
    exact = -np.pi * np.sin(np.pi * t) - 0.9 * np.pi * np.sin(3 * np.pi * t)
    inner = slice(2, -2)
    scale = np.abs(exact).max()
    assert np.max(np.abs(d[inner] - fd)) / scale < 1e-3
    assert np.max(np.abs(d - exact)) / scale < 1e-10


def test_derivative_needs_enough_samples():
    with pytest.raises(ValueError):
        spectral_derivative(np.zeros(10), 1.0, k_max=6)


# -- Fourier layer --------------------------------------------------------------

def test_single_sine_through_linear_spectral_path():
    """A lone input frequency stays a lone frequency, scaled by R."""
    torch.manual_seed(0)
    width, P, m = 3, 64, 5
    layer = FourierLayer(width, 8, per_mode=False).double()
    with torch.no_grad():
        layer.W_s.weight.zero_()
    a = torch.randn(width, dtype=torch.float64)
    t = torch.arange(P, dtype=torch.float64) / P
    v = torch.sin(2 * math.pi * m * t)[:, None] * a
    out = layer(v[None])[0]
    R = torch.view_as_complex(layer.R)
    # sin = (e^{i w t} - e^{-i w t}) / 2i, so mode m carries a / 2i
    pre = 2 * torch.real((a / 2j).to(R.dtype) @ R * torch.exp(2j * math.pi * m * t)[:, None])
    torch.testing.assert_close(out, torch.nn.functional.gelu(pre), atol=1e-12, rtol=0)


def test_per_mode_weights_shape():
    layer = FourierLayer(4, 6, per_mode=True)
    assert layer.R.shape == (6, 4, 4, 2)


def test_constant_protocol_without_clock_gives_static_tokens():
    fcfg = FNOConfig(n_layers=2, width=8, k_max=8, time_channel=False)
    model = random_model(fcfg=fcfg)
    with torch.no_grad():
        for layer in model.operator.layers:
            layer.R.zero_()
    p = make_constant(TimeGrid(1.0, 40), 0.8, 0.1)
    t = torch.linspace(0, 1, 9, dtype=torch.float64)
    ctx = model.context_tokens(p, t)
    torch.testing.assert_close(ctx.M, model.operator.M0.expand_as(ctx.M), atol=1e-12, rtol=0)
    assert ctx.dM_dt.abs().max() < 1e-12
    sigma = torch.as_tensor(all_configs(4))
    assert model.dlogpsi_dt(sigma, p, 0.37).abs().max() < 1e-10


def test_clock_channel_gives_time_dependence_for_constant_protocol():
    model = random_model()
    p = make_constant(TimeGrid(1.0, 40), 1.0)
    ctx = model.context_tokens(p, torch.tensor([0.2, 0.6], dtype=torch.float64))
    assert (ctx.M[0] - ctx.M[1]).abs().max() > 1e-4


# -- context tokens ---------------------------------------------------------------

def test_initial_tokens_pinned_exactly():
    model = random_model()
    g = TimeGrid(1.0, 40)
    protocols = [sample_fourier_protocol(FourierProtocolSpec(), g, s) for s in range(5)]
    series = model.encode(protocols)
    t = torch.zeros(5, 3, dtype=torch.float64)
    M = model.operator.tokens(series, t).M
    assert torch.equal(M, model.operator.M0.expand_as(M))


def test_identical_protocols_identical_tokens():
    model = random_model()
    g = TimeGrid(1.0, 40)
    a = sample_fourier_protocol(FourierProtocolSpec(), g, 1)
    b = Protocol(g, a.hx.copy(), a.hz.copy(), None, {"kind": "raw"})
    t = torch.linspace(0, 1, 13, dtype=torch.float64)
    assert torch.equal(model.context_tokens(a, t).M, model.context_tokens(b, t).M)


def test_query_time_range_checked():
    model = random_model()
    p = make_constant(TimeGrid(1.0, 40), 1.0)
    with pytest.raises(ValueError):
        model.context_tokens(p, 1.5)
    with pytest.raises(ValueError):
        model.context_tokens(p, -0.1)


def test_grid_too_coarse_for_modes():
    model = random_model()
    with pytest.raises(ValueError):
        model.encode([make_constant(TimeGrid(1.0, 10), 1.0)])


def test_off_grid_evaluation_matches_closed_form_series():
    model = random_model()
    g = TimeGrid(1.0, 40)
    p = sample_fourier_protocol(FourierProtocolSpec(), g, 2)
    series = model.encode([p])
    c = series.coeffs[0].detach().numpy()  # (k, width)
    t = np.linspace(0, 1, 79)
    k = np.arange(c.shape[0])
    w = 2 * np.pi * k / 2.0
    manual = (c[0].real[None] + 2 * np.real(np.exp(1j * np.outer(t, w[1:])) @ c[1:]))
    got = series(torch.as_tensor(t)[None])[0].detach().numpy()
    np.testing.assert_allclose(got, manual, atol=1e-10)
    dmanual = 2 * np.real((1j * w[1:] * np.exp(1j * np.outer(t, w[1:]))) @ c[1:])
    np.testing.assert_allclose(series.derivative(torch.as_tensor(t)[None])[0].detach().numpy(), dmanual, atol=1e-10)


def test_truncated_series_reproduces_band_limited_latent_on_grid():
    model = random_model()
    g = TimeGrid(1.0, 40)
    traj = model.operator.trajectory(model.fields_tensor([_cos_protocol(g)]))
    # project the trajectory onto its kept modes, then check the series reproduces that projection
    n = traj.shape[-2]
    c = torch.fft.rfft(traj, dim=-2, norm="forward")
    c[..., model.operator.cfg.k_max:, :] = 0
    band = torch.fft.irfft(c, n=n, dim=-2, norm="forward")
    series = model.operator.encode(model.fields_tensor([_cos_protocol(g)]), 1.0)
    t = torch.as_tensor(np.arange(n) * 2.0 / n)[None]
    torch.testing.assert_close(series(t), band, atol=1e-12, rtol=0)


def test_token_derivative_matches_finite_difference():
    model = random_model()
    p = sample_fourier_protocol(FourierProtocolSpec(), TimeGrid(1.0, 40), 4)
    for t0 in (0.1, 0.45, 0.8):
        h = 1e-5
        ctx = model.context_tokens(p, t0)
        fd = (model.context_tokens(p, t0 + h).M - model.context_tokens(p, t0 - h).M) / (2 * h)
        torch.testing.assert_close(ctx.dM_dt, fd, atol=1e-7, rtol=1e-6)


def test_discretization_transfer_nested_grids():
    model = random_model()
    coarse, fine = TimeGrid(1.0, 40), TimeGrid(1.0, 79)
    pc, pf = _cos_protocol(coarse, 3), _cos_protocol(fine, 3)
    t = torch.as_tensor(coarse.points)
    Mc = model.context_tokens(pc, t).M
    Mf = model.context_tokens(pf, t).M
    assert (Mc - Mf).abs().max().item() < 1e-6


def test_dlogpsi_dt_matches_central_difference():
    model = random_model(seed=4)
    rng = np.random.default_rng(0)
    sigma = torch.as_tensor(all_configs(4))
    for i in range(5):
        p = sample_fourier_protocol(FourierProtocolSpec(), TimeGrid(1.0, 40), 100 + i)
        t0 = rng.uniform(0.05, 0.95)
        h = 1e-4
        d = model.dlogpsi_dt(sigma, p, t0)
        with torch.no_grad():
            lp = [model.ansatz.log_psi(sigma, model.context_tokens(p, t0 + s * h).M) for s in (1, -1)]
        fd = (lp[0] - lp[1]) / (2 * h)
        rel = ((d - fd).abs() / fd.abs().clamp_min(1e-3)).max().item()
        assert rel < 1e-3


def test_injected_linear_tokens():
    """With M(t) = M0 + t S the derivative is the directional derivative of log psi along S."""
    model = random_model()
    sigma = torch.as_tensor(all_configs(4))
    M0 = model.operator.M0.detach()
    S = torch.randn_like(M0)
    _, d = model.log_psi_and_dt(sigma, M0, S)
    h = 1e-6
    with torch.no_grad():
        fd = (model.ansatz.log_psi(sigma, M0 + h * S) - model.ansatz.log_psi(sigma, M0 - h * S)) / (2 * h)
    torch.testing.assert_close(d, fd, atol=1e-7, rtol=1e-6)


def test_latent_series_real_for_real_signal():
    c = torch.zeros(1, 4, 2, dtype=torch.complex128)
    c[0, 0] = 1.0
    c[0, 2, 1] = 0.5j
    s = LatentSeries(c, 2.0)
    v = s(torch.tensor([[0.0, 0.5]], dtype=torch.float64))
    # 1 + 2 Re(0.5 i e^{2 pi i t}) for channel 1
    torch.testing.assert_close(v[0, :, 1], torch.tensor([1.0, 1.0], dtype=torch.float64), atol=1e-12, rtol=0)
    torch.testing.assert_close(v[0, :, 0], torch.ones(2, dtype=torch.float64))


def test_time_derivative_is_differentiable_in_parameters():
    """Reverse-mode gradient of d/dt log psi (a forward-mode tangent) matches finite differences."""
    from noqs.lattice import all_configs

    model = random_model(seed=3, scale=0.2)
    p = sample_fourier_protocol(FourierProtocolSpec(), TimeGrid(1.0, 40), 0)
    sigma = torch.as_tensor(all_configs(4))
    weights = torch.linspace(-1, 1, 16, dtype=torch.float64)

    def f():
        d = model.dlogpsi_dt(sigma, p, 0.4)
        return (weights * (d.real + 0.5 * d.imag)).sum()

    f().backward()
    h = 1e-6
    for name, par in model.named_parameters():
        if par.grad is None:
            continue
        v = par.data.view(-1)
        old = v[0].item()
        v[0] = old + h
        with torch.no_grad():
            up = f().item()
        v[0] = old - h
        with torch.no_grad():
            down = f().item()
        v[0] = old
        fd = (up - down) / (2 * h)
        assert par.grad.view(-1)[0].item() == pytest.approx(fd, rel=1e-4, abs=1e-7), name
