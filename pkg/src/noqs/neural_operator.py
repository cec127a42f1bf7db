"""Fourier neural operator producing time-dependent context tokens M(t).

The sampled driving fields are mirror-extended to the period ``2 * T_max``
before lifting. Because ``2 * (N_t - 1)`` grid steps always span exactly that
period, Fourier modes mean the same thing on every grid, which is what lets a
model trained on one ``N_t`` be queried on another. The output of the last
Fourier layer is kept as its first ``k_max`` modes; that truncated series is
what gets evaluated (and differentiated) at arbitrary times before the
pointwise projection to tokens.

The operator is equivariant under time shifts of the extended signal, so a
protocol that is constant in time would otherwise give constant tokens. A
fixed clock channel cos(pi t / T_max), smooth and even like the extension
itself, is appended to the fields so the tokens can always depend on t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.autograd.forward_ad as fwAD
import torch.nn.functional as F
from torch import Tensor, nn

from .ansatz import TransformerConfig, TransformerWavefunction, check_finite


@dataclass(frozen=True)
class FNOConfig:
    n_layers: int = 3
    width: int = 32
    k_max: int = 32
    n_tokens: int = 2
    d_in: int = 2
    proj_hidden: int | None = None
    per_mode_weights: bool = False
    # append cos(pi t / T) as a fixed input channel
    time_channel: bool = True

    def __post_init__(self):
        if min(self.n_layers, self.width, self.k_max, self.n_tokens, self.d_in) < 1:
            raise ValueError("FNO dimensions must be positive")


def mirror_extend(x: Tensor, dim: int = -2) -> Tensor:
    """[x_0 .. x_{n-1}, x_{n-2} .. x_1] along ``dim``: one period of the even extension."""
    n = x.shape[dim]
    inner = x.narrow(dim, 1, n - 2).flip(dim) if n > 2 else x.narrow(dim, 0, 0)
    return torch.cat([x, inner], dim=dim)


def spectral_derivative(series, period: float, k_max: int | None = None) -> np.ndarray:
    """Derivative of one period of a uniformly sampled periodic signal.

    Mode ``k`` is multiplied by ``i * 2 pi k / period``; with ``k_max`` only the
    modes ``|k| < k_max`` are kept. The Nyquist mode of an even-length signal is
    dropped since its derivative is not representable on the grid.
    """
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[0]
    if k_max is not None and n < 2 * k_max:
        raise ValueError(f"series of length {n} cannot resolve k_max={k_max} modes")
    c = np.fft.rfft(x, axis=0)
    k = np.arange(c.shape[0])
    keep = np.ones_like(k, dtype=bool)
    if n % 2 == 0:
        keep[-1] = False
    if k_max is not None:
        keep &= k < k_max
    w = np.where(keep, 2j * np.pi * k / period, 0.0)
    return np.fft.irfft(c * w.reshape(-1, *([1] * (x.ndim - 1))), n=n, axis=0)


def grid_spectral_derivative(values, T_max: float, k_max: int | None = None) -> np.ndarray:
    """Spectral derivative of samples on [0, T_max] (endpoints included) via the even extension."""
    v = torch.as_tensor(np.asarray(values, dtype=np.float64))
    ext = mirror_extend(v, dim=0).numpy()
    return spectral_derivative(ext, 2.0 * T_max, k_max)[: v.shape[0]]


class FourierLayer(nn.Module):
    def __init__(self, width: int, k_max: int, per_mode: bool):
        super().__init__()
        self.k_max = k_max
        shape = (k_max, width, width) if per_mode else (width, width)
        scale = 1.0 / width
        # (..., 2) holds real and imaginary parts so dtype casts apply to it
        self.R = nn.Parameter(scale * torch.randn(*shape, 2) / math.sqrt(2.0))
        self.W_s = nn.Linear(width, width, bias=False)

    def forward(self, v: Tensor) -> Tensor:
        # v: (B, P, width) on one period of the extended signal
        P = v.shape[-2]
        vh = torch.fft.rfft(v, dim=-2, norm="forward")[..., : self.k_max, :]
        R = torch.view_as_complex(self.R)
        mixed = torch.einsum("...ki,kio->...ko", vh, R) if R.ndim == 3 else vh @ R
        spec = torch.fft.irfft(mixed, n=P, dim=-2, norm="forward")
        return F.gelu(spec + self.W_s(v))


@dataclass
class ContextTokens:
    M: Tensor
    dM_dt: Tensor
    t: Tensor


class FourierNeuralOperator(nn.Module):
    def __init__(self, cfg: FNOConfig, d_e: int, proj_hidden: int):
        super().__init__()
        self.cfg = cfg
        self.d_e = d_e
        self.lift = nn.Linear(cfg.d_in + int(cfg.time_channel), cfg.width)
        self.layers = nn.ModuleList(FourierLayer(cfg.width, cfg.k_max, cfg.per_mode_weights)
                                    for _ in range(cfg.n_layers))
        hidden = cfg.proj_hidden or proj_hidden
        self.proj = nn.Sequential(nn.Linear(cfg.width, hidden), nn.GELU(), nn.Linear(hidden, cfg.n_tokens * d_e))
        self.M0 = nn.Parameter(0.02 * torch.randn(cfg.n_tokens, d_e))

    def trajectory(self, fields: Tensor) -> Tensor:
        """Last Fourier-layer output on the extended period, (B, 2(N_t-1), width)."""
        n_t = fields.shape[-2]
        if n_t < 2 * self.cfg.k_max:
            raise ValueError(f"N_t={n_t} is too coarse for k_max={self.cfg.k_max} (need N_t >= 2 k_max)")
        if self.cfg.time_channel:
            clock = torch.cos(math.pi * torch.arange(n_t, dtype=fields.dtype) / (n_t - 1))
            fields = torch.cat([fields, clock.expand(*fields.shape[:-2], n_t).unsqueeze(-1)], dim=-1)
        v = self.lift(mirror_extend(fields, dim=-2))
        for layer in self.layers:
            v = layer(v)
        return v

    def encode(self, fields: Tensor, T_max: float) -> "LatentSeries":
        """One operator pass: truncated Fourier representation of the latent trajectory."""
        v = self.trajectory(fields)
        coeffs = torch.fft.rfft(v, dim=-2, norm="forward")[..., : self.cfg.k_max, :]
        return LatentSeries(coeffs, 2.0 * T_max)

    def raw_tokens(self, latent: Tensor) -> Tensor:
        out = self.proj(latent)
        return out.reshape(*out.shape[:-1], self.cfg.n_tokens, self.d_e)

    def tokens(self, series: "LatentSeries", t: Tensor, with_derivative: bool = True) -> ContextTokens:
        """M(t) = M(0) + M~(t) - M~(0) and dM/dt at times ``t`` of shape (B, ...)."""
        v_t = series(t)
        raw0 = self.raw_tokens(series(torch.zeros_like(t)))
        if with_derivative:
            with fwAD.dual_level():
                raw_dual = self.raw_tokens(fwAD.make_dual(v_t, series.derivative(t)))
                raw, draw = fwAD.unpack_dual(raw_dual)
            draw = torch.zeros_like(raw) if draw is None else draw
        else:
            raw, draw = self.raw_tokens(v_t), None
        M = self.M0 + raw - raw0
        # exact pinning of the initial condition
        M = torch.where((t == 0)[..., None, None], self.M0, M)
        return ContextTokens(M, draw, t)


class LatentSeries:
    """Real truncated Fourier series v(t) = sum_{|k| < k_max} c_k exp(2 pi i k t / period)."""

    def __init__(self, coeffs: Tensor, period: float):
        self.coeffs = coeffs  # (B, k_max, width) complex
        self.period = period

    def _basis(self, t: Tensor, derivative: bool) -> Tensor:
        k = torch.arange(self.coeffs.shape[-2], dtype=t.dtype)
        w = 2.0 * math.pi * k / self.period
        phase = torch.polar(torch.ones_like(t).unsqueeze(-1).expand(*t.shape, len(k)), t.unsqueeze(-1) * w)
        weight = torch.full_like(w, 2.0)
        weight[0] = 1.0
        if derivative:
            return phase * (1j * w * weight)
        return phase * weight

    def _eval(self, t: Tensor, derivative: bool) -> Tensor:
        basis = self._basis(t, derivative)  # (B, ..., k)
        c = self.coeffs.reshape(self.coeffs.shape[0], *([1] * (t.ndim - 1)), *self.coeffs.shape[1:])
        return torch.real((basis.unsqueeze(-1) * c).sum(-2))

    def __call__(self, t: Tensor) -> Tensor:
        return self._eval(t, False)

    def derivative(self, t: Tensor) -> Tensor:
        return self._eval(t, True)


class NOQS(nn.Module):
    """Transformer wavefunction conditioned on a Fourier-neural-operator encoding of H(t)."""

    def __init__(self, n_sites: int, tcfg: TransformerConfig = TransformerConfig(), fcfg: FNOConfig = FNOConfig()):
        super().__init__()
        self.ansatz = TransformerWavefunction(n_sites, tcfg)
        self.operator = FourierNeuralOperator(fcfg, tcfg.d_e, tcfg.ffn_dim)

    @property
    def n_sites(self) -> int:
        return self.ansatz.n_sites

    def fields_tensor(self, protocols) -> Tensor:
        dtype = self.operator.M0.dtype
        return torch.stack([torch.as_tensor(p.fields, dtype=dtype) for p in protocols])

    def encode(self, protocols) -> LatentSeries:
        protocols = list(protocols)
        T = {p.grid.T_max for p in protocols}
        if len(T) != 1:
            raise ValueError("protocols in one batch must share T_max")
        return self.operator.encode(self.fields_tensor(protocols), T.pop())

    def context_tokens(self, protocol, t_query) -> ContextTokens:
        """Tokens for a single protocol at scalar or 1-d ``t_query``."""
        t = torch.as_tensor(t_query, dtype=self.operator.M0.dtype)
        scalar = t.ndim == 0
        t = t.reshape(1, -1)
        T = protocol.grid.T_max
        if torch.any(t < 0) or torch.any(t > T * (1 + 1e-12)):
            raise ValueError(f"query time outside [0, {T}]")
        ctx = self.operator.tokens(self.encode([protocol]), t)
        M, dM = ctx.M[0], ctx.dM_dt[0]
        if scalar:
            M, dM = M[0], dM[0]
        return ContextTokens(M, dM, torch.as_tensor(t_query))

    def log_psi_and_dt(self, sigma: Tensor, M: Tensor, dM: Tensor) -> tuple[Tensor, Tensor]:
        """log psi(sigma; M) and its time derivative along dM/dt (exact chain rule)."""
        with fwAD.dual_level():
            log_p, phase = self.ansatz(sigma, fwAD.make_dual(M, dM))
            log_p, dlog_p = fwAD.unpack_dual(log_p)
            phase, dphase = fwAD.unpack_dual(phase)
        if dlog_p is None:
            dlog_p = torch.zeros_like(log_p)
        if dphase is None:
            dphase = torch.zeros_like(phase)
        return torch.complex(0.5 * log_p, phase), torch.complex(0.5 * dlog_p, dphase)

    def dlogpsi_dt(self, sigma, protocol, t: float) -> Tensor:
        sigma = torch.as_tensor(sigma)
        ctx = self.context_tokens(protocol, float(t))
        _, d = self.log_psi_and_dt(sigma, ctx.M, ctx.dM_dt)
        check_finite(d, "dlogpsi_dt", t=t)
        return d
