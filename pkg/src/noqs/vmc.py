"""Local estimators and Monte-Carlo observables for the driven Ising model."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .ansatz import check_finite
from .lattice import HamiltonianSpec, Lattice, all_configs

log = logging.getLogger(__name__)

LOG_RATIO_CLAMP = 30.0


class ClampCounter:
    """Counts amplitude log-ratios that hit the clamp."""

    def __init__(self):
        self.count = 0

    def record(self, n: int):
        if n:
            if self.count == 0:
                log.warning("amplitude log-ratio clamped at +-%g", LOG_RATIO_CLAMP)
            self.count += n


clamp_events = ClampCounter()


def flip_each(sigma: Tensor) -> Tensor:
    """(..., N) -> (..., N, N); row i has spin i flipped."""
    N = sigma.shape[-1]
    signs = 1 - 2 * torch.eye(N, dtype=sigma.dtype)
    return sigma.unsqueeze(-2) * signs


def diagonal_terms(sigma: Tensor, lat: Lattice) -> tuple[Tensor, Tensor]:
    """(sum over bonds of s_i s_j, sum of s_i) as float tensors."""
    b = torch.as_tensor(lat.bond_array)
    s = sigma.to(torch.float64)
    zz = (s[..., b[:, 0]] * s[..., b[:, 1]]).sum(-1) if len(b) else torch.zeros(s.shape[:-1], dtype=s.dtype)
    return zz, s.sum(-1)


def flip_ratios(ansatz, sigma: Tensor, M: Tensor, log_psi: Tensor | None = None) -> Tensor:
    """psi(flip_i sigma) / psi(sigma) for every site i, shape (..., N)."""
    if log_psi is None:
        log_psi = ansatz.log_psi(sigma, M)
    lp_flip = ansatz.log_psi(flip_each(sigma), M.unsqueeze(-3))
    d = lp_flip - log_psi.unsqueeze(-1)
    re = d.real
    clamped = re.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
    clamp_events.record(int((clamped != re).sum()))
    return torch.exp(torch.complex(clamped, d.imag))


def local_energy_batch(ansatz, sigma, M, hx, hz, lat: Lattice, spec: HamiltonianSpec,
                       log_psi: Tensor | None = None) -> Tensor:
    """E_loc for a batch; ``hx``/``hz`` broadcast against the batch shape."""
    zz, z = diagonal_terms(sigma, lat)
    ratios = flip_ratios(ansatz, sigma, M, log_psi)
    dtype = ratios.real.dtype
    hx = torch.as_tensor(hx, dtype=dtype)
    hz = torch.as_tensor(hz, dtype=dtype)
    return (spec.J * zz + hz * z).to(dtype) + hx * ratios.sum(-1)


def _fields_at(protocol, t):
    hx, hz = protocol(np.asarray(t, dtype=np.float64))
    return float(hx), float(hz)


def local_energy(model, sigma, protocol, t: float, lat: Lattice, spec: HamiltonianSpec = HamiltonianSpec()) -> Tensor:
    sigma = torch.as_tensor(sigma)
    ctx = model.context_tokens(protocol, float(t))
    hx, hz = _fields_at(protocol, t)
    E = local_energy_batch(model.ansatz, sigma, ctx.M, hx, hz, lat, spec)
    check_finite(E, "local energy", t=t)
    return E


def local_residual(model, sigma, protocol, t: float, lat: Lattice, spec: HamiltonianSpec = HamiltonianSpec()) -> Tensor:
    """L_loc = i d/dt log psi - E_loc."""
    sigma = torch.as_tensor(sigma)
    ctx = model.context_tokens(protocol, float(t))
    hx, hz = _fields_at(protocol, t)
    lp, dlp = model.log_psi_and_dt(sigma, ctx.M, ctx.dM_dt)
    E = local_energy_batch(model.ansatz, sigma, ctx.M, hx, hz, lat, spec, log_psi=lp)
    L = 1j * dlp - E
    check_finite(L, "local residual", t=t)
    return L


@dataclass
class ObservableSeries:
    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n_samples: int
    observable: str
    imag_mean: np.ndarray | None = field(default=None, repr=False)


OBSERVABLES = ("X", "ZZ", "Z", "E")


def observable_locals(ansatz, sigma, M, hx, hz, lat, spec) -> dict[str, Tensor]:
    """Per-sample local values of the site/bond-averaged observables."""
    zz, z = diagonal_terms(sigma, lat)
    ratios = flip_ratios(ansatz, sigma, M)
    N = lat.N
    x_loc = ratios.sum(-1) / N
    zz_avg = zz / max(lat.n_bonds, 1)
    z_avg = z / N
    e_loc = (spec.J * zz + hz * z) / N + hx * x_loc
    return {"X": x_loc, "ZZ": zz_avg.to(x_loc.dtype), "Z": z_avg.to(x_loc.dtype), "E": e_loc}


@torch.no_grad()
def estimate_observables(model, protocol, times, n_samples: int, rng_seed: int, lat: Lattice,
                         spec: HamiltonianSpec = HamiltonianSpec(), chunk: int = 16) -> dict[str, ObservableSeries]:
    """Sampled <X>, <ZZ>, <Z>, E (per site) at each time, fresh samples per time point."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    times = np.asarray(times, dtype=np.float64)
    series = model.encode([protocol])
    hx_all, hz_all = protocol(times)
    acc = {k: ([], [], []) for k in OBSERVABLES}
    dtype = model.operator.M0.dtype
    for start in range(0, len(times), chunk):
        sl = slice(start, start + chunk)
        t = torch.as_tensor(times[sl], dtype=dtype).reshape(1, -1)
        M = model.operator.tokens(series, t, with_derivative=False).M[0]  # (T, Nc, de)
        samples = []
        for j in range(M.shape[0]):
            g = torch.Generator().manual_seed(_substream(rng_seed, start + j))
            samples.append(model.ansatz.sample(M[j], n_samples, g))
        hx = torch.as_tensor(hx_all[sl], dtype=dtype)
        hz = torch.as_tensor(hz_all[sl], dtype=dtype)
        per_time = []
        for j, s in enumerate(samples):
            # local values depend only on the configuration: evaluate each distinct one once
            uniq, inverse = torch.unique(s, dim=0, return_inverse=True)
            loc = observable_locals(model.ansatz, uniq, M[j], hx[j], hz[j], lat, spec)
            per_time.append({k: v[inverse] for k, v in loc.items()})
        locs = {k: torch.stack([d[k] for d in per_time]) for k in OBSERVABLES}
        for k, v in locs.items():
            check_finite(v, f"local {k}")
            acc[k][0].append(v.real.mean(-1).numpy())
            acc[k][1].append((v.real.std(-1, unbiased=True) / np.sqrt(n_samples)).numpy())
            acc[k][2].append(v.imag.mean(-1).numpy())
    return {k: ObservableSeries(times, np.concatenate(m), np.concatenate(s), n_samples, k, np.concatenate(im))
            for k, (m, s, im) in acc.items()}


@torch.no_grad()
def enumerate_observables(model, protocol, times, lat: Lattice,
                          spec: HamiltonianSpec = HamiltonianSpec()) -> dict[str, ObservableSeries]:
    """Exact expectations of the model state by summing over all 2**N configurations."""
    times = np.asarray(times, dtype=np.float64)
    dtype = model.operator.M0.dtype
    series = model.encode([protocol])
    t = torch.as_tensor(times, dtype=dtype).reshape(1, -1)
    M = model.operator.tokens(series, t, with_derivative=False).M[0][:, None]  # (T, 1, Nc, de)
    sigma = torch.as_tensor(all_configs(lat.N))
    log_p, _ = model.ansatz(sigma, M)
    p = torch.exp(log_p)  # (T, 2**N)
    hx, hz = protocol(times)
    locs = observable_locals(model.ansatz, sigma, M, torch.as_tensor(hx)[:, None],
                             torch.as_tensor(hz)[:, None], lat, spec)
    out = {}
    for k, v in locs.items():
        mean = (p * v).sum(-1)
        out[k] = ObservableSeries(times, mean.real.numpy(), np.zeros(len(times)), 0, k, mean.imag.numpy())
    return out


def _substream(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def observable_surrogates(model, protocol, times, n_samples: int, rng_seed: int, lat: Lattice,
                          spec: HamiltonianSpec = HamiltonianSpec(), exact: bool = False):
    """Differentiable estimates of the averaged observables at ``times``.

    Returns ``(values, surrogates, variances)``: dicts of (T,) tensors.
    ``values`` are the (detached) Monte-Carlo means and ``variances`` the
    variances of those means. The surrogates have the same values and carry the
    gradient of the expectation (pathwise plus score-function term). With
    ``exact`` the Born weights of the full basis replace the samples.
    """
    from .training import use_basis

    times = np.asarray(times, dtype=np.float64)
    dtype = model.operator.M0.dtype
    series = model.encode([protocol])
    t = torch.as_tensor(times, dtype=dtype).reshape(1, -1)
    M = model.operator.tokens(series, t, with_derivative=False).M[0][:, None]  # (T, 1, Nc, de)
    hx, hz = protocol(times)
    hx = torch.as_tensor(hx, dtype=dtype)[:, None]
    hz = torch.as_tensor(hz, dtype=dtype)[:, None]
    if exact or use_basis(lat.N, n_samples):
        sigma = torch.as_tensor(all_configs(lat.N))
        log_p, _ = model.ansatz(sigma, M)
        p = torch.exp(log_p).detach()
        if exact:
            w = p
        else:
            g = torch.Generator().manual_seed(_substream(rng_seed, 0))
            draws = torch.multinomial(p, n_samples, replacement=True, generator=g)
            w = torch.zeros_like(p).scatter_add_(-1, draws, torch.ones_like(draws, dtype=p.dtype)) / n_samples
    else:
        with torch.no_grad():
            sigma = torch.stack([model.ansatz.sample(M[j, 0], n_samples,
                                                     torch.Generator().manual_seed(_substream(rng_seed, j)))
                                 for j in range(len(times))])
        log_p, _ = model.ansatz(sigma, M)
        w = torch.full(log_p.shape, 1.0 / n_samples, dtype=dtype)
    locs = observable_locals(model.ansatz, sigma, M, hx, hz, lat, spec)
    values, surrogates, variances = {}, {}, {}
    for k, v in locs.items():
        v = v.real
        mean = (w * v).sum(-1)
        dev = v.detach() - mean.detach()[..., None]
        values[k] = mean.detach()
        surrogates[k] = mean + (w * dev * log_p).sum(-1)
        variances[k] = torch.zeros_like(values[k]) if exact else (w * dev**2).sum(-1) / (n_samples - 1)
    return values, surrogates, variances
