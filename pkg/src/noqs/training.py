"""Self-supervised operator training: anchor pre-training, then TDVP + anchor loss."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .ansatz import NumericError, TransformerConfig
from .lattice import HamiltonianSpec, Lattice, all_configs
from .neural_operator import NOQS, FNOConfig
from .protocols import FourierProtocolSpec, TimeGrid, sample_fourier_protocol
from .vmc import _substream, diagonal_terms, local_energy_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    B: int = 4
    K: int = 3
    M: int = 128
    steps: int = 8000
    lr0: float = 4e-4
    lr_decay: float = 0.95
    lr_decay_every: int = 2000
    lr_min: float = 4e-6
    lambda_w: float = 10.0
    seed: int = 0
    initial_state: str = "plus"
    anchor_samples: int = 128
    loss_form: str = "variance"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pretrain_steps: int = 30000
    pretrain_lr: float = 1e-3
    pretrain_tol: float = 1e-10
    checkpoint_every: int = 1000
    J: float = 1.0
    # global gradient-norm cap, 0 disables
    grad_clip: float = 10.0
    # sum over the full basis with exact Born weights instead of drawing M samples (small N only)
    exact_expectation: bool = False

    def __post_init__(self):
        for name in ("B", "K", "M", "lr0", "lr_decay", "lr_decay_every", "lr_min", "anchor_samples"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0 or self.lambda_w < 0 or self.grad_clip < 0:
            raise ValueError("steps, lambda_w and grad_clip must be non-negative")
        if self.lr_min > self.lr0:
            raise ValueError("lr_min must not exceed lr0")
        if self.initial_state not in ("plus", "ferro"):
            raise ValueError(f"unknown initial state {self.initial_state!r}")
        if self.loss_form not in ("variance", "raw"):
            raise ValueError(f"unknown loss form {self.loss_form!r}")


def learning_rate(cfg: TrainConfig, step: int) -> float:
    return max(cfg.lr_min, cfg.lr0 * cfg.lr_decay ** (step // cfg.lr_decay_every))


@dataclass
class TrainState:
    model: NOQS
    optimizer: torch.optim.Optimizer | None
    step: int = 0
    history: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)


def build_model(lat: Lattice, tcfg: TransformerConfig, fcfg: FNOConfig, seed: int) -> NOQS:
    torch.manual_seed(seed)
    return NOQS(lat.N, tcfg, fcfg).double()


def make_optimizer(model: NOQS, cfg: TrainConfig, lr: float | None = None) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=cfg.lr0 if lr is None else lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


# -- loss pieces -------------------------------------------------------------

def residual_loss(L: Tensor, log_p: Tensor, weights: Tensor | None = None, form: str = "variance"):
    """(loss value, surrogate) for residuals ``L`` over the last axis.

    The surrogate's gradient is the pathwise term plus the score-function
    correction ``E[(|dL|^2 - loss) d log p]``. With ``weights`` set to the
    detached Born probabilities of an enumerated basis it is the exact gradient.
    """
    w = torch.full(L.shape, 1.0 / L.shape[-1], dtype=log_p.dtype) if weights is None else weights
    if form == "variance":
        centre = (w * L).sum(-1, keepdim=True)
        dev = (L - centre).abs() ** 2
    else:
        dev = L.abs() ** 2
    value = (w * dev).sum(-1)
    score = (w * (dev.detach() - value.detach().unsqueeze(-1)) * log_p).sum(-1)
    return value.mean(), (value + score).mean()


def initial_amplitudes(N: int, kind: str, sigma: Tensor) -> Tensor:
    if kind == "plus":
        return torch.full(sigma.shape[:-1], 2.0 ** (-N / 2), dtype=torch.float64)
    return (sigma == 1).all(-1).to(torch.float64)


def sample_initial(N: int, kind: str, n: int, generator: torch.Generator) -> Tensor:
    if kind == "plus":
        return 1 - 2 * torch.randint(0, 2, (n, N), generator=generator)
    return torch.ones(n, N, dtype=torch.long)


def anchor_loss(model: NOQS, initial_state: str = "plus", n_samples: int = 128,
                generator: torch.Generator | int | None = 0, exact: bool = False) -> Tensor:
    """E_{s ~ |psi0|^2} |1 - psi(s, t=0) / psi0(s)|^2, sampled from the product initial state."""
    N = model.n_sites
    if exact:
        sigma = torch.as_tensor(all_configs(N))
        psi0 = initial_amplitudes(N, initial_state, sigma)
        keep = psi0 != 0
        sigma, psi0 = sigma[keep], psi0[keep]
        w = psi0**2
    else:
        if isinstance(generator, int):
            generator = torch.Generator().manual_seed(generator)
        sigma = sample_initial(N, initial_state, n_samples, generator)
        psi0 = initial_amplitudes(N, initial_state, sigma)
        w = torch.full_like(psi0, 1.0 / n_samples)
    lp = model.ansatz.log_psi(sigma, model.operator.M0)
    ratio = torch.exp(lp - torch.log(psi0).to(lp.dtype))
    return (w * (1 - ratio).abs() ** 2).sum()


def step_protocols(spec: FourierProtocolSpec, grid: TimeGrid, seed: int, step: int, count: int):
    return [sample_fourier_protocol(spec, grid, _substream(seed, 1, step, b)) for b in range(count)]


def flip_index(N: int) -> Tensor:
    """flip_index[j, i] = basis index of configuration j with spin i flipped."""
    j = torch.arange(2**N)[:, None]
    return j ^ (1 << (N - 1 - torch.arange(N)))[None, :]


def use_basis(N: int, n_samples: int) -> bool:
    """Whether evaluating all 2**N configurations is cheaper than samples plus their flips."""
    return 2**N <= n_samples * (N + 1)


def tdvp_terms(model: NOQS, protocols, times: np.ndarray, n_samples: int, seed: int, lat: Lattice,
               spec: HamiltonianSpec, form: str = "variance", enumerate_basis: bool = False):
    """TDVP loss and surrogate for protocols x times (B, K).

    Configurations are drawn from the current Born distribution, or with
    ``enumerate_basis`` the whole basis is used with exact Born weights. For
    small lattices the wavefunction is evaluated once on the whole basis and
    the draws are taken from it (same law as autoregressive sampling; each
    distinct configuration is evaluated once).
    """
    dtype = model.operator.M0.dtype
    series = model.encode(protocols)
    t = torch.as_tensor(times, dtype=dtype)
    ctx = model.operator.tokens(series, t)
    M = ctx.M.unsqueeze(-3)
    dM = ctx.dM_dt.unsqueeze(-3)
    fields = [p(np.asarray(times)[b]) for b, p in enumerate(protocols)]
    hx = torch.as_tensor(np.stack([f[0] for f in fields]), dtype=dtype).unsqueeze(-1)
    hz = torch.as_tensor(np.stack([f[1] for f in fields]), dtype=dtype).unsqueeze(-1)
    g = torch.Generator().manual_seed(seed)

    if enumerate_basis or use_basis(lat.N, n_samples):
        basis = torch.as_tensor(all_configs(lat.N))
        log_psi, dlog_psi = model.log_psi_and_dt(basis, M, dM)  # (B, K, 2**N)
        ratios = torch.exp(log_psi[..., flip_index(lat.N)] - log_psi.unsqueeze(-1))
        zz, z = diagonal_terms(basis, lat)
        E = (spec.J * zz + hz * z) + hx * ratios.sum(-1)
        log_p = 2.0 * log_psi.real
        p = torch.exp(log_p).detach()
        if enumerate_basis:
            weights = p
        else:
            flat = p.reshape(-1, p.shape[-1])
            draws = torch.multinomial(flat, n_samples, replacement=True, generator=g)
            counts = torch.zeros_like(flat).scatter_add_(-1, draws, torch.ones_like(draws, dtype=flat.dtype))
            weights = (counts / n_samples).reshape(p.shape)
    else:
        sigma = model.ansatz.sample(ctx.M.detach(), n_samples, g)
        log_psi, dlog_psi = model.log_psi_and_dt(sigma, M, dM)
        E = local_energy_batch(model.ansatz, sigma, M, hx, hz, lat, spec, log_psi=log_psi)
        log_p = 2.0 * log_psi.real
        weights = None
    L = 1j * dlog_psi - E
    return residual_loss(L, log_p, weights, form)


def _step_times(T: float, seed: int, step: int, B: int, K: int) -> np.ndarray:
    rng = np.random.default_rng(_substream(seed, 2, step))
    # open interval (0, T)
    return T * (1e-9 + (1 - 2e-9) * rng.random((B, K)))


def tdvp_step(state: TrainState, lat: Lattice, protocol_spec: FourierProtocolSpec, grid: TimeGrid,
              cfg: TrainConfig) -> TrainState:
    """One optimiser update on a fresh batch of protocols, times and configurations."""
    model, opt, step = state.model, state.optimizer, state.step
    spec = HamiltonianSpec(cfg.J)
    protocols = step_protocols(protocol_spec, grid, cfg.seed, step, cfg.B)
    times = _step_times(grid.T_max, cfg.seed, step, cfg.B, cfg.K)
    lr = learning_rate(cfg, step)
    for attempt in range(2):
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
        tdvp, surrogate = tdvp_terms(model, protocols, times, cfg.M, _substream(cfg.seed, 3, step), lat,
                                     spec, cfg.loss_form, enumerate_basis=cfg.exact_expectation)
        anchor = anchor_loss(model, cfg.initial_state, cfg.anchor_samples,
                             torch.Generator().manual_seed(_substream(cfg.seed, 4, step)))
        total = surrogate + cfg.lambda_w * anchor
        if torch.isfinite(total) and torch.isfinite(tdvp):
            total.backward()
            params = [p for p in model.parameters() if p.grad is not None]
            grad_norm = torch.sqrt(sum((p.grad**2).sum() for p in params))
            if torch.isfinite(grad_norm):
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                break
        log.warning("non-finite loss at step %d (attempt %d), halving lr", step, attempt + 1)
        lr *= 0.5
    else:
        raise NumericError(f"non-finite TDVP loss at step {step} after lr halving "
                           f"(tdvp={tdvp.item()}, anchor={anchor.item()}, lr={lr})")
    state.history.append({"step": step, "tdvp": tdvp.item(), "anchor": anchor.item(), "lr": lr,
                          "grad_norm": grad_norm.item()})
    state.step = step + 1
    return state


def pretrain_initial_state(model: NOQS, cfg: TrainConfig) -> dict:
    """Fit the t = 0 state to the initial product state, then freeze M(0)."""
    exact = model.n_sites <= 12

    def current():
        with torch.no_grad():
            return float(anchor_loss(model, cfg.initial_state, cfg.anchor_samples,
                                     _substream(cfg.seed, 5), exact=exact))

    value = current()
    steps = 0
    if value >= cfg.pretrain_tol:
        opt = torch.optim.Adam(model.parameters(), lr=cfg.pretrain_lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
        while steps < cfg.pretrain_steps and value >= cfg.pretrain_tol:
            opt.zero_grad(set_to_none=True)
            loss = anchor_loss(model, cfg.initial_state, cfg.anchor_samples,
                               torch.Generator().manual_seed(_substream(cfg.seed, 6, steps)), exact=exact)
            loss.backward()
            opt.step()
            steps += 1
            if steps % 50 == 0:
                value = current()
        value = current()
    converged = value < cfg.pretrain_tol
    if not converged:
        log.warning("pre-training stopped at %d steps with anchor loss %.3e", steps, value)
    model.operator.M0.requires_grad_(False)
    return {"steps": steps, "anchor": value, "converged": converged}


def init_state(lat: Lattice, tcfg: TransformerConfig, fcfg: FNOConfig, cfg: TrainConfig,
               config_snapshot: dict | None = None) -> TrainState:
    model = build_model(lat, tcfg, fcfg, cfg.seed)
    info = pretrain_initial_state(model, cfg)
    return TrainState(model, make_optimizer(model, cfg), 0, [], config_snapshot or {}, info)


def validation_loss(model: NOQS, lat: Lattice, protocol_spec: FourierProtocolSpec, grid: TimeGrid,
                    cfg: TrainConfig, n_protocols: int = 4, n_times: int = 8) -> float:
    protocols = [sample_fourier_protocol(protocol_spec, grid, _substream(cfg.seed, 7, b)) for b in range(n_protocols)]
    times = np.tile(np.linspace(0.05, 0.95, n_times) * grid.T_max, (n_protocols, 1))
    with torch.no_grad():
        value, _ = tdvp_terms(model, protocols, times, 512, _substream(cfg.seed, 8), lat,
                              HamiltonianSpec(cfg.J), cfg.loss_form, enumerate_basis=lat.N <= 10)
    return float(value)


def train(cfg: TrainConfig, lat: Lattice, protocol_spec: FourierProtocolSpec, grid: TimeGrid,
          tcfg: TransformerConfig, fcfg: FNOConfig, out_dir=None, state: TrainState | None = None,
          config_snapshot: dict | None = None, log_every: int = 100) -> TrainState:
    """Pre-train (unless resuming) and run TDVP steps up to ``cfg.steps``.

    Checkpoints go to ``out_dir/checkpoints`` every ``cfg.checkpoint_every``
    steps (last three kept, plus the best validation loss).
    """
    from .checkpoint import save_checkpoint

    if state is None:
        state = init_state(lat, tcfg, fcfg, cfg, config_snapshot)
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    best = math.inf
    kept: list[Path] = []
    t_start = time.perf_counter()
    while state.step < cfg.steps:
        tdvp_step(state, lat, protocol_spec, grid, cfg)
        if log_every and state.step % log_every == 0:
            recent = state.history[-log_every:]
            log.info("step %d  tdvp %.4e  anchor %.3e  lr %.2e  (%.1fs)", state.step,
                     np.mean([h["tdvp"] for h in recent]), np.mean([h["anchor"] for h in recent]),
                     recent[-1]["lr"], time.perf_counter() - t_start)
        if ckpt_dir is not None and (state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps):
            path = ckpt_dir / f"step_{state.step:07d}.ckpt"
            save_checkpoint(state, path)
            kept.append(path)
            while len(kept) > 3:
                old = kept.pop(0)
                old.unlink(missing_ok=True)
            val = validation_loss(state.model, lat, protocol_spec, grid, cfg)
            state.history[-1]["validation"] = val
            if val < best:
                best = val
                save_checkpoint(state, ckpt_dir / "best.ckpt")
    state.pretrain.setdefault("wall_clock_s", 0.0)
    state.pretrain["wall_clock_s"] += time.perf_counter() - t_start
    return state
