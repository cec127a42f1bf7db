"""Autoregressive transformer wavefunction conditioned on context tokens.

The sequence fed to the decoder is ``[start, s_1, ..., s_{N-1}]``; the output at
position ``j`` gives the conditional distribution of spin ``j`` given the spins
before it, so the causal mask alone makes the factorisation exact. The
unembedding head emits four numbers per position: two logits for the
conditional and a phase contribution for each of the two spin values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class NumericError(ArithmeticError):
    """Non-finite values encountered in a forward pass or loss."""


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 2
    d_e: int = 32
    n_heads: int = 4
    d_f: int | None = None
    init_std: float = 0.02

    def __post_init__(self):
        if min(self.n_layers, self.d_e, self.n_heads) < 1:
            raise ValueError("transformer dimensions must be positive")
        if self.d_e % self.n_heads:
            raise ValueError(f"d_e={self.d_e} is not divisible by n_heads={self.n_heads}")
        if self.d_f is not None and self.d_f < 1:
            raise ValueError("d_f must be positive")

    @property
    def d_h(self) -> int:
        return self.d_e // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return 4 * self.d_e if self.d_f is None else self.d_f


def softmax(z: Tensor) -> Tensor:
    # explicit form: the fused kernels' forward-mode rules are not safe to backpropagate through
    e = torch.exp(z - z.detach().amax(-1, keepdim=True))
    return e / e.sum(-1, keepdim=True)


def log_softmax(z: Tensor) -> Tensor:
    s = z - z.detach().amax(-1, keepdim=True)
    return s - torch.log(torch.exp(s).sum(-1, keepdim=True))


def spin_index(sigma: Tensor) -> Tensor:
    """+1 -> 0, -1 -> 1."""
    return torch.div(1 - sigma, 2, rounding_mode="floor").long()


def index_spin(idx: Tensor) -> Tensor:
    return 1 - 2 * idx


class LayerNorm(nn.Module):
    """Layer normalisation written out in elementary ops.

    The fused kernel's forward-mode rule does not backpropagate correctly, and
    training differentiates d/dt log psi (a forward-mode tangent) in reverse mode.
    """

    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(-1, keepdim=True)
        xc = x - mu
        var = (xc * xc).mean(-1, keepdim=True)
        return xc * torch.rsqrt(var + self.eps) * self.weight + self.bias


class MultiHeadAttention(nn.Module):
    def __init__(self, d_e: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_e, d_e, bias=False)
        self.k = nn.Linear(d_e, d_e, bias=False)
        self.v = nn.Linear(d_e, d_e, bias=False)
        self.out = nn.Linear(d_e, d_e)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        return x.reshape(*lead, n, self.n_heads, d // self.n_heads).transpose(-2, -3)

    def forward(self, x: Tensor, memory: Tensor, mask: Tensor | None = None) -> Tensor:
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        attn = softmax(scores) @ v
        attn = attn.transpose(-2, -3).reshape(*x.shape)
        return self.out(attn)


class DecoderBlock(nn.Module):
    """Masked self-attention, cross-attention to the context, FFN; each Add & Norm."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_e, cfg.n_heads)
        self.cross_attn = MultiHeadAttention(cfg.d_e, cfg.n_heads)
        self.ffn = nn.Sequential(nn.Linear(cfg.d_e, cfg.ffn_dim), nn.GELU(), nn.Linear(cfg.ffn_dim, cfg.d_e))
        self.norm1 = LayerNorm(cfg.d_e)
        self.norm2 = LayerNorm(cfg.d_e)
        self.norm3 = LayerNorm(cfg.d_e)

    def forward(self, x: Tensor, context: Tensor, causal: Tensor) -> Tensor:
        x = self.norm1(x + self.self_attn(x, x, causal))
        x = self.norm2(x + self.cross_attn(x, context))
        return self.norm3(x + self.ffn(x))


class TransformerWavefunction(nn.Module):
    """log psi(sigma; M) = log p(sigma; M) / 2 + i phi(sigma; M) for N spins."""

    def __init__(self, n_sites: int, cfg: TransformerConfig = TransformerConfig()):
        super().__init__()
        self.n_sites = n_sites
        self.cfg = cfg
        d_e = cfg.d_e
        self.embed = nn.Parameter(torch.empty(2, d_e))
        self.start = nn.Parameter(torch.empty(d_e))
        self.pos = nn.Parameter(torch.empty(n_sites, d_e))
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_layers))
        self.head = nn.Sequential(nn.Linear(d_e, cfg.ffn_dim), nn.GELU(), nn.Linear(cfg.ffn_dim, 4))
        self.register_buffer(
            "causal", torch.triu(torch.ones(n_sites, n_sites, dtype=torch.bool), diagonal=1), persistent=False)
        self.reset_parameters()

    def reset_parameters(self):
        std = self.cfg.init_std
        for name, p in self.named_parameters():
            if "norm" in name:
                continue
            if name.endswith("bias"):
                nn.init.zeros_(p)
            else:
                nn.init.normal_(p, std=std)
        # uniform superposition at initialisation
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    def site_outputs(self, sigma: Tensor, context: Tensor) -> Tensor:
        """Per-position head outputs, shape (..., N, 4).

        ``sigma`` is (..., N) of +-1 (entries past a prefix are ignored by the
        positions before them); ``context`` is (..., N_c, d_e), broadcastable.
        """
        if sigma.shape[-1] != self.n_sites:
            raise ValueError(f"configuration length {sigma.shape[-1]} != N={self.n_sites}")
        if context.shape[-1] != self.cfg.d_e:
            raise ValueError(f"context dimension {context.shape[-1]} != d_e={self.cfg.d_e}")
        emb = self.embed[spin_index(sigma[..., :-1])]
        start = self.start.expand(*emb.shape[:-2], 1, -1)
        x = torch.cat([start, emb], dim=-2) + self.pos
        batch = torch.broadcast_shapes(x.shape[:-2], context.shape[:-2])
        x = x.expand(*batch, *x.shape[-2:])
        context = context.expand(*batch, *context.shape[-2:])
        for block in self.blocks:
            x = block(x, context, self.causal)
        return self.head(x)

    def forward(self, sigma: Tensor, context: Tensor) -> tuple[Tensor, Tensor]:
        """Return (log_p, phase), each of the batch shape."""
        out = self.site_outputs(sigma, context)
        idx = spin_index(sigma).unsqueeze(-1).expand(*out.shape[:-1], 1)
        log_p = log_softmax(out[..., :2]).gather(-1, idx).squeeze(-1).sum(-1)
        phase = out[..., 2:].gather(-1, idx).squeeze(-1).sum(-1)
        return log_p, phase

    def log_psi(self, sigma: Tensor, context: Tensor) -> Tensor:
        log_p, phase = self(sigma, context)
        return torch.complex(0.5 * log_p, phase)

    def conditionals(self, prefix: Tensor, context: Tensor) -> Tensor:
        """p(s_{k+1} = +1 | prefix), p(s_{k+1} = -1 | prefix) for a prefix of length k < N."""
        k = prefix.shape[-1]
        if k >= self.n_sites:
            raise ValueError("prefix must be shorter than the number of sites")
        pad = torch.ones(*prefix.shape[:-1], self.n_sites - k, dtype=prefix.dtype, device=prefix.device)
        out = self.site_outputs(torch.cat([prefix, pad], dim=-1), context)
        return softmax(out[..., k, :2])

    @torch.no_grad()
    def sample(self, context: Tensor, count: int, generator: torch.Generator | int | None = None) -> Tensor:
        """Exact i.i.d. draws from |psi|^2, shape (count, N) (or (..., count, N) for batched contexts)."""
        if count < 1:
            raise ValueError("count must be >= 1")
        if isinstance(generator, int):
            generator = torch.Generator().manual_seed(generator)
        context = context.unsqueeze(-3)
        sigma = torch.ones(*context.shape[:-3], count, self.n_sites, dtype=torch.long)
        for i in range(self.n_sites):
            if context.ndim == 3:
                # draws sharing a prefix share the conditional; evaluate each distinct prefix once
                # (unfilled sites are still +1, so whole rows compare as prefixes)
                prefixes, inverse = torch.unique(sigma, dim=0, return_inverse=True)
                out = self.site_outputs(prefixes, context)
                p_up = softmax(out[:, i, :2])[inverse, 0]
            else:
                out = self.site_outputs(sigma, context)
                p_up = softmax(out[..., i, :2])[..., 0]
            u = torch.rand(p_up.shape, generator=generator, dtype=p_up.dtype)
            sigma[..., i] = torch.where(u < p_up, 1, -1)
        return sigma


def check_finite(x: Tensor, what: str, **ctx):
    if not torch.isfinite(x).all():
        extra = ", ".join(f"{k}={v}" for k, v in ctx.items())
        raise NumericError(f"non-finite values in {what}" + (f" ({extra})" if extra else ""))
