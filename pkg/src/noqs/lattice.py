"""Square-lattice geometry and the driven transverse/longitudinal-field Ising model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Lattice:
    """Open-boundary ``Lx`` x ``Ly`` square lattice.

    Sites are labelled by their autoregressive position ``0..N-1``; ``order[r]``
    is the position of the site at raster index ``r = y * Lx + x``. Bonds are
    stored in position labels with ``i < j``.
    """

    Lx: int
    Ly: int
    ordering: str
    order: tuple[int, ...]
    bonds: tuple[tuple[int, int], ...]

    @property
    def N(self) -> int:
        return self.Lx * self.Ly

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    @property
    def bond_array(self) -> np.ndarray:
        return np.asarray(self.bonds, dtype=np.int64).reshape(-1, 2)

    def label(self) -> str:
        return f"{self.Lx}x{self.Ly}"


def build_lattice(Lx: int, Ly: int, ordering: str = "raster", boundary: str = "open") -> Lattice:
    """Build an open-boundary square lattice.

    ``ordering`` is ``"raster"`` (row-major) or ``"snake"`` (boustrophedon rows).
    """
    if int(Lx) != Lx or int(Ly) != Ly or Lx < 1 or Ly < 1:
        raise ValueError(f"lattice dimensions must be positive integers, got ({Lx}, {Ly})")
    if boundary != "open":
        raise ValueError(f"only open boundary conditions are supported, got {boundary!r}")
    Lx, Ly = int(Lx), int(Ly)

    order = []
    for y in range(Ly):
        for x in range(Lx):
            if ordering == "raster":
                order.append(y * Lx + x)
            elif ordering == "snake":
                order.append(y * Lx + (x if y % 2 == 0 else Lx - 1 - x))
            else:
                raise ValueError(f"unknown ordering {ordering!r}")

    def pos(x, y):
        return order[y * Lx + x]

    horizontal, vertical = [], []
    for y in range(Ly):
        for x in range(Lx - 1):
            horizontal.append(tuple(sorted((pos(x, y), pos(x + 1, y)))))
    for y in range(Ly - 1):
        for x in range(Lx):
            vertical.append(tuple(sorted((pos(x, y), pos(x, y + 1)))))
    return Lattice(Lx, Ly, ordering, tuple(order), tuple(horizontal + vertical))


@dataclass(frozen=True)
class HamiltonianSpec:
    """Static part of H(t) = J sum ZZ + hx(t) sum X + hz(t) sum Z."""

    J: float = 1.0
    protocol_ref: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not np.isfinite(self.J):
            raise ValueError("J must be finite")


def _check_sigma(lat: Lattice, sigma) -> np.ndarray:
    sigma = np.asarray(sigma)
    if sigma.shape[-1] != lat.N:
        raise ValueError(f"spin configuration has length {sigma.shape[-1]}, lattice has N={lat.N}")
    if not np.all(np.abs(sigma) == 1):
        raise ValueError("spin entries must be +1 or -1")
    return sigma


def diagonal_energy(lat: Lattice, spec: HamiltonianSpec, sigma, hx: float = 0.0, hz: float = 0.0):
    """J * sum_<ij> s_i s_j + hz * sum_i s_i. Works on a single config or a batch (..., N).

    ``hx`` does not enter the diagonal; it is accepted to mirror the full
    Hamiltonian signature.
    """
    sigma = _check_sigma(lat, sigma).astype(np.float64)
    b = lat.bond_array
    zz = (sigma[..., b[:, 0]] * sigma[..., b[:, 1]]).sum(-1) if len(b) else np.zeros(sigma.shape[:-1])
    return spec.J * zz + hz * sigma.sum(-1)


def offdiagonal_connections(lat: Lattice, sigma) -> list[tuple[np.ndarray, float]]:
    """All single-spin-flip neighbours of ``sigma`` with unit coefficient (times hx)."""
    sigma = _check_sigma(lat, sigma)
    out = []
    for i in range(lat.N):
        flipped = sigma.copy()
        flipped[i] = -flipped[i]
        out.append((flipped, 1.0))
    return out


def all_configs(N: int) -> np.ndarray:
    """All 2**N configurations, row k is the binary expansion of k (bit N-1-i <-> site i, 1 -> -1)."""
    k = np.arange(2**N)[:, None]
    bits = (k >> np.arange(N - 1, -1, -1)[None, :]) & 1
    return (1 - 2 * bits).astype(np.int64)


def config_index(sigma) -> np.ndarray:
    """Inverse of :func:`all_configs`."""
    sigma = np.asarray(sigma)
    N = sigma.shape[-1]
    bits = (1 - sigma) // 2
    return (bits * (1 << np.arange(N - 1, -1, -1))).sum(-1)
