"""Protocol-specific refinement from sparse <X>, <ZZ> measurements."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .lattice import HamiltonianSpec, Lattice
from .protocols import atomic_write_text, read_header
from .vmc import _substream, observable_surrogates

log = logging.getLogger(__name__)


@dataclass
class MeasurementSet:
    t: np.ndarray
    x_mean: np.ndarray
    zz_mean: np.ndarray
    x_err: np.ndarray | None = None
    zz_err: np.ndarray | None = None
    protocol_ref: str | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x_mean = np.asarray(self.x_mean, dtype=np.float64)
        self.zz_mean = np.asarray(self.zz_mean, dtype=np.float64)
        if len(self.t) == 0:
            raise ValueError("measurement set is empty")
        if np.any(np.abs(self.x_mean) > 1) or np.any(np.abs(self.zz_mean) > 1):
            raise ValueError("measured <X>, <ZZ> must lie in [-1, 1]")
        if np.any(self.t < 0):
            raise ValueError("measurement times must be non-negative")

    def __len__(self):
        return len(self.t)


def save_measurements(ms: MeasurementSet, path):
    lines = ["# kind=measurements"]
    if ms.protocol_ref:
        lines.append(f"# protocol_ref={ms.protocol_ref}")
    with_err = ms.x_err is not None and ms.zz_err is not None
    lines.append("# columns=t x_mean zz_mean" + (" x_err zz_err" if with_err else ""))
    for i in range(len(ms)):
        row = [ms.t[i], ms.x_mean[i], ms.zz_mean[i]]
        if with_err:
            row += [ms.x_err[i], ms.zz_err[i]]
        lines.append(" ".join(f"{v:.16e}" for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_measurements(path) -> MeasurementSet:
    header, rows = read_header(path)
    if rows.ndim != 2 or rows.shape[1] not in (3, 5):
        raise ValueError(f"{path}: expected rows 't x_mean zz_mean [x_err zz_err]'")
    errs = (rows[:, 3], rows[:, 4]) if rows.shape[1] == 5 else (None, None)
    return MeasurementSet(rows[:, 0], rows[:, 1], rows[:, 2], *errs, protocol_ref=header.get("protocol_ref"))


def _loss_terms(model, lat, protocol, ms: MeasurementSet, n_samples, seed, spec, exact, weighted):
    values, surr, var = observable_surrogates(model, protocol, ms.t, n_samples, seed, lat, spec, exact=exact)
    dx = values["X"] - torch.as_tensor(ms.x_mean)
    dzz = values["ZZ"] - torch.as_tensor(ms.zz_mean)
    wx = wzz = torch.ones_like(dx)
    if weighted and ms.x_err is not None and ms.zz_err is not None:
        wx = torch.as_tensor(1.0 / np.asarray(ms.x_err) ** 2)
        wzz = torch.as_tensor(1.0 / np.asarray(ms.zz_err) ** 2)
    value = (wx * dx**2 + wzz * dzz**2).sum()
    # expected loss from estimator noise alone
    floor = (wx * var["X"] + wzz * var["ZZ"]).sum()
    if weighted and ms.x_err is not None and ms.zz_err is not None:
        floor = floor + 2 * len(ms)
    # d(loss) = 2 * residual * d<O>
    surrogate = (2 * wx * dx * surr["X"] + 2 * wzz * dzz * surr["ZZ"]).sum()
    return value, surrogate, float(floor)


def data_loss(model, lat: Lattice, protocol, measurements: MeasurementSet, n_samples: int = 1024,
              seed: int = 0, spec: HamiltonianSpec = HamiltonianSpec(), exact: bool = False,
              weighted: bool = False) -> float:
    """sum_m (<X(t_m)> - X_m)^2 + (<ZZ(t_m)> - ZZ_m)^2 with model expectations from samples."""
    if len(measurements) == 0:
        raise ValueError("measurement set is empty")
    with torch.no_grad():
        value, _, _ = _loss_terms(model, lat, protocol, measurements, n_samples, seed, spec, exact, weighted)
    return float(value)


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 300
    lr: float = 3e-4
    n_samples: int = 1024
    seed: int = 0
    freeze_operator: bool = False
    # train the operator only; the state stays on the transformer's learned manifold
    freeze_ansatz: bool = False
    weighted: bool = False
    exact: bool = False
    # skip an update while the loss is within this multiple of its noise floor
    noise_factor: float = 4.0
    tol: float = 1e-12


def finetune(state, lat: Lattice, protocol, measurements: MeasurementSet, cfg: FinetuneConfig = FinetuneConfig(),
             spec: HamiltonianSpec | None = None):
    """Minimise the data loss alone for ``cfg.steps`` Adam steps; returns (state, loss history).

    Steps whose loss is already consistent with estimator noise are skipped:
    Adam rescales any gradient to a step of size ~lr, so following pure noise
    would drift the parameters away from a state that already fits.
    """
    model = state.model
    if spec is None:
        spec = HamiltonianSpec(state.config.get("train", {}).get("J", 1.0))
    if cfg.freeze_operator:
        for p in model.operator.parameters():
            p.requires_grad_(False)
    if cfg.freeze_ansatz:
        for p in model.ansatz.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    history = []
    for step in range(cfg.steps):
        opt.zero_grad(set_to_none=True)
        value, surrogate, floor = _loss_terms(model, lat, protocol, measurements, cfg.n_samples,
                                              _substream(cfg.seed, 9, step), spec, cfg.exact, cfg.weighted)
        history.append(float(value))
        if float(value) <= cfg.noise_factor * floor + cfg.tol:
            continue
        surrogate.backward()
        opt.step()
    log.info("fine-tuning: data loss %.3e -> %.3e", history[0] if history else float("nan"),
             history[-1] if history else float("nan"))
    state.optimizer = None
    return state, history
