#!/usr/bin/env python3
# Exact dynamics of the driven 2x2 Ising model for a few drive shapes.
# Everything here is the dense reference solver; no learning involved.

from pathlib import Path

import numpy as np

from noqs.cli import oracle_report
from noqs.config import RunConfig
from noqs.lattice import build_lattice
from noqs.protocols import gaussian_field, make_gaussian_pulse, make_tanh_ramp, sample_fourier_protocol, tanh_field
from noqs.reports import plot_profile

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

cfg = RunConfig()
grid = cfg.grid.build()
lat = build_lattice(2, 2)

# %% three drives: a random Fourier protocol from the training ensemble, a pulse and a ramp
drives = {
    "fourier": sample_fourier_protocol(cfg.protocol, grid, 7),
    "gaussian": make_gaussian_pulse(grid, 0.6, 0.5, 0.1, baseline=1.0,
                                    hz=gaussian_field(0.06, 0.5, 0.1)),
    "tanh": make_tanh_ramp(grid, 0.6, 1.4, 0.5, 10.0, hz=tanh_field(0.0, 0.06, 0.5, 10.0)),
}
plot_profile({k: (grid.points, p.fields[:, 0]) for k, p in drives.items()}, out / "fields_hx.png", ylabel="h_x(t)")

# %% exact observables starting from |+>
reports = {k: oracle_report(p, lat, "plus") for k, p in drives.items()}
for name, rep in reports.items():
    print(f"{name:>8}: <X> {rep.mean['X'][0]:.3f} -> {rep.mean['X'][-1]:.3f}, "
          f"<ZZ> {rep.mean['ZZ'][0]:.3f} -> {rep.mean['ZZ'][-1]:.3f}")
plot_profile({k: (r.times, r.mean["X"]) for k, r in reports.items()}, out / "exact_X.png", ylabel="<X>(t)")

# %% the constant-prediction baseline that a learned model has to beat
for name, rep in reports.items():
    base = {k: np.abs(rep.mean[k] - rep.mean[k][0]).mean() for k in ("E", "X", "ZZ")}
    print(f"{name:>8} constant baseline MAE:", {k: round(float(v), 3) for k, v in base.items()})
