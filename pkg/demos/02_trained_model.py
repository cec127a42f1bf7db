#!/usr/bin/env python3
# One trained network, many protocols: compare predictions of the desk model
# against exact dynamics, in and out of the training distribution.
# Train first with:  noqs train --config configs/desk_2x2.toml --out artifacts/desk_2x2

from pathlib import Path

import numpy as np

from noqs.checkpoint import load_checkpoint
from noqs.cli import oracle_report
from noqs.config import config_from_dict
from noqs.protocols import gaussian_field, make_gaussian_pulse, make_tanh_ramp, sample_fourier_protocol, tanh_field
from noqs.reports import TrajectoryReport, compare_reports, plot_comparison
from noqs.vmc import enumerate_observables, estimate_observables

root = Path(__file__).resolve().parents[1]
out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

state = load_checkpoint(root / "artifacts" / "desk_2x2" / "final.ckpt")
cfg = config_from_dict(state.config)
lat, grid = cfg.lattice.build(), cfg.grid.build()
print(f"checkpoint at step {state.step}, last TDVP loss {state.history[-1]['tdvp']:.3f}")

protocols = {f"fourier_{s}": sample_fourier_protocol(cfg.protocol, grid, s) for s in (10_000, 10_001)}
protocols["gaussian"] = make_gaussian_pulse(grid, 0.6, 0.5, 0.1, baseline=1.0,
                                            hz=gaussian_field(0.06, 0.5, 0.1))
protocols["tanh"] = make_tanh_ramp(grid, 0.6, 1.4, 0.5, 10.0, hz=tanh_field(0.0, 0.06, 0.5, 10.0))

# %% exact expectations of the network state (16 configurations) vs the reference
for name, p in protocols.items():
    model = TrajectoryReport.from_series(enumerate_observables(state.model, p, grid.points, lat))
    exact = oracle_report(p, lat, "plus")
    m = compare_reports(model, exact)
    print(f"{name:>12}: MAE " + "  ".join(f"{k} {m[k]['mae']:.4f}" for k in ("E", "X", "ZZ", "Z")))
    plot_comparison(model, exact, out / name, labels=("network", "exact"))

# %% the same with Monte Carlo samples, as one would do on a lattice too big to enumerate
p = protocols["fourier_10000"]
sampled = estimate_observables(state.model, p, grid.points[::10], 4096, 0, lat)
enum = enumerate_observables(state.model, p, grid.points[::10], lat)
z = np.abs(sampled["X"].mean - enum["X"].mean) / sampled["X"].stderr
print(f"sampled vs enumerated <X>: max deviation {z.max():.2f} standard errors")
