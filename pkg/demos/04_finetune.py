#!/usr/bin/env python3
# Refine the trained model on one unseen protocol from four measured points
# of <X> and <ZZ>, then check an observable that was never fit.

from pathlib import Path

import numpy as np

from noqs.checkpoint import load_checkpoint
from noqs.cli import oracle_report
from noqs.config import config_from_dict
from noqs.finetune import FinetuneConfig, MeasurementSet, finetune
from noqs.protocols import make_tanh_ramp, tanh_field
from noqs.reports import TrajectoryReport, plot_comparison
from noqs.vmc import enumerate_observables

root = Path(__file__).resolve().parents[1]
out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

state = load_checkpoint(root / "artifacts" / "desk_2x2" / "final.ckpt")
cfg = config_from_dict(state.config)
lat, grid = cfg.lattice.build(), cfg.grid.build()
p = make_tanh_ramp(grid, 0.6, 1.4, 0.5, 10.0, hz=tanh_field(0.0, 0.06, 0.5, 10.0))
exact = oracle_report(p, lat, "plus")


def errors(model):
    o = enumerate_observables(model, p, grid.points, lat)
    return {k: float(np.abs(o[k].mean - exact.mean[k]).mean()) for k in ("E", "X", "ZZ", "Z")}


# %% "measurements": exact values at four times
t_meas = np.array([0.2, 0.4, 0.6, 0.8])
ref = oracle_report(p, lat, "plus", times=t_meas)
ms = MeasurementSet(t_meas, ref.mean["X"], ref.mean["ZZ"])

before = errors(state.model)
state, history = finetune(state, lat, p, ms, FinetuneConfig(steps=300, lr=3e-4, freeze_ansatz=True))
after = errors(state.model)
print(f"data loss {history[0]:.2e} -> {history[-1]:.2e}")
for k in before:
    print(f"{k:>3} MAE {before[k]:.4f} -> {after[k]:.4f}")

model = TrajectoryReport.from_series(enumerate_observables(state.model, p, grid.points, lat))
plot_comparison(model, exact, out / "finetuned", labels=("fine-tuned", "exact"))
