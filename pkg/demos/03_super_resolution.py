#!/usr/bin/env python3
# Query a model trained on a 100-point time grid with a 200-point grid.
# The operator acts on Fourier modes, so nothing is retrained or interpolated.

from pathlib import Path

from noqs.checkpoint import load_checkpoint
from noqs.cli import superres_profiles
from noqs.config import config_from_dict
from noqs.protocols import sample_fourier_protocol
from noqs.reports import plot_profile

root = Path(__file__).resolve().parents[1]
out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

state = load_checkpoint(root / "artifacts" / "desk_2x2" / "final.ckpt")
cfg = config_from_dict(state.config)
p = sample_fourier_protocol(cfg.protocol, cfg.grid.build(), 10_000)

res = superres_profiles(state.model, cfg, p, train_Nt=100, eval_Nt=200)
for k, v in res["metrics"].items():
    print(f"{k:>40}: {v}")
plot_profile({f"N_t={len(v['t'])}": (v["t"], v["dX"]) for v in res["profiles"].values()},
             out / "superres_error.png", ylabel="|d<X>|")
