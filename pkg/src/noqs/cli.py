"""Command-line entry point: ``noqs <subcommand> ...``.

Exit codes: 0 success, 2 configuration/usage error, 3 numeric failure,
4 I/O or corrupted file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .ansatz import NumericError
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_from_dict, dump_config, load_config
from .finetune import FinetuneConfig, finetune, load_measurements
from .lattice import HamiltonianSpec, build_lattice
from .oracle import IntegrationError, exact_observables, initial_state, propagate
from .protocols import (TimeGrid, atomic_write_text, gaussian_field, load_protocol, make_gaussian_pulse,
                        make_tanh_ramp, resample, sample_fourier_protocol, save_protocol, tanh_field)
from .reports import (TrajectoryReport, compare_reports, load_report, plot_comparison, plot_profile,
                      save_report, spectral_fraction_above, write_manifest)
from .training import init_state, train
from .vmc import _substream, enumerate_observables, estimate_observables

log = logging.getLogger("noqs")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4


# -- shared helpers ------------------------------------------------------------

class FileFormatError(OSError):
    pass


def _read(loader, path):
    """Run a file loader, reporting malformed content as an I/O error."""
    try:
        return loader(path)
    except (ValueError, KeyError) as exc:
        raise FileFormatError(f"{path}: malformed file ({exc})") from exc


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _write_json(path, data):
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def _checkpoint_config(state) -> RunConfig:
    return config_from_dict(state.config)


def check_compatible(cfg: RunConfig, protocol, lattice: str | None = None):
    """Raise ConfigError listing every field where ``protocol``/``lattice`` disagree with the checkpoint."""
    problems = []
    if lattice is not None:
        Lx, Ly = _parse_lattice(lattice)
        if (Lx, Ly) != (cfg.lattice.Lx, cfg.lattice.Ly):
            problems.append(f"lattice: checkpoint {cfg.lattice.Lx}x{cfg.lattice.Ly}, requested {Lx}x{Ly}")
    if protocol.fields.shape[1] != cfg.fno.d_in:
        problems.append(f"d_in: checkpoint {cfg.fno.d_in}, protocol {protocol.fields.shape[1]}")
    if not np.isclose(protocol.grid.T_max, cfg.grid.T_max):
        problems.append(f"T_max: checkpoint {cfg.grid.T_max}, protocol {protocol.grid.T_max}")
    if protocol.grid.N_t < 2 * cfg.fno.k_max:
        problems.append(f"N_t: protocol has {protocol.grid.N_t} points, operator needs >= {2 * cfg.fno.k_max}")
    if problems:
        raise ConfigError("checkpoint/protocol mismatch: " + "; ".join(problems))


def _parse_lattice(text: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError as exc:
        raise ConfigError(f"lattice must look like 2x2, got {text!r}") from exc


def model_observables(model, protocol, times, cfg: RunConfig, n_samples: int, seed: int, exact: bool = False):
    lat = cfg.lattice.build()
    spec = HamiltonianSpec(cfg.train.J)
    if exact:
        return enumerate_observables(model, protocol, times, lat, spec)
    return estimate_observables(model, protocol, times, n_samples, seed, lat, spec)


def oracle_report(protocol, lat, init: str, J: float = 1.0, tol: float = 1e-9, times=None) -> TrajectoryReport:
    times = protocol.grid.points if times is None else np.asarray(times)
    states = propagate(initial_state(lat.N, init), protocol, times, lat, J=J, tol=tol)
    series = exact_observables(states, lat, protocol, J=J)
    header = {"source": "oracle", "lattice": lat.label(), "init": init, "tol": tol,
              "protocol": protocol.metadata.get("kind", "raw")}
    return TrajectoryReport.from_series(series, header)


# -- subcommands -----------------------------------------------------------------

def cmd_generate_protocols(args):
    cfg = _run_config(args)
    grid = TimeGrid(args.T_max if args.T_max is not None else cfg.grid.T_max,
                    args.N_t if args.N_t is not None else cfg.grid.N_t)
    seed = args.seed if args.seed is not None else cfg.protocol.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    T = grid.T_max
    h0, z0 = cfg.protocol.h_x0, cfg.protocol.h_z0
    paths = []
    for i in range(args.count):
        sub = _substream(seed, 11, i)
        rng = np.random.default_rng(sub)
        if args.kind == "fourier":
            p = sample_fourier_protocol(cfg.protocol, grid, sub)
        elif args.kind == "gaussian":
            # both fields pulse together, inside the envelope of the Fourier ensemble
            c, w = rng.uniform(0.3, 0.7) * T, rng.uniform(0.05, 0.2) * T
            p = make_gaussian_pulse(grid, amplitude=rng.uniform(-0.8, 0.8), center=c, width=w, baseline=h0,
                                    hz=gaussian_field(rng.uniform(-0.06, 0.06), c, w, z0))
        else:
            c, k = rng.uniform(0.3, 0.7) * T, rng.uniform(5.0, 20.0) / T
            p = make_tanh_ramp(grid, start=h0 + rng.uniform(-0.5, 0.5), stop=h0 + rng.uniform(-0.5, 0.5),
                               center=c, steepness=k,
                               hz=tanh_field(z0 + rng.uniform(-0.06, 0.06), z0 + rng.uniform(-0.06, 0.06), c, k))
        p.metadata["seed"] = int(sub)
        path = out / f"{args.kind}_{i:04d}.txt"
        save_protocol(p, path)
        paths.append(str(path))
    write_manifest(out, "generate-protocols", cfg.to_dict(), {"seed": seed},
                   extra={"kind": args.kind, "files": paths})
    print(f"wrote {len(paths)} protocols to {out}")


def cmd_pretrain(args):
    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    state = init_state(cfg.lattice.build(), cfg.transformer, cfg.fno, cfg.train, cfg.to_dict())
    save_checkpoint(state, out / "pretrained.ckpt")
    atomic_write_text(out / "config.toml", dump_config(cfg))
    write_manifest(out, "pretrain", cfg.to_dict(), {"seed": cfg.train.seed}, time.perf_counter() - t0,
                   {"pretrain": state.pretrain})
    print(f"anchor loss {state.pretrain['anchor']:.3e} after {state.pretrain['steps']} steps")


def cmd_train(args):
    cfg = _run_config(args)
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
        if state.config != cfg.to_dict():
            log.warning("resuming with a configuration that differs from the checkpoint snapshot")
        state.config = cfg.to_dict()
    atomic_write_text(out / "config.toml", dump_config(cfg))
    t0 = time.perf_counter()
    state = train(cfg.train, cfg.lattice.build(), cfg.protocol, cfg.grid.build(), cfg.transformer, cfg.fno,
                  out_dir=out, state=state, config_snapshot=cfg.to_dict(), log_every=args.log_every)
    save_checkpoint(state, out / "final.ckpt")
    _write_json(out / "history.json", state.history)
    final = state.history[-1] if state.history else {}
    write_manifest(out, "train", cfg.to_dict(), {"seed": cfg.train.seed, "protocol_seed": cfg.protocol.seed},
                   time.perf_counter() - t0, {"final_losses": final, "steps": state.step, "pretrain": state.pretrain})
    print(f"trained to step {state.step}; final tdvp {final.get('tdvp', float('nan')):.4e}")


def cmd_evaluate(args):
    state = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(state)
    protocol = _read(load_protocol, args.protocol)
    if args.N_t is not None:
        protocol = resample(protocol, TimeGrid(protocol.grid.T_max, args.N_t))
    check_compatible(cfg, protocol, args.lattice)
    n_samples = args.n_samples or cfg.evaluation.n_samples
    seed = args.seed if args.seed is not None else cfg.evaluation.seed
    series = model_observables(state.model, protocol, protocol.grid.points, cfg, n_samples, seed, args.exact)
    header = {"source": "model", "checkpoint": Path(args.checkpoint).name, "step": state.step,
              "lattice": cfg.lattice.build().label(), "protocol": protocol.metadata.get("kind", "raw"),
              "n_samples": 0 if args.exact else n_samples, "seed": seed}
    save_report(TrajectoryReport.from_series(series, header), args.out)
    print(f"wrote {args.out}")


def superres_profiles(model, cfg: RunConfig, protocol, train_Nt: int, eval_Nt: int, exact: bool = True,
                      n_samples: int = 4096, seed: int = 0) -> dict:
    """Model-vs-oracle |d<X>|, |d<ZZ>| at the training grid and at a finer evaluation grid."""
    if eval_Nt < train_Nt:
        raise ConfigError(f"eval_Nt ({eval_Nt}) must be >= train_Nt ({train_Nt})")
    lat = cfg.lattice.build()
    T = protocol.grid.T_max
    out = {}
    for name, n in (("train", train_Nt), ("eval", eval_Nt)):
        p = resample(protocol, TimeGrid(T, n))
        check_compatible(cfg, p)
        mo = model_observables(model, p, p.grid.points, cfg, n_samples, seed, exact)
        ex = oracle_report(p, lat, cfg.train.initial_state, cfg.train.J)
        out[name] = {"t": p.grid.points,
                     "dX": np.abs(mo["X"].mean - ex.mean["X"]),
                     "dZZ": np.abs(mo["ZZ"].mean - ex.mean["ZZ"]),
                     "signed_dX": mo["X"].mean - ex.mean["X"]}
    dt_train = T / (train_Nt - 1)
    nyquist = 0.5 / dt_train
    ev, tr = out["eval"], out["train"]
    metrics = {
        "train_Nt": train_Nt, "eval_Nt": eval_Nt, "exact_model_expectations": exact,
        "max_dX_train_grid": float(tr["dX"].max()), "max_dX_eval_grid": float(ev["dX"].max()),
        "max_dZZ_train_grid": float(tr["dZZ"].max()), "max_dZZ_eval_grid": float(ev["dZZ"].max()),
        "spectral_fraction_above_train_nyquist": spectral_fraction_above(ev["dX"], T / (eval_Nt - 1), nyquist),
        "spectral_fraction_signed_detrended": spectral_fraction_above(
            ev["signed_dX"] - ev["signed_dX"].mean(), T / (eval_Nt - 1), nyquist),
    }
    metrics["ratio_dX"] = metrics["max_dX_eval_grid"] / max(metrics["max_dX_train_grid"], 1e-300)
    metrics["artifact_flag"] = bool(metrics["ratio_dX"] > 2.0 or metrics["spectral_fraction_above_train_nyquist"] >= 0.1)
    return {"profiles": out, "metrics": metrics}


def cmd_superres(args):
    state = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(state)
    protocol = _read(load_protocol, args.protocol)
    train_Nt = args.train_Nt or cfg.grid.N_t
    if args.eval_Nt <= train_Nt:
        raise ConfigError(f"--eval-nt ({args.eval_Nt}) must exceed the training grid ({train_Nt})")
    exact = not args.sampled and cfg.lattice.Lx * cfg.lattice.Ly <= 12
    seed = args.seed if args.seed is not None else cfg.evaluation.seed
    res = superres_profiles(state.model, cfg, protocol, train_Nt, args.eval_Nt, exact,
                            args.n_samples or cfg.evaluation.n_samples, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, prof in res["profiles"].items():
        rows = np.stack([prof["t"], prof["dX"], prof["dZZ"]], axis=1)
        text = f"# grid={name}\n# columns=t abs_dX abs_dZZ\n" + "\n".join(
            " ".join(f"{v:.16e}" for v in r) for r in rows) + "\n"
        atomic_write_text(out / f"error_profile_{name}.txt", text)
    _write_json(out / "metrics.json", res["metrics"])
    plot_profile({f"|dX| N_t={len(p['t'])}": (p["t"], p["dX"]) for p in res["profiles"].values()},
                 out / "error_profile.png")
    write_manifest(out, "superres", cfg.to_dict(), {"seed": seed}, extra={"checkpoint": str(args.checkpoint)})
    m = res["metrics"]
    print(f"max|dX| train grid {m['max_dX_train_grid']:.4f}, eval grid {m['max_dX_eval_grid']:.4f}, "
          f"high-frequency fraction {m['spectral_fraction_above_train_nyquist']:.3f}"
          + ("  [ARTIFACTS]" if m["artifact_flag"] else ""))


def cmd_finetune(args):
    state = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(state)
    protocol = _read(load_protocol, args.protocol)
    check_compatible(cfg, protocol)
    ms = _read(load_measurements, args.measurements)
    if ms.t.max() > protocol.grid.T_max:
        raise ConfigError(f"measurement time {ms.t.max()} beyond protocol T_max {protocol.grid.T_max}")
    seed = args.seed if args.seed is not None else cfg.train.seed
    ft = FinetuneConfig(steps=args.steps, lr=args.lr, n_samples=args.n_samples, seed=seed,
                        freeze_operator=args.freeze_operator,
                        freeze_ansatz=args.freeze_ansatz, weighted=args.weighted)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    times = protocol.grid.points
    n_eval, eval_seed = cfg.evaluation.n_samples, cfg.evaluation.seed
    header = {"source": "model", "lattice": cfg.lattice.build().label(), "n_samples": n_eval, "seed": eval_seed}
    before = model_observables(state.model, protocol, times, cfg, n_eval, eval_seed)
    save_report(TrajectoryReport.from_series(before, {**header, "stage": "before-finetune"}), out / "before.txt")
    t0 = time.perf_counter()
    state, history = finetune(state, cfg.lattice.build(), protocol, ms, ft, HamiltonianSpec(cfg.train.J))
    wall = time.perf_counter() - t0
    after = model_observables(state.model, protocol, times, cfg, n_eval, eval_seed)
    save_report(TrajectoryReport.from_series(after, {**header, "stage": "after-finetune"}), out / "after.txt")
    save_checkpoint(state, out / "finetuned.ckpt")
    _write_json(out / "data_loss.json", history)
    write_manifest(out, "finetune", cfg.to_dict(), {"seed": seed, "eval_seed": eval_seed}, wall,
                   {"finetune": ft.__dict__, "data_loss_first": history[0] if history else None,
                    "data_loss_last": history[-1] if history else None})
    print(f"data loss {history[0]:.3e} -> {history[-1]:.3e}")


def cmd_oracle(args):
    protocol = _read(load_protocol, args.protocol)
    Lx, Ly = _parse_lattice(args.lattice)
    lat = build_lattice(Lx, Ly)
    rep = oracle_report(protocol, lat, args.init, args.J, args.tol)
    save_report(rep, args.out)
    print(f"wrote {args.out}")


def cmd_compare(args):
    a, b = _read(load_report, args.report_a), _read(load_report, args.report_b)
    metrics = compare_reports(a, b)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", metrics)
    plot_comparison(a, b, out, labels=(Path(args.report_a).stem, Path(args.report_b).stem))
    for k, v in metrics.items():
        if isinstance(v, dict):
            print(f"{k:>3}: MAE {v['mae']:.4e}  max {v['max_abs']:.4e}")


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="noqs", description="Neural operator quantum states for driven Ising dynamics")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-protocols", help="write a batch of protocol files")
    p.add_argument("--kind", choices=("fourier", "gaussian", "tanh"), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--T-max", dest="T_max", type=float)
    p.add_argument("--N-t", dest="N_t", type=int)
    p.set_defaults(func=cmd_generate_protocols)

    for name, func, help_ in (("pretrain", cmd_pretrain, "fit the t=0 anchor only"),
                              ("train", cmd_train, "pre-train then run TDVP training")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        if name == "train":
            p.add_argument("--steps", type=int)
            p.add_argument("--resume")
            p.add_argument("--log-every", type=int, default=100)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="predict observables for a protocol in one pass")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--N-t", "--n-t", dest="N_t", type=int, help="resample the protocol to this grid first")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lattice")
    p.add_argument("--exact", action="store_true", help="enumerate the basis instead of sampling")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("finetune", help="refine on sparse <X>, <ZZ> measurements")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--measurements", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--n-samples", type=int, default=1024)
    p.add_argument("--seed", type=int)
    p.add_argument("--freeze-operator", action="store_true", help="train the transformer only")
    p.add_argument("--freeze-ansatz", action="store_true", help="train the operator only")
    p.add_argument("--weighted", action="store_true", help="inverse-variance weights from the file's error bars")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("superres", help="evaluate on a finer time grid than used in training")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--train-nt", dest="train_Nt", type=int)
    p.add_argument("--eval-nt", dest="eval_Nt", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sampled", action="store_true", help="sample model expectations even for small lattices")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_superres)

    p = sub.add_parser("oracle", help="exact propagation of a small lattice")
    p.add_argument("--protocol", required=True)
    p.add_argument("--lattice", default="2x2")
    p.add_argument("--init", choices=("plus", "ferro"), default="plus")
    p.add_argument("--J", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("compare", help="metrics and plots for two reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    workers = os.environ.get("NOQS_WORKERS")
    if workers:
        torch.set_num_threads(max(1, int(workers)))
    try:
        args.func(args)
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, IntegrationError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
