"""Trajectory report files, model/oracle comparison metrics, plots and run manifests."""
from __future__ import annotations

import json
import platform
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .protocols import atomic_write_text, read_header
from .vmc import OBSERVABLES

COLUMNS = ("t",) + tuple(c for k in OBSERVABLES for c in (k, f"{k}_err"))


@dataclass
class TrajectoryReport:
    times: np.ndarray
    mean: dict
    err: dict
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        for k in OBSERVABLES:
            self.mean[k] = np.asarray(self.mean[k], dtype=np.float64)
            self.err[k] = np.asarray(self.err.get(k, np.zeros_like(self.times)), dtype=np.float64)

    @classmethod
    def from_series(cls, series: dict, header: dict | None = None) -> "TrajectoryReport":
        times = series[OBSERVABLES[0]].times
        return cls(times, {k: series[k].mean for k in OBSERVABLES},
                   {k: series[k].stderr for k in OBSERVABLES}, dict(header or {}))


def save_report(report: TrajectoryReport, path):
    lines = [f"# {k}={v}" for k, v in report.header.items()]
    lines.append("# columns=" + " ".join(COLUMNS))
    cols = [report.times] + [a for k in OBSERVABLES for a in (report.mean[k], report.err[k])]
    for row in np.stack(cols, axis=1):
        lines.append(" ".join(f"{v:.16e}" for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_report(path) -> TrajectoryReport:
    header, rows = read_header(path)
    if rows.ndim != 2 or rows.shape[1] != len(COLUMNS):
        raise ValueError(f"{path}: expected {len(COLUMNS)} columns")
    header.pop("columns", None)
    mean = {k: rows[:, 1 + 2 * i] for i, k in enumerate(OBSERVABLES)}
    err = {k: rows[:, 2 + 2 * i] for i, k in enumerate(OBSERVABLES)}
    return TrajectoryReport(rows[:, 0], mean, err, header)


def shared_times(a: TrajectoryReport, b: TrajectoryReport, atol: float = 1e-12):
    """Index pairs of time points present in both reports."""
    j = np.searchsorted(b.times, a.times)
    ia, ib = [], []
    for i, (t, k) in enumerate(zip(a.times, j)):
        for kk in (k - 1, k):
            if 0 <= kk < len(b.times) and abs(b.times[kk] - t) <= atol:
                ia.append(i)
                ib.append(kk)
                break
    if not ia:
        raise ValueError("reports share no time points")
    return np.asarray(ia), np.asarray(ib)


def compare_reports(a: TrajectoryReport, b: TrajectoryReport) -> dict:
    """Per-observable MAE, max and RMS deviation of ``a`` from ``b`` on their shared times."""
    ia, ib = shared_times(a, b)
    out = {"n_times": int(len(ia))}
    for k in OBSERVABLES:
        d = np.abs(a.mean[k][ia] - b.mean[k][ib])
        out[k] = {"mae": float(d.mean()), "max_abs": float(d.max()), "rmse": float(np.sqrt((d**2).mean()))}
    return out


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_comparison(a: TrajectoryReport, b: TrajectoryReport, out_dir, labels=("model", "reference")) -> list[Path]:
    """One figure per observable: both curves with 1-sigma bands."""
    plt = _pyplot()
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    paths = []
    for k in OBSERVABLES:
        fig, ax = plt.subplots(figsize=(6, 3))
        for rep, label, style in ((b, labels[1], "k-"), (a, labels[0], "C0--")):
            ax.plot(rep.times, rep.mean[k], style, lw=1.5, label=label)
            if np.any(rep.err[k] > 0):
                ax.fill_between(rep.times, rep.mean[k] - rep.err[k], rep.mean[k] + rep.err[k], alpha=0.3)
        ax.set_xlabel("t")
        ax.set_ylabel("E/N" if k == "E" else f"<{k}>")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = Path(out_dir) / f"compare_{k}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_profile(profiles: dict, path, ylabel="|error|"):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3))
    for name, (t, y) in profiles.items():
        ax.plot(t, y, label=name)
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def spectral_fraction_above(profile, dt: float, cutoff: float) -> float:
    """Fraction of the DFT energy of a uniformly sampled profile at frequencies above ``cutoff`` (cycles per unit time)."""
    profile = np.asarray(profile, dtype=np.float64)
    power = np.abs(np.fft.rfft(profile)) ** 2
    # one-sided spectrum: interior bins stand for two
    w = np.full(power.shape, 2.0)
    w[0] = 1.0
    if len(profile) % 2 == 0:
        w[-1] = 1.0
    power = power * w
    freqs = np.fft.rfftfreq(len(profile), d=dt)
    total = power.sum()
    if total == 0:
        return 0.0
    return float(power[freqs > cutoff].sum() / total)


def _git_revision() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def write_manifest(out_dir, command: str, config: dict | None = None, seeds: dict | None = None,
                   wall_clock: float | None = None, extra: dict | None = None) -> Path:
    from . import __version__

    import torch

    manifest = {
        "command": command,
        "version": __version__,
        "git_revision": _git_revision(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "config": config,
        "seeds": seeds or {},
        "wall_clock_s": wall_clock,
    }
    manifest.update(extra or {})
    path = Path(out_dir) / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path
