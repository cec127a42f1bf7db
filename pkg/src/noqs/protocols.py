"""Time grids and driving protocols (hx(t), hz(t)).

A protocol carries its samples on a uniform grid and, when it was built from a
formula, a ``closed_form`` record ``{"hx": field, "hz": field}`` where each
field is a small dict understood by :func:`evaluate_field`. Raw protocols
(e.g. measured pulse shapes read from disk) are resampled with cosine
interpolation, i.e. trigonometric interpolation of the mirror-extended signal,
whose period ``2 * T_max`` does not depend on the grid.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft


@dataclass(frozen=True)
class TimeGrid:
    T_max: float = 1.0
    N_t: int = 100

    def __post_init__(self):
        if self.N_t < 2:
            raise ValueError(f"a time grid needs at least 2 points, got N_t={self.N_t}")
        if not self.T_max > 0:
            raise ValueError(f"T_max must be positive, got {self.T_max}")

    @property
    def dt(self) -> float:
        return self.T_max / (self.N_t - 1)

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.N_t) * self.dt


def grid_from_points(t) -> TimeGrid:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 1 or len(t) < 2 or t[0] != 0.0:
        raise ValueError("time points must be a 1-d sequence starting at 0")
    grid = TimeGrid(float(t[-1]), len(t))
    if not np.allclose(t, grid.points, rtol=0, atol=1e-12 * max(1.0, grid.T_max)):
        raise ValueError("time points are not uniformly spaced")
    return grid


# -- closed-form fields ------------------------------------------------------

def constant_field(value: float) -> dict:
    return {"kind": "constant", "value": float(value)}


def gaussian_field(amplitude: float, center: float, width: float, baseline: float = 0.0) -> dict:
    if not width > 0:
        raise ValueError(f"Gaussian width must be positive, got {width}")
    return {"kind": "gaussian", "amplitude": float(amplitude), "center": float(center),
            "width": float(width), "baseline": float(baseline)}


def tanh_field(start: float, stop: float, center: float, steepness: float) -> dict:
    if not steepness > 0:
        raise ValueError(f"tanh steepness must be positive, got {steepness}")
    return {"kind": "tanh", "start": float(start), "stop": float(stop), "center": float(center),
            "steepness": float(steepness)}


def fourier_field(offset: float, omega: float, amplitudes, phases) -> dict:
    return {"kind": "fourier", "offset": float(offset), "omega": float(omega),
            "amplitudes": [float(a) for a in amplitudes], "phases": [float(p) for p in phases]}


def evaluate_field(spec: dict, t):
    t = np.asarray(t, dtype=np.float64)
    kind = spec["kind"]
    if kind == "constant":
        return np.full_like(t, spec["value"])
    if kind == "gaussian":
        return spec["baseline"] + spec["amplitude"] * np.exp(
            -((t - spec["center"]) ** 2) / (2.0 * spec["width"] ** 2))
    if kind == "tanh":
        s = 0.5 * (1.0 + np.tanh((t - spec["center"]) * spec["steepness"]))
        return spec["start"] + (spec["stop"] - spec["start"]) * s
    if kind == "fourier":
        out = np.full_like(t, spec["offset"])
        for m, (a, phi) in enumerate(zip(spec["amplitudes"], spec["phases"]), start=1):
            out = out + a * np.sin(m * spec["omega"] * t + phi)
        return out
    raise ValueError(f"unknown field kind {kind!r}")


# -- protocols ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Protocol:
    grid: TimeGrid
    hx: np.ndarray
    hz: np.ndarray
    closed_form: dict | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        hx = np.asarray(self.hx, dtype=np.float64)
        hz = np.asarray(self.hz, dtype=np.float64)
        if hx.shape != (self.grid.N_t,) or hz.shape != (self.grid.N_t,):
            raise ValueError("protocol samples must have length N_t")
        hx.setflags(write=False)
        hz.setflags(write=False)
        object.__setattr__(self, "hx", hx)
        object.__setattr__(self, "hz", hz)

    @property
    def fields(self) -> np.ndarray:
        """(N_t, 2) array of driving fields, the operator input."""
        return np.stack([self.hx, self.hz], axis=-1)

    def __call__(self, t):
        """Field values (hx, hz) at arbitrary times in [0, T_max]."""
        if self.closed_form is not None:
            return (evaluate_field(self.closed_form["hx"], t),
                    evaluate_field(self.closed_form["hz"], t))
        return (cosine_interpolate(self.hx, self.grid.T_max, t),
                cosine_interpolate(self.hz, self.grid.T_max, t))

    def __eq__(self, other):
        if not isinstance(other, Protocol):
            return NotImplemented
        return (self.grid == other.grid and np.array_equal(self.hx, other.hx)
                and np.array_equal(self.hz, other.hz) and self.closed_form == other.closed_form
                and self.metadata == other.metadata)


def make_protocol(grid: TimeGrid, hx: dict, hz: dict | None = None, metadata: dict | None = None) -> Protocol:
    hz = constant_field(0.0) if hz is None else hz
    t = grid.points
    cf = {"hx": hx, "hz": hz}
    md = {"kind": hx["kind"] if hz["kind"] == "constant" else f"{hx['kind']}+{hz['kind']}"}
    md.update(metadata or {})
    return Protocol(grid, evaluate_field(hx, t), evaluate_field(hz, t), cf, md)


@dataclass(frozen=True)
class FourierProtocolSpec:
    """Random truncated-Fourier driving ensemble; defaults are the training ensemble."""

    n_max: int = 10
    omega: float = 10.0
    h_x0: float = 1.0
    h_z0: float = 0.0
    amp_scale_x: float = 0.6
    amp_scale_z: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if not self.omega > 0:
            raise ValueError("omega must be positive")


def draw_fourier_coefficients(n_max: int, amp_scale: float, rng: np.random.Generator):
    m = np.arange(1, n_max + 1)
    amps = rng.normal(size=n_max) * amp_scale / m**1.5
    # uniform on (0, 2pi]
    phases = 2.0 * np.pi * (1.0 - rng.random(n_max))
    return amps, phases


def sample_fourier_protocol(spec: FourierProtocolSpec, grid: TimeGrid, rng_seed: int | None = None) -> Protocol:
    seed = spec.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    ax, px = draw_fourier_coefficients(spec.n_max, spec.amp_scale_x, rng)
    az, pz = draw_fourier_coefficients(spec.n_max, spec.amp_scale_z, rng)
    return make_protocol(
        grid,
        fourier_field(spec.h_x0, spec.omega, ax, px),
        fourier_field(spec.h_z0, spec.omega, az, pz),
        {"kind": "fourier", "seed": int(seed)},
    )


def make_gaussian_pulse(grid: TimeGrid, amplitude: float, center: float, width: float,
                        baseline: float = 0.0, hz: dict | None = None) -> Protocol:
    return make_protocol(grid, gaussian_field(amplitude, center, width, baseline), hz)


def make_tanh_ramp(grid: TimeGrid, start: float, stop: float, center: float, steepness: float,
                   hz: dict | None = None) -> Protocol:
    return make_protocol(grid, tanh_field(start, stop, center, steepness), hz)


def make_constant(grid: TimeGrid, hx: float, hz: float = 0.0) -> Protocol:
    return make_protocol(grid, constant_field(hx), constant_field(hz))


# -- cosine interpolation ----------------------------------------------------

def cosine_coefficients(values) -> np.ndarray:
    """Coefficients c_k with f(t) = sum_k c_k cos(pi k t / T) exact on the grid (DCT-I)."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    c = scipy.fft.dct(values, type=1, axis=0) / (n - 1)
    c[0] /= 2.0
    c[-1] /= 2.0
    return c


def cosine_interpolate(values, T_max: float, t) -> np.ndarray:
    c = cosine_coefficients(values)
    t = np.asarray(t, dtype=np.float64)
    k = np.arange(len(c))
    return np.cos(np.pi * np.multiply.outer(t, k) / T_max) @ c


def resample(p: Protocol, new_grid: TimeGrid) -> Protocol:
    """Re-express ``p`` on ``new_grid`` (closed form if present, else cosine interpolation)."""
    if not isinstance(new_grid, TimeGrid):
        new_grid = grid_from_points(new_grid)
    if new_grid == p.grid:
        return p
    if not math.isclose(new_grid.T_max, p.grid.T_max, rel_tol=1e-12):
        raise ValueError("resampling must preserve T_max")
    if p.closed_form is not None:
        t = new_grid.points
        return Protocol(new_grid, evaluate_field(p.closed_form["hx"], t),
                        evaluate_field(p.closed_form["hz"], t), p.closed_form, dict(p.metadata))
    n_old, n_new = p.grid.N_t, new_grid.N_t
    out = []
    for v in (p.hx, p.hz):
        c = cosine_coefficients(v)
        if n_new >= n_old:
            c_new = np.zeros(n_new)
            c_new[:n_old] = c
        else:
            c_new = c[:n_new].copy()
        # inverse DCT-I, undoing the endpoint halving
        c_new[0] *= 2.0
        c_new[-1] *= 2.0
        out.append(scipy.fft.idct(c_new * (n_new - 1), type=1) if n_new > 1 else c_new)
    return Protocol(new_grid, out[0], out[1], None, dict(p.metadata))


# -- file format -------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.16e}"


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def save_protocol(p: Protocol, path):
    md = dict(p.metadata)
    lines = [f"# kind={md.pop('kind', 'raw')}", f"# T_max={p.grid.T_max!r}", f"# N_t={p.grid.N_t}"]
    if "seed" in md:
        lines.append(f"# seed={md.pop('seed')}")
    if p.closed_form is not None:
        lines.append("# closed_form=" + json.dumps(p.closed_form, sort_keys=True))
    for k in sorted(md):
        lines.append(f"# {k}={json.dumps(md[k])}")
    lines.append("# columns=t hx hz")
    for t, a, b in zip(p.grid.points, p.hx, p.hz):
        lines.append(f"{_fmt(t)} {_fmt(a)} {_fmt(b)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_header(path) -> tuple[dict, np.ndarray]:
    header, rows = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key.strip()] = value.strip()
            else:
                rows.append([float(x) for x in line.split()])
    return header, np.asarray(rows, dtype=np.float64)


def load_protocol(path) -> Protocol:
    header, rows = read_header(path)
    if rows.ndim != 2 or rows.shape[1] != 3:
        raise ValueError(f"{path}: expected rows 't hx hz'")
    grid = TimeGrid(float(header["T_max"]), int(header["N_t"]))
    if rows.shape[0] != grid.N_t:
        raise ValueError(f"{path}: header says N_t={grid.N_t}, found {rows.shape[0]} rows")
    md = {"kind": header.get("kind", "raw")}
    if "seed" in header:
        md["seed"] = int(header["seed"])
    for k, v in header.items():
        if k not in {"kind", "T_max", "N_t", "seed", "closed_form", "columns"}:
            md[k] = json.loads(v)
    cf = json.loads(header["closed_form"]) if "closed_form" in header else None
    return Protocol(grid, rows[:, 1], rows[:, 2], cf, md)
