import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noqs.lattice import (HamiltonianSpec, all_configs, build_lattice, config_index, diagonal_energy,
                          offdiagonal_connections)


@given(st.integers(1, 5), st.integers(1, 5), st.sampled_from(["raster", "snake"]))
def test_bond_count_and_geometry(Lx, Ly, ordering):
    lat = build_lattice(Lx, Ly, ordering)
    assert lat.N == Lx * Ly
    assert lat.n_bonds == Lx * (Ly - 1) + Ly * (Lx - 1)
    assert sorted(lat.order) == list(range(lat.N))
    coords = {lat.order[y * Lx + x]: (x, y) for y in range(Ly) for x in range(Lx)}
    for i, j in lat.bonds:
        assert i < j
        (xi, yi), (xj, yj) = coords[i], coords[j]
        assert abs(xi - xj) + abs(yi - yj) == 1
    assert len(set(lat.bonds)) == lat.n_bonds


def test_2x2_bonds():
    lat = build_lattice(2, 2)
    assert lat.bonds == ((0, 1), (2, 3), (0, 2), (1, 3))
    assert lat.label() == "2x2"


@pytest.mark.parametrize("args", [(0, 2), (2, -1), (1.5, 2)])
def test_bad_dimensions(args):
    with pytest.raises(ValueError):
        build_lattice(*args)


def test_bad_ordering_and_boundary():
    with pytest.raises(ValueError):
        build_lattice(2, 2, "spiral")
    with pytest.raises(ValueError):
        build_lattice(2, 2, boundary="periodic")


def test_diagonal_energy_uniform_configs():
    lat = build_lattice(3, 3)
    spec = HamiltonianSpec(J=0.7)
    up = np.ones(9)
    assert diagonal_energy(lat, spec, up, hz=0.3) == pytest.approx(0.7 * 12 + 0.3 * 9)
    assert diagonal_energy(lat, spec, -up, hz=0.3) == pytest.approx(0.7 * 12 - 0.3 * 9)


def test_diagonal_energy_batched_matches_loop(rng):
    lat = build_lattice(2, 3)
    spec = HamiltonianSpec(J=-1.3)
    sig = all_configs(6)
    batched = diagonal_energy(lat, spec, sig, hz=0.2)
    loop = [spec.J * sum(s[i] * s[j] for i, j in lat.bonds) + 0.2 * s.sum() for s in sig]
    np.testing.assert_allclose(batched, loop)


def test_checks_spin_values():
    lat = build_lattice(2, 2)
    with pytest.raises(ValueError):
        diagonal_energy(lat, HamiltonianSpec(), [1, 0, 1, 1])
    with pytest.raises(ValueError):
        diagonal_energy(lat, HamiltonianSpec(), [1, 1, 1])
    with pytest.raises(ValueError):
        HamiltonianSpec(J=float("nan"))


def test_offdiagonal_connections_flip_one_spin():
    lat = build_lattice(2, 2)
    s = np.array([1, -1, 1, 1])
    conns = offdiagonal_connections(lat, s)
    assert len(conns) == 4
    for i, (f, c) in enumerate(conns):
        assert c == 1.0
        assert np.count_nonzero(f != s) == 1 and f[i] == -s[i]


@settings(max_examples=20)
@given(st.integers(1, 10))
def test_config_index_roundtrip(N):
    sig = all_configs(N)
    assert sig.shape == (2**N, N)
    np.testing.assert_array_equal(config_index(sig), np.arange(2**N))
    assert np.all(sig[0] == 1)
