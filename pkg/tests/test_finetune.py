import numpy as np
import pytest
import torch

from noqs.lattice import all_configs
from noqs.finetune import FinetuneConfig, MeasurementSet, data_loss, finetune, load_measurements, save_measurements
from noqs.protocols import FourierProtocolSpec, TimeGrid, sample_fourier_protocol
from noqs.training import TrainState
from noqs.vmc import enumerate_observables

from conftest import random_model

TIMES = np.array([0.2, 0.45, 0.7, 0.95])


@pytest.fixture
def protocol():
    return sample_fourier_protocol(FourierProtocolSpec(), TimeGrid(1.0, 40), 5)


def exact_measurements(model, protocol, lat, dx=0.0, dzz=0.0):
    obs = enumerate_observables(model, protocol, TIMES, lat)
    return MeasurementSet(TIMES, obs["X"].mean + dx, obs["ZZ"].mean + dzz)


def params_of(model):
    return [p.detach().clone() for p in model.parameters()]


def test_measurement_file_roundtrip(tmp_path):
    ms = MeasurementSet([0.1, 0.2], [0.5, -0.25], [1 / 3, 0.0], [0.01, 0.02], [0.03, 0.04], protocol_ref="p.txt")
    save_measurements(ms, tmp_path / "m.txt")
    back = load_measurements(tmp_path / "m.txt")
    for a in ("t", "x_mean", "zz_mean", "x_err", "zz_err"):
        assert np.array_equal(getattr(ms, a), getattr(back, a))
    assert back.protocol_ref == "p.txt"
    plain = MeasurementSet([0.1], [0.5], [0.2])
    save_measurements(plain, tmp_path / "n.txt")
    assert load_measurements(tmp_path / "n.txt").x_err is None


def test_measurement_validation(tmp_path):
    with pytest.raises(ValueError):
        MeasurementSet([], [], [])
    with pytest.raises(ValueError):
        MeasurementSet([0.1], [1.5], [0.0])
    with pytest.raises(ValueError):
        MeasurementSet([-0.1], [0.5], [0.0])
    (tmp_path / "bad.txt").write_text("# kind=measurements\n0.1 0.2\n")
    with pytest.raises(ValueError):
        load_measurements(tmp_path / "bad.txt")


def test_exact_data_loss_is_sum_of_squared_offsets(lat4, model4, protocol):
    assert data_loss(model4, lat4, protocol, exact_measurements(model4, protocol, lat4), exact=True) < 1e-28
    d = 0.03
    ms = exact_measurements(model4, protocol, lat4, dx=d, dzz=-2 * d)
    assert data_loss(model4, lat4, protocol, ms, exact=True) == pytest.approx(len(TIMES) * 5 * d**2, rel=1e-10)


def test_data_loss_is_permutation_invariant(lat4, model4, protocol):
    ms = exact_measurements(model4, protocol, lat4, dx=0.05)
    perm = np.array([2, 0, 3, 1])
    shuffled = MeasurementSet(ms.t[perm], ms.x_mean[perm], ms.zz_mean[perm])
    a = data_loss(model4, lat4, protocol, ms, exact=True)
    b = data_loss(model4, lat4, protocol, shuffled, exact=True)
    assert a == pytest.approx(b, rel=1e-12)


def test_self_consistent_data_leaves_model_unchanged(lat4, protocol):
    model = random_model(seed=4)
    ms = exact_measurements(model, protocol, lat4)
    before = params_of(model)
    state, hist = finetune(TrainState(model, None), lat4, protocol, ms, FinetuneConfig(steps=20, exact=True))
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))
    state, hist = finetune(state, lat4, protocol, ms, FinetuneConfig(steps=20, n_samples=1024))
    drift = max((a - b).abs().max().item() for a, b in zip(before, model.parameters()))
    assert drift <= 20 * 3e-4


def test_fit_to_perturbed_data_decreases_loss(lat4, protocol):
    model = random_model(seed=4, scale=0.1)
    ms = exact_measurements(model, protocol, lat4, dx=-0.1, dzz=-0.1)
    _, hist = finetune(TrainState(model, None), lat4, protocol, ms, FinetuneConfig(steps=40, exact=True))
    increases = sum(b > a for a, b in zip(hist[:10], hist[1:11]))
    assert increases <= 2
    assert hist[-1] < 0.5 * hist[0]


def test_finetune_is_deterministic(lat4, protocol):
    runs = []
    for _ in range(2):
        model = random_model(seed=4)
        ms = exact_measurements(model, protocol, lat4, dx=-0.1)
        _, hist = finetune(TrainState(model, None), lat4, protocol, ms, FinetuneConfig(steps=5, n_samples=256, seed=3))
        runs.append((hist, params_of(model)))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_freeze_operator_updates_only_the_ansatz(lat4, protocol):
    model = random_model(seed=4)
    ms = exact_measurements(model, protocol, lat4, dx=-0.1)
    op_before = [p.detach().clone() for p in model.operator.parameters()]
    an_before = [p.detach().clone() for p in model.ansatz.parameters()]
    finetune(TrainState(model, None), lat4, protocol, ms, FinetuneConfig(steps=3, lr=1e-3, exact=True,
                                                                           freeze_operator=True))
    assert all(torch.equal(a, b) for a, b in zip(op_before, model.operator.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(an_before, model.ansatz.parameters()))


def test_freeze_ansatz_updates_only_the_operator_and_keeps_t0(lat4, protocol):
    model = random_model(seed=4)
    ms = exact_measurements(model, protocol, lat4, dx=-0.1)
    model.operator.M0.requires_grad_(False)
    sigma = torch.as_tensor(all_configs(lat4.N))
    lp0 = model.ansatz.log_psi(sigma, model.operator.M0).detach().clone()
    op_before = [p.detach().clone() for p in model.operator.parameters()]
    an_before = [p.detach().clone() for p in model.ansatz.parameters()]
    finetune(TrainState(model, None), lat4, protocol, ms, FinetuneConfig(steps=3, lr=1e-3, exact=True,
                                                                           freeze_ansatz=True))
    assert all(torch.equal(a, b) for a, b in zip(an_before, model.ansatz.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(op_before, model.operator.parameters()))
    assert torch.allclose(model.ansatz.log_psi(sigma, model.operator.M0), lp0, rtol=0, atol=1e-12)
