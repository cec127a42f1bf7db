import math

import numpy as np
import pytest
import torch

from noqs import FNOConfig, TransformerConfig
from noqs.ansatz import NumericError
from noqs.lattice import HamiltonianSpec, all_configs, build_lattice
from noqs.protocols import FourierProtocolSpec, TimeGrid
from noqs.training import (TrainConfig, _step_times, anchor_loss, flip_index, init_state, learning_rate,
                           pretrain_initial_state, residual_loss, step_protocols, tdvp_step, tdvp_terms, train)

from conftest import SMALL_F, SMALL_T, random_model

TINY = dict(B=2, K=2, M=64, anchor_samples=32, pretrain_steps=200, pretrain_tol=1e-3, steps=3)


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert learning_rate(cfg, 0) == 4e-4
    assert learning_rate(cfg, 1999) == 4e-4
    assert learning_rate(cfg, 2000) == pytest.approx(3.8e-4)
    assert learning_rate(cfg, 10**7) == cfg.lr_min


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(B=0)
    with pytest.raises(ValueError):
        TrainConfig(grad_clip=-1)
    with pytest.raises(ValueError):
        TrainConfig(initial_state="neel")


def test_variance_form_is_shift_invariant():
    g = torch.Generator().manual_seed(0)
    L = torch.randn(3, 50, generator=g, dtype=torch.float64) + 1j * torch.randn(3, 50, generator=g, dtype=torch.float64)
    lp = torch.zeros(3, 50, dtype=torch.float64)
    a, _ = residual_loss(L, lp)
    b, _ = residual_loss(L + (2.5 - 1.0j), lp)
    assert a.item() == pytest.approx(b.item(), rel=1e-12)
    raw_a, _ = residual_loss(L, lp, form="raw")
    raw_b, _ = residual_loss(L + 2.5, lp, form="raw")
    assert raw_a.item() != pytest.approx(raw_b.item())


def test_flip_index_matches_configs():
    N = 4
    configs = all_configs(N)
    idx = flip_index(N).numpy()
    for j in range(2**N):
        for i in range(N):
            flipped = configs[j].copy()
            flipped[i] *= -1
            assert np.array_equal(configs[idx[j, i]], flipped)


def test_step_times_inside_open_interval():
    t = _step_times(2.0, 0, 5, 64, 16)
    assert t.shape == (64, 16) and t.min() > 0 and t.max() < 2.0
    assert np.array_equal(t, _step_times(2.0, 0, 5, 64, 16))
    assert not np.array_equal(t, _step_times(2.0, 0, 6, 64, 16))


def test_exact_loss_gradient_matches_finite_differences():
    lat = build_lattice(2, 2)
    model = random_model(seed=3, scale=0.2)
    grid = TimeGrid(1.0, 40)
    protocols = step_protocols(FourierProtocolSpec(), grid, 0, 0, 2)
    times = np.array([[0.3, 0.7], [0.2, 0.55]])
    spec = HamiltonianSpec()

    def value():
        with torch.no_grad():
            v, _ = tdvp_terms(model, protocols, times, 0, 0, lat, spec, enumerate_basis=True)
        return v.item()

    _, surrogate = tdvp_terms(model, protocols, times, 0, 0, lat, spec, enumerate_basis=True)
    surrogate.backward()
    flat = [(p, i) for p in model.parameters() for i in range(p.numel())]
    rng = np.random.default_rng(0)
    chosen = [flat[k] for k in rng.choice(len(flat), 40, replace=False)]
    h = 1e-6
    errors = []
    for p, i in chosen:
        view = p.data.view(-1)
        old = view[i].item()
        view[i] = old + h
        up = value()
        view[i] = old - h
        down = value()
        view[i] = old
        fd = (up - down) / (2 * h)
        g = p.grad.view(-1)[i].item()
        errors.append(abs(g - fd) / max(abs(fd), 1e-4))
    assert max(errors) < 1e-3


def test_anchor_loss_zero_for_plus_initialisation():
    lat = build_lattice(2, 2)
    from noqs import NOQS
    model = NOQS(lat.N, SMALL_T, SMALL_F).double()
    assert anchor_loss(model, "plus", exact=True).item() == pytest.approx(0.0, abs=1e-24)
    assert anchor_loss(model, "ferro", exact=True).item() > 0.5


def test_ferro_pretraining_converges():
    lat = build_lattice(2, 2)
    cfg = TrainConfig(initial_state="ferro", pretrain_tol=1e-4, pretrain_steps=3000, pretrain_lr=3e-3)
    torch.manual_seed(0)
    from noqs import NOQS
    model = NOQS(lat.N, SMALL_T, SMALL_F).double()
    info = pretrain_initial_state(model, cfg)
    assert info["converged"], info
    assert not model.operator.M0.requires_grad
    sigma = torch.ones(1, 4, dtype=torch.long)
    with torch.no_grad():
        p = torch.exp(2 * model.ansatz.log_psi(sigma, model.operator.M0).real).item()
    assert p > 0.99


def _run(seed, steps=3, **kw):
    lat = build_lattice(2, 2)
    cfg = TrainConfig(**{**TINY, "steps": steps, "seed": seed, **kw})
    state = train(cfg, lat, FourierProtocolSpec(), TimeGrid(1.0, 40), SMALL_T, SMALL_F, log_every=0)
    return state


def test_training_is_deterministic():
    a = _run(1)
    b = _run(1)
    c = _run(2)
    assert a.history == b.history
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(p, q)
    assert a.history != c.history
    assert all(math.isfinite(h["tdvp"]) for h in a.history)


def test_gradient_clipping_caps_update(monkeypatch):
    seen = []
    orig = torch.nn.utils.clip_grad_norm_

    def spy(params, max_norm):
        out = orig(params, max_norm)
        seen.append(float(torch.sqrt(sum((p.grad**2).sum() for p in params))))
        return out

    monkeypatch.setattr(torch.nn.utils, "clip_grad_norm_", spy)
    _run(0, steps=2, grad_clip=1e-3)
    assert len(seen) == 2 and max(seen) <= 1e-3 * (1 + 1e-6)


def test_non_finite_loss_raises(monkeypatch):
    lat = build_lattice(2, 2)
    cfg = TrainConfig(**TINY)
    state = init_state(lat, SMALL_T, SMALL_F, cfg)

    def bad(*args, **kwargs):
        nan = torch.tensor(float("nan"), dtype=torch.float64, requires_grad=True)
        return nan, nan

    monkeypatch.setattr("noqs.training.tdvp_terms", bad)
    with pytest.raises(NumericError):
        tdvp_step(state, lat, FourierProtocolSpec(), TimeGrid(1.0, 40), cfg)
