import numpy as np
import pytest
import torch

from noqs import NOQS, FNOConfig, TransformerConfig, build_lattice
from noqs.protocols import TimeGrid

SMALL_T = TransformerConfig(n_layers=2, d_e=16, n_heads=2)
SMALL_F = FNOConfig(n_layers=2, width=8, k_max=8)


def random_model(n_sites=4, seed=0, scale=0.3, tcfg=SMALL_T, fcfg=SMALL_F):
    """Model with all parameters perturbed away from the (trivial) initialisation."""
    torch.manual_seed(seed)
    model = NOQS(n_sites, tcfg, fcfg).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn_like(p))
    return model


@pytest.fixture
def lat4():
    return build_lattice(2, 2)


@pytest.fixture
def grid():
    return TimeGrid(1.0, 40)


@pytest.fixture
def model4():
    return random_model()


def dense_psi(model, M):
    """Normalised amplitude vector of the model on the full basis for context M."""
    from noqs.lattice import all_configs

    sigma = torch.as_tensor(all_configs(model.n_sites))
    with torch.no_grad():
        lp = model.ansatz.log_psi(sigma, M)
    return torch.exp(lp).numpy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


def acceptance_line(number: int, title: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number} ({title}): {detail}"
    _ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
