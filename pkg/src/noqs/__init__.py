"""Neural operator quantum states for driven spin dynamics."""
from .ansatz import NumericError, TransformerConfig, TransformerWavefunction
from .lattice import HamiltonianSpec, Lattice, build_lattice, diagonal_energy, offdiagonal_connections
from .neural_operator import NOQS, ContextTokens, FNOConfig, spectral_derivative
from .protocols import (FourierProtocolSpec, Protocol, TimeGrid, load_protocol, make_gaussian_pulse,
                        make_tanh_ramp, resample, sample_fourier_protocol, save_protocol)

__version__ = "0.1.0"
