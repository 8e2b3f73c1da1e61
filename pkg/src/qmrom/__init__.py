"""Quadratic-manifold model order reduction with ECSW hyperreduction
for a thermo-mechanically coupled 1D gradient-damage-plasticity bar."""

__version__ = "0.1.0"

from .config import Config, parse_config
from .fom import LoadingProgram, Mesh1D, run_fom
from .manifold import ManifoldBasis, decode, encode_linear, encode_nonlinear
from .material import MaterialParams, QpState
from .rom import run_rom

__all__ = [
    "Config",
    "LoadingProgram",
    "ManifoldBasis",
    "MaterialParams",
    "Mesh1D",
    "QpState",
    "decode",
    "encode_linear",
    "encode_nonlinear",
    "parse_config",
    "run_fom",
    "run_rom",
    "__version__",
]
