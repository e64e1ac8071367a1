"""LUT-network toolkit: train networks whose inference operators are arbitrary
K-input Boolean functions, then lower them to LUT/popcount netlists with
Verilog emission, bit-exact simulation and physical-LUT area estimates."""

__version__ = "0.1.0"

from . import data, expand, hwgen, model, numerics, prune, training  # noqa: F401
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint  # noqa: F401
from .config import RunConfig, parse_config  # noqa: F401
