"""Independent modular networks: compositional Lie-group modules paired with input-blind identity transforms."""

from modnet.lie import basis_penalty, exp_map, mat_exp

__version__ = "0.1.0"

__all__ = ["basis_penalty", "exp_map", "mat_exp", "__version__"]
