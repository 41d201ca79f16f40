"""Adaptive random feature regularization for fine-tuning, at desk scale."""

from adarand.numerics import ContractError, RngStream

__version__ = "0.1.0"

__all__ = ["ContractError", "RngStream", "__version__"]
