"""Frequency-adaptive DCT band learning with dual-backbone fusion and a
variational Bayesian classifier head."""

__version__ = "0.1.0"

from .engine import Tensor  # noqa: F401
