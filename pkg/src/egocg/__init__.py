"""Coarse-grained MD toolkit for ethylene glycol oligomer/water mixtures."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402,F401
