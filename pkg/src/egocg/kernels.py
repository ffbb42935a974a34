"""Backend selection for the force and pair-search kernels.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``EGOCG_PURE_PYTHON`` is set to a non-empty value, the
numpy implementation is used. Both expose the same four functions.
"""

import os

from . import _kernels_py

if os.environ.get("EGOCG_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"

build_pairs = _impl.build_pairs
lj_forces = _impl.lj_forces
bond_forces = _impl.bond_forces
angle_forces = _impl.angle_forces


def get_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
