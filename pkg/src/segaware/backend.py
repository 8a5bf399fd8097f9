"""Kernel backend selection.

The compiled extension is used when importable; ``SEGAWARE_BACKEND=python``
forces the numpy fallback. ``kernels`` is the active module; both expose the
same functions.
"""

import os

from segaware import _pykernels

try:
    from segaware import _ckernels
except ImportError:  # extension not built
    _ckernels = None

NAME = "python"
kernels = _pykernels

if _ckernels is not None and os.environ.get("SEGAWARE_BACKEND", "").lower() != "python":
    NAME = "cython"
    kernels = _ckernels


def available():
    """Names of the backends that can be loaded in this process."""
    return ["python"] + (["cython"] if _ckernels is not None else [])


def get(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("segaware._ckernels is not built")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
