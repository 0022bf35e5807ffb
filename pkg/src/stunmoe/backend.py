"""Kernel backend selection.

The package ships two implementations of its numeric core: a compiled
extension (stunmoe._ckernels, built from Cython) and a numpy fallback
(stunmoe._pykernels).  Both follow the reduction-order contract documented
in _pykernels, so a run is reproducible regardless of which backend loaded.

Selection happens once at import: the compiled module if it built, else the
fallback.  STUNMOE_BACKEND=compiled|python forces one (raising if the
compiled module is unavailable); STUNMOE_BACKEND=auto is the default.
"""

import os

from stunmoe.errors import ArgumentError

ACT_RELU = 0
ACT_SILU = 1


def get_backend(which="auto"):
    """Return a kernel module by name: 'auto', 'compiled' or 'python'."""
    if which == "python":
        from stunmoe import _pykernels

        return _pykernels
    if which == "compiled":
        from stunmoe import _ckernels

        return _ckernels
    if which == "auto":
        try:
            from stunmoe import _ckernels

            return _ckernels
        except ImportError:
            from stunmoe import _pykernels

            return _pykernels
    raise ArgumentError(f"unknown backend {which!r}")


_kernels = get_backend(os.environ.get("STUNMOE_BACKEND", "auto"))


def active_backend():
    return _kernels


def backend_name():
    return _kernels.name
