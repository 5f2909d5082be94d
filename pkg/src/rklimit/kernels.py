"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when the
``RKLIMIT_PURE_PYTHON`` environment variable is set, the pure-Python
implementation is used.  Both expose ``loglike_grid``, ``log_target`` and
``mh_run`` with identical signatures.
"""
import os

from . import _pykernels
from ._pykernels import PRIOR_UNIFORM_RK, PRIOR_UNIFORM_Y

if os.environ.get("RKLIMIT_PURE_PYTHON"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

loglike_grid = _impl.loglike_grid
log_target = _impl.log_target
mh_run = _impl.mh_run

__all__ = ["BACKEND", "PRIOR_UNIFORM_RK", "PRIOR_UNIFORM_Y", "loglike_grid", "log_target", "mh_run"]
