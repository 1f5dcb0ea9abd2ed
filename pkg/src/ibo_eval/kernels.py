"""Backend selection for the numeric kernels.

The compiled extension is used when it imports; otherwise the numpy twin.
Set ``IBO_EVAL_PURE_PYTHON=1`` to force the fallback.
"""
import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("IBO_EVAL_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # pragma: no cover - depends on build
        log.debug("compiled kernels unavailable, using numpy fallback")
    else:
        _impl = _compiled
        BACKEND = "cython"

lloyd_1d = _impl.lloyd_1d
kmeans1d_dp = _impl.kmeans1d_dp
nli_system = _impl.nli_system

BACKENDS = {"python": _kernels_py}
if BACKEND == "cython":
    BACKENDS["cython"] = _impl

__all__ = ["BACKEND", "BACKENDS", "lloyd_1d", "kmeans1d_dp", "nli_system"]
