"""Backend selection for the PnP hot kernels.

The compiled Cython module is used when it was built; otherwise the numpy
implementation is used. Set ``CONFPOSE_BACKEND=python`` to force the fallback.
"""
import os

from confpose import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("CONFPOSE_BACKEND", "").lower() != "python":
    try:
        from confpose import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        pass

project_jacobian = _impl.project_jacobian
solve_pnp = _impl.solve_pnp
solve_pnp_batch = _impl.solve_pnp_batch

DEPTH_EPS = _pykernels.DEPTH_EPS
LOSS_SQUARED = _pykernels.LOSS_SQUARED
LOSS_HUBER = _pykernels.LOSS_HUBER
CONVERGED = _pykernels.CONVERGED
MAX_ITERS = _pykernels.MAX_ITERS
STALLED = _pykernels.STALLED
SINGULAR = _pykernels.SINGULAR
BEHIND_AT_INIT = _pykernels.BEHIND_AT_INIT


def available_backends():
    """Map backend name to module for every backend importable here."""
    found = {"python": _pykernels}
    try:
        from confpose import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
