"""Hot-kernel dispatch.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``RATPAD_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py.logistic_logprob

if os.environ.get("RATPAD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled.logistic_logprob
        BACKEND = "cython"


def logistic_logprob(values, mean, log_scale, with_grad=True):
    """Discretized-logistic log-probabilities (and gradients) of any shape."""
    values = np.asarray(values, dtype=np.uint8)
    shape = values.shape
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), shape)
    log_scale = np.broadcast_to(np.asarray(log_scale, dtype=np.float64), shape)
    flat = [np.ascontiguousarray(a).reshape(-1) for a in (values, mean, log_scale)]
    lp, gmu, gls = _impl(flat[0], flat[1], flat[2], with_grad)
    if not with_grad:
        return lp.reshape(shape), None, None
    return lp.reshape(shape), gmu.reshape(shape), gls.reshape(shape)
