"""Hot numeric kernels with a selectable backend.

``CAPSLAB_BACKEND=numba`` (default when numba imports) runs the jitted
direct-loop kernels; ``CAPSLAB_BACKEND=numpy`` runs the im2col/BLAS
fallback.  Both produce the same math; 64-bit results are bitwise
identical between backends by construction.  ``benchmarks/bench_kernels.py``
compares their throughput.
"""

import os

import numpy as np

from ..errors import ConfigError
from . import numpy_backend

_backends = {"numpy": numpy_backend}
try:
    from . import numba_backend

    _backends["numba"] = numba_backend
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba_backend = None

_requested = os.environ.get("CAPSLAB_BACKEND", "").strip().lower()
if _requested and _requested not in _backends:
    raise ConfigError(
        f"CAPSLAB_BACKEND={_requested!r} is not available; choose from {sorted(_backends)}"
    )
_active = _backends[_requested or ("numba" if "numba" in _backends else "numpy")]


def backend_name():
    return _active.NAME


def available_backends():
    return sorted(_backends)


def set_backend(name):
    """Switch the kernel backend at runtime (used by tests and benchmarks)."""
    global _active
    if name not in _backends:
        raise ConfigError(f"unknown kernel backend {name!r}; choose from {sorted(_backends)}")
    _active = _backends[name]


# large scratch arrays (im2col patch matrices) are recycled to avoid
# repeated page-fault zeroing; entries are keyed by (shape, dtype)
_pool = {}
_POOL_LIMIT_BYTES = 1 << 29


def take_buffer(shape, dtype):
    key = (tuple(shape), np.dtype(dtype).str)
    slot = _pool.get(key)
    if slot:
        return slot.pop()
    return np.empty(shape, dtype=dtype)


def release_buffer(arr):
    if arr is None:
        return
    slot = _pool.setdefault((arr.shape, arr.dtype.str), [])
    pooled = sum(arrs[0].nbytes * len(arrs) for arrs in _pool.values() if arrs)
    if pooled + arr.nbytes <= _POOL_LIMIT_BYTES and len(slot) < 2:
        slot.append(arr)


def conv2d_forward(x, kernel, bias, stride):
    """Returns (out, ctx); ctx feeds the backward passes (may be None)."""
    return _active.conv2d_forward(x, kernel, bias, stride)


def conv2d_backward_input(gout, kernel, x_shape, stride, ctx=None):
    return _active.conv2d_backward_input(gout, kernel, x_shape, stride, ctx)


def conv2d_backward_kernel(gout, x, kernel_shape, stride, ctx=None):
    return _active.conv2d_backward_kernel(gout, x, kernel_shape, stride, ctx)
