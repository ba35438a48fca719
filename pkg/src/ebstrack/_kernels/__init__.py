"""Hot-loop kernels with a compiled backend and a pure-Python fallback.

The compiled extension is used when it imports cleanly, unless the
environment variable ``EBSTRACK_PURE_PYTHON`` is set to a non-empty value
other than ``0``.  ``BACKEND`` names the backend in use.
"""

import os

from . import _pykernels as python_backend

compiled_backend = None
try:
    from . import _ckernels as compiled_backend  # type: ignore
except ImportError:  # extension not built
    compiled_backend = None

_force_py = os.environ.get("EBSTRACK_PURE_PYTHON", "") not in ("", "0")

if compiled_backend is not None and not _force_py:
    _impl = compiled_backend
    BACKEND = "cython"
else:
    _impl = python_backend
    BACKEND = "python"


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython', 'python' or None for active)."""
    if name is None:
        return _impl
    if name == "python":
        return python_backend
    if name == "cython":
        if compiled_backend is None:
            raise ImportError("compiled kernels are not built")
        return compiled_backend
    raise ValueError(f"unknown backend {name!r}")


def lowpass_response(itilde_half, dt, a, b, v0, backend=None):
    return get_backend(backend).lowpass_response(itilde_half, dt, a, b, v0)
