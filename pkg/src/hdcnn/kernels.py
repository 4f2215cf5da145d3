"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
implementations take over.  Set ``HDCNN_PURE_PYTHON=1`` to force the
fallback (used by the benchmark and the cross-backend tests).
"""

import os
from types import ModuleType

from hdcnn import _kernels_py


def _load_compiled() -> ModuleType | None:
    if os.environ.get("HDCNN_PURE_PYTHON", "").lower() in ("1", "true", "yes"):
        return None
    try:
        from hdcnn import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()
_impl: ModuleType = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


def get_backend(name: str) -> ModuleType:
    """Fetch a specific backend module by name ("cython" or "python")."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from hdcnn import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def compiled_available() -> bool:
    try:
        from hdcnn import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


conv_output_size = _kernels_py.conv_output_size
im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
jacobi_eigh = _impl.jacobi_eigh
pq_lookup = _impl.pq_lookup
