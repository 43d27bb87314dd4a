"""Kernel backend selection.

Two interchangeable providers exist for the hot kernels (matmul, batched
matmul, softmax, layer norm, L2 row normalization, sigmoid, softplus):

    msam.kernels._compiled      Cython core; gemm is delegated to BLAS
                                via scipy's cython bindings, the
                                row-wise kernels are fused single-pass
                                loops
    msam.kernels.numpy_backend  pure-numpy fallback, always available

One provider is chosen at import and exposed as ``backend``:

    * ``MSAM_BACKEND=numpy`` or ``MSAM_BACKEND=compiled`` forces one
      (forcing an unavailable compiled core raises ImportError);
    * otherwise the compiled core is used when importable.

``python -m msam.bench`` times the two side by side.
"""

from __future__ import annotations

import os

from . import numpy_backend

try:
    from . import _compiled as _compiled_backend
except ImportError:
    _compiled_backend = None


def available_backends() -> dict:
    """Name -> module for every importable provider."""
    out = {"numpy": numpy_backend}
    if _compiled_backend is not None:
        out["compiled"] = _compiled_backend
    return out


def get_backend(name: str):
    try:
        return available_backends()[name]
    except KeyError:
        raise ImportError(
            f"kernel backend {name!r} is not available; "
            f"built: {sorted(available_backends())}"
        ) from None


def _select():
    requested = os.environ.get("MSAM_BACKEND", "auto").strip().lower()
    if requested in ("", "auto"):
        return _compiled_backend if _compiled_backend is not None else numpy_backend
    return get_backend(requested)


backend = _select()
