"""Hot-kernel backend selection.

The compiled Cython extension is preferred; the numpy reference twin in
:mod:`warptomo.kernels.reference` is selected when the extension is not
built, or when the environment variable ``WARPTOMO_NO_EXT`` is set to a
non-empty value other than "0". Both expose the same two entry points
(``encode_forward`` / ``encode_backward``) with identical semantics;
dense network layers run on BLAS either way and need no kernel here.
"""

import os

from . import reference

_forced_fallback = os.environ.get("WARPTOMO_NO_EXT", "0") not in ("", "0")

if _forced_fallback:
    _impl = reference
    BACKEND = "numpy"
else:
    try:
        from . import _gridenc as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = reference
        BACKEND = "numpy"

encode_forward = _impl.encode_forward
encode_backward = _impl.encode_backward


def backend_name() -> str:
    """Name of the active kernel backend ("cython" or "numpy")."""
    return BACKEND
