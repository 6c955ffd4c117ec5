"""Numba availability and the env switch that disables it.

Set ``PTSFA_NO_NUMBA=1`` to force the pure-numpy kernels.
"""

import os

_DISABLED = os.environ.get("PTSFA_NO_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


def njit(fn):
    """Compile ``fn`` with numba when installed; otherwise return it unchanged.

    Compilation is independent of ``USE_NUMBA`` so both paths stay testable.
    """
    if not HAVE_NUMBA:  # pragma: no cover
        return fn
    return _njit(cache=True, nogil=True)(fn)
