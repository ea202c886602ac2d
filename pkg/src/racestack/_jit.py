"""Optional numba acceleration for the hot numeric kernels."""

from __future__ import annotations

try:
    from numba import njit as _njit

    HAVE_NUMBA = True

    def maybe_njit(func):
        return _njit(cache=True, fastmath=False)(func)

except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def maybe_njit(func):
        return func
