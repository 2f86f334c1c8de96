"""Kernel backend selection.

The compiled extension is used when importable; setting ``PSYPIPE_PURE_PYTHON=1``
forces the numpy fallback. ``BACKEND`` names the active implementation.
"""
from __future__ import annotations

import os

from . import _fallback

if os.environ.get("PSYPIPE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _fallback
        BACKEND = "python"

bootstrap_mean_r = _impl.bootstrap_mean_r
jaccard_best = _impl.jaccard_best

__all__ = ["BACKEND", "bootstrap_mean_r", "jaccard_best"]
