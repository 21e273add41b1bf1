"""Backend selection for the evaluation core.

Prefers the compiled extension; falls back to the numpy implementation when
the build is unavailable or GELLAB_FORCE_FALLBACK=1 is set.
"""
from __future__ import annotations

import os

if os.environ.get("GELLAB_FORCE_FALLBACK", "0") == "1":
    from . import _core_np as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - build-env dependent
        from . import _core_np as _impl

        BACKEND = "numpy"

ppoly_eval = _impl.ppoly_eval

__all__ = ["ppoly_eval", "BACKEND"]
