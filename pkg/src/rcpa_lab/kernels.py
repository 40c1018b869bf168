"""Backend selection for the token-level kernels.

The compiled extension is preferred; the numpy fallback is used when it is not
built or when ``RCPA_LAB_BACKEND=python`` is set in the environment.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("RCPA_LAB_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        _impl = _compiled

sample_batch = _impl.sample_batch
token_logps = _impl.token_logps
surrogate_accumulate = _impl.surrogate_accumulate

__all__ = ["BACKEND", "sample_batch", "token_logps", "surrogate_accumulate"]
