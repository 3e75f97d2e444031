"""Hot kernels: the compiled extension when it was built, numpy otherwise.

Set ``STAGEIDS_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
if os.environ.get("STAGEIDS_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
else:
    _impl = _fallback

csr_matmul = _impl.csr_matmul
csr_matmul_exact = _impl.csr_matmul_exact
best_split = _impl.best_split

__all__ = ["BACKEND", "csr_matmul", "csr_matmul_exact", "best_split"]
