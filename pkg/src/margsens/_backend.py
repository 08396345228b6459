"""Select compiled or pure-Python kernels at import time.

Set ``MARGSENS_PURE_PYTHON=1`` to force the fallback.
"""
import os

if os.environ.get("MARGSENS_PURE_PYTHON") == "1":
    from . import _kernels_py as kernels
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels
        BACKEND = "compiled"
    except ImportError:
        from . import _kernels_py as kernels
        BACKEND = "python"

__all__ = ["kernels", "BACKEND"]
