"""Select the pair-block kernel implementation at import time.

The compiled ``_core`` extension is used when it was built; otherwise the
NumPy fallback. Set ``MOBML_BACKEND=python`` to force the fallback.
"""
import os

from . import _pycore

if os.environ.get("MOBML_BACKEND", "").lower() == "python":
    kernels = _pycore
    NAME = "python"
else:
    try:
        from . import _core as kernels
        NAME = "cython"
    except ImportError:
        kernels = _pycore
        NAME = "python"

AVAILABLE = {"python": _pycore}
try:
    from . import _core
    AVAILABLE["cython"] = _core
except ImportError:
    pass
