"""Pick the transport kernel: compiled core when importable, else pure Python.

Set ``SAIMC_BACKEND=python`` to force the fallback.
"""

import os

from . import _pycore

_forced = os.environ.get("SAIMC_BACKEND", "").lower()

if _forced == "python":
    _core = None
else:
    try:
        from . import _core
    except ImportError:  # extension not built
        if _forced == "compiled":
            raise
        _core = None

BACKEND = "compiled" if _core is not None else "python"
available = {"python": _pycore.Kernel}
if _core is not None:
    available["compiled"] = _core.Kernel


def kernel_class(name=None):
    """Kernel class by backend name (default: the selected one)."""
    name = name or BACKEND
    if name not in available:
        raise ValueError(f"backend {name!r} is not available (have {sorted(available)})")
    return available[name]
