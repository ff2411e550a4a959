"""Backend selection for the ring event loop.

The compiled extension is used when it imports; otherwise the pure-Python
loop runs. Both produce identical traces. ``RINGPIPE_KERNEL=python`` forces
the fallback.
"""
from __future__ import annotations

import os

from . import _kernel_py
from ._kernel_py import KernelDeadlock

try:
    from . import _kernel as _kernel_c
except ImportError:  # extension not built
    _kernel_c = None

BACKENDS = {"python": _kernel_py.run_ring}
if _kernel_c is not None:
    BACKENDS["compiled"] = _kernel_c.run_ring

DEFAULT_BACKEND = "compiled" if (_kernel_c is not None
                                 and os.environ.get("RINGPIPE_KERNEL") != "python") else "python"


def get_backend(name: str | None = None):
    name = name or DEFAULT_BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}") from None


__all__ = ["BACKENDS", "DEFAULT_BACKEND", "get_backend", "KernelDeadlock"]
