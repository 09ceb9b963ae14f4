"""Kernel backend selection.

The compiled extension is used when it imports; ``LORASERVE_BACKEND=python``
forces the numpy fallback.
"""
import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

compiled = None
if os.environ.get("LORASERVE_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as compiled
    except ImportError as exc:
        log.warning("compiled kernels unavailable (%s); using numpy fallback", exc)

kernels = compiled if compiled is not None else _fallback
NAME = "cython" if compiled is not None else "python"


def get(name=None):
    """Return the kernel module by name (``"cython"`` or ``"python"``); default is the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _fallback
    if name == "cython":
        if compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return compiled
    raise ValueError(f"unknown backend {name!r}")
