"""Process-level tuning for long Monte Carlo runs.

Training allocates many short-lived arrays of a few megabytes. With glibc's
defaults each one is an mmap/munmap pair, and page faults end up costing about
as much as the arithmetic. Raising the mmap threshold keeps those buffers on the
heap. Outputs do not change; only speed does.
"""
from __future__ import annotations

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_MMAP_MAX = 32 * 1024 * 1024  # glibc ceiling on 64-bit

_tuned = False


def tune_allocator() -> bool:
    """Keep medium-sized numpy buffers on the heap. Returns True if applied."""
    global _tuned
    if _tuned:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, _MMAP_MAX) and libc.mallopt(_M_TRIM_THRESHOLD, 4 * _MMAP_MAX)
    except (OSError, AttributeError):
        return False
    _tuned = bool(ok)
    return _tuned
