"""Best-effort glibc allocator tuning for the command-line runs.

Training and the benchmark allocate many short-lived arrays of a few hundred
kilobytes to a few megabytes. With glibc's default thresholds each of those
can turn into an mmap/munmap pair or a heap trim, and on sandboxed kernels the
resulting page faults dominate the run time and distort timings. Raising the
trim and mmap thresholds keeps freed blocks in the heap for reuse. Memory use
grows by at most the top pad. No-op off glibc.
"""
from __future__ import annotations

import ctypes
import ctypes.util
import sys

M_TRIM_THRESHOLD = -1
M_TOP_PAD = -2
M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator() -> bool:
    """Returns True when the thresholds were applied."""
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = (ctypes.c_int, ctypes.c_int)
    ok = all(mallopt(param, value) == 1 for param, value in (
        (M_TRIM_THRESHOLD, 512 << 20), (M_TOP_PAD, 64 << 20), (M_MMAP_THRESHOLD, 32 << 20)))
    _done = ok
    return ok
