"""Allocator tuning for the array-heavy training hot path.

Training allocates thousands of ~256 KB temporaries per iteration. With
glibc defaults those exceed the mmap threshold, so every temporary becomes
an mmap/munmap pair plus page faults, which dominates runtime by an order
of magnitude. Raising the mmap and trim thresholds keeps those buffers on
the heap free list. This only changes allocation performance, never
semantics; on non-glibc platforms it is a silent no-op. Set
CHOWFLOW_NO_MALLOC_TUNING=1 to opt out.
"""

from __future__ import annotations

import ctypes
import os

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_THRESHOLD_BYTES = 128 * 1024 * 1024

_applied = False


def tune_malloc() -> bool:
    """Raise glibc malloc thresholds once per process; True if applied."""
    global _applied
    if _applied or os.environ.get("CHOWFLOW_NO_MALLOC_TUNING"):
        return _applied
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, _THRESHOLD_BYTES)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, _THRESHOLD_BYTES)
        _applied = bool(ok)
    except OSError:
        _applied = False
    return _applied
