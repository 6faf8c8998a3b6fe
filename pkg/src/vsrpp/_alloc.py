"""Optional glibc allocator tuning for the numeric hot loops.

The kernels allocate fresh multi-hundred-KB buffers every call; with glibc's
default mmap threshold each one round-trips through mmap/munmap and the page
faults dominate small convolutions.  Forcing heap reuse removes that cost.
Safe no-op on non-glibc platforms; affects speed only, never results.
"""

import ctypes
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_MAX = -4

_done = False


def tune_allocator():
    global _done
    if _done or not sys.platform.startswith("linux"):
        return
    _done = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_MAX, 0)
        libc.mallopt(_M_TRIM_THRESHOLD, 2 ** 31 - 1)
    except OSError:
        pass
