"""Keep large freed buffers reusable instead of returning them to the OS.

glibc serves big allocations straight from mmap by default, so every
large numpy temporary pays page-fault and zeroing costs on first touch.
Training allocates same-sized buffers every step; raising the mmap and
trim thresholds lets the allocator recycle them, which speeds up the
convolution-heavy paths severalfold. Set SPDISTILL_NO_MALLOC_TUNE=1 to
skip this (it only trades resident memory for speed; results are
unaffected).
"""

import ctypes
import os

M_TRIM_THRESHOLD = -1
M_MMAP_THRESHOLD = -3


def tune() -> bool:
    if os.environ.get("SPDISTILL_NO_MALLOC_TUNE"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(M_TRIM_THRESHOLD, -1)
        return True
    except OSError:
        return False
