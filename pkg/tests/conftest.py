"""Shared test configuration.

Single-threaded BLAS: the acceptance experiment is timed against a single
core, and thread contention on the small matrices here actually slows
multi-threaded BLAS down.
"""

import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
