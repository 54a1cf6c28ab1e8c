"""Segment reduction kernels with backend selection at import.

The compiled extension is preferred; set ``HADA_PURE_PYTHON=1`` to force the
numpy fallback. Both backends accumulate in edge order and agree bitwise.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("HADA_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _prep(values, seg):
    values = np.ascontiguousarray(values, dtype=np.float64)
    seg = np.ascontiguousarray(seg, dtype=np.int64)
    if values.shape[0] != seg.shape[0]:
        raise ValueError(f"segment ids length {seg.shape[0]} != rows {values.shape[0]}")
    return values, seg


def segment_sum(values, seg, n, impl=None):
    """Sum rows of ``values`` into ``n`` buckets given by ``seg``."""
    impl = impl or _impl
    values, seg = _prep(values, seg)
    if values.ndim == 1:
        return impl.segment_sum_1d(values, seg, n)
    if values.ndim == 2:
        return impl.segment_sum_2d(values, seg, n)
    raise ValueError(f"segment_sum expects 1-D or 2-D values, got shape {values.shape}")


def segment_max(values, seg, n, impl=None):
    """Per-bucket maximum of a 1-D array; empty buckets hold ``-inf``."""
    impl = impl or _impl
    values, seg = _prep(values, seg)
    return impl.segment_max_1d(values, seg, n)
