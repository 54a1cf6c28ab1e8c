"""Pure-numpy segment reductions, used when the compiled module is unavailable."""

import numpy as np


def segment_sum_1d(values, seg, n):
    out = np.zeros(n, dtype=np.float64)
    np.add.at(out, seg, values)
    return out


def segment_sum_2d(values, seg, n):
    out = np.zeros((n, values.shape[1]), dtype=np.float64)
    np.add.at(out, seg, values)
    return out


def segment_max_1d(values, seg, n):
    out = np.full(n, -np.inf, dtype=np.float64)
    np.maximum.at(out, seg, values)
    return out
