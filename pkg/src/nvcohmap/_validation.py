"""Input checks shared by the fitting entry points."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_tau_trace(tau_list, trace, min_samples=1):
    """Validate a (tau, trace) pair: finite 1-D arrays of equal length, tau increasing."""
    tau = check_array(np.asarray(tau_list, dtype=float).reshape(1, -1), ensure_min_features=min_samples)[0]
    y = check_array(np.asarray(trace, dtype=float).reshape(1, -1), ensure_min_features=min_samples)[0]
    if tau.size != y.size:
        raise ValueError(f"tau has {tau.size} samples but trace has {y.size}")
    if np.any(np.diff(tau) <= 0):
        raise ValueError("tau must be strictly increasing")
    return tau, y
