"""Central-difference gradient checking shared by unit and acceptance tests."""

import numpy as np


def central_differences(fn, flat, idx, h=1e-5):
    out = np.empty(len(idx))
    x = flat.copy()
    for k, i in enumerate(idx):
        x0 = x[i]
        x[i] = x0 + h
        a = fn(x)
        x[i] = x0 - h
        b = fn(x)
        x[i] = x0
        out[k] = (a - b) / (2.0 * h)
    return out


def relative_errors(analytic, numeric, floor):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from amplifying round-off."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
