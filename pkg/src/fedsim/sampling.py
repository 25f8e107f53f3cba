"""Client sampling probabilities."""

from __future__ import annotations

import numpy as np


def adaptive_sampling_probs(stats, gamma: float) -> np.ndarray:
    """Softmax of ``gamma * stats``.

    ``stats`` is a per-client loss or squared gradient norm; entries that are
    NaN (never observed) are filled with the largest observed value so unseen
    clients are not starved. With no observations at all the result is
    uniform.
    """
    s = np.asarray(stats, dtype=np.float64)
    n = s.size
    known = np.isfinite(s)
    if not known.any():
        return np.full(n, 1.0 / n)
    s = np.where(known, s, s[known].max())
    z = gamma * s
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def size_probs(sizes) -> np.ndarray:
    n = np.asarray(sizes, dtype=np.float64)
    return n / n.sum()
