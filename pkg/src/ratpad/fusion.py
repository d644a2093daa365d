"""Probabilistic-OR fusion of discriminative and one-class scores."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FusedScore:
    p_d: float
    p_o: float
    p_fused: float


def _check(p, name):
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return p


def fuse_prob(p_d, p_o):
    """``1 - (1 - p_d)(1 - p_o)``, element-wise."""
    p_d = _check(p_d, "p_d")
    p_o = _check(p_o, "p_o")
    out = 1.0 - (1.0 - p_d) * (1.0 - p_o)
    return float(out) if out.ndim == 0 else out


def fuse(p_d, p_o):
    return FusedScore(float(p_d), float(p_o), fuse_prob(p_d, p_o))
