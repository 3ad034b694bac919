"""Dense numeric foundation: float32 vectors/matrices, SiLU, quantiles, RNG.

Vectors are 1-D and matrices 2-D C-contiguous float32 ndarrays throughout the
package. All model compute runs in float32; statistics that feed thresholds
(means, quantiles) run in float64 and are rounded to float32 at the end, see
calibration.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

RNG_ALGORITHM = "PCG64"  # recorded in reports; fixed for reproducibility


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator; identical seeds give identical streams on any platform."""
    return np.random.Generator(np.random.PCG64(seed))


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.ascontiguousarray(x, dtype=np.float32)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"{name} must have at least one row and column, got {m.shape}")
    return m


def silu(v: np.ndarray) -> np.ndarray:
    """Elementwise x * sigmoid(x). expit keeps the tail stable in float32."""
    v = as_vector(v)
    return (v * expit(v)).astype(np.float32, copy=False)


def dense_vmm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Dense row-vector times matrix: out[n] = sum_k x[k] * w[k, n].

    The correctness oracle for the sparse kernels. w is the math orientation
    [K, N]; any strides are accepted (checkpoint weights are stored [N, K] and
    passed as views of their transpose).
    """
    x = as_vector(x, "x")
    if x.shape[0] != w.shape[0]:
        raise ValueError(f"dimension mismatch: x has {x.shape[0]}, w has {w.shape[0]} rows")
    return (x @ w).astype(np.float32, copy=False)


def empirical_quantile(samples, k: float) -> float:
    """Smallest sample value t with fraction(samples <= t) >= k.

    Exact order statistic: sorted ascending, element at ceil(k*n)-1, index
    clamped to [0, n-1]. No interpolation, so the result is always an observed
    value; k=0 gives the minimum, k=1 the maximum.
    """
    a = np.asarray(samples).ravel()
    if a.size == 0:
        raise ValueError("empirical_quantile needs at least one sample")
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"k must be in [0, 1], got {k}")
    idx = min(max(math.ceil(k * a.size) - 1, 0), a.size - 1)
    # partition is O(n); full sort only of the one pivot group
    return float(np.partition(a, idx)[idx])


def max_rel_diff(got: np.ndarray, ref: np.ndarray) -> float:
    """max|got-ref| normalized by max|ref|; the equivalence metric for kernel outputs."""
    got = np.asarray(got, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    scale = float(np.max(np.abs(ref))) if ref.size else 0.0
    if scale == 0.0:
        return float(np.max(np.abs(got))) if got.size else 0.0
    return float(np.max(np.abs(got - ref))) / scale
