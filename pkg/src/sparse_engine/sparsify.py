"""Thresholding of activation vectors and the sparsification-error objectives.

Two thresholding functions produce masked activations: channel-wise (a
per-channel threshold vector, the FFN path) and tensor-wide (one scalar, the
attention path). Masked vectors stay dense with exact 0.0 holes because the
kernels test x[k] != 0.0; compressed index formats would change that contract.

Error objectives are evaluated in float64 so identity tests compare summation
orders, not accumulator noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import as_vector


@dataclass(frozen=True)
class PruneSet:
    """Strictly increasing channel indices selected for pruning."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
            raise ValueError("prune indices must be strictly increasing and non-negative")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_mask(cls, pruned_mask: np.ndarray) -> "PruneSet":
        return cls(np.flatnonzero(pruned_mask))

    def check_dim(self, d: int) -> np.ndarray:
        if self.indices.size and self.indices[-1] >= d:
            raise ValueError(f"prune index {self.indices[-1]} out of range for dim {d}")
        return self.indices

    def __len__(self) -> int:
        return int(self.indices.size)


def _as_pruneset(pruned) -> PruneSet:
    return pruned if isinstance(pruned, PruneSet) else PruneSet(np.asarray(pruned))


@dataclass(frozen=True)
class MaskedVector:
    """Dense activation vector with thresholded entries zeroed."""

    values: np.ndarray
    nnz: int

    @classmethod
    def from_values(cls, values: np.ndarray) -> "MaskedVector":
        values = as_vector(values)
        return cls(values, int(np.count_nonzero(values)))

    @property
    def sparsity(self) -> float:
        # entries that were exact zeros before thresholding count as pruned
        return 1.0 - self.nnz / self.values.shape[0]


def cwt_apply(a_gate, t, always_prune=None) -> MaskedVector:
    """Channel-wise thresholding: zero channel i when |a[i]| <= t[i] or flagged.

    The boundary |a| == t prunes. always_prune flags channels whose threshold
    is undefined (zero mean up-magnitude); their contribution is zero in
    expectation so they are statically dead.
    """
    a = as_vector(a_gate, "a_gate")
    t = as_vector(t, "t")
    if a.shape != t.shape:
        raise ValueError(f"length mismatch: activations {a.shape[0]}, thresholds {t.shape[0]}")
    keep = np.abs(a) > t
    if always_prune is not None:
        flags = np.asarray(always_prune, dtype=bool)
        if flags.shape != a.shape:
            raise ValueError("always_prune flags must match activation length")
        keep &= ~flags
    return MaskedVector.from_values(np.where(keep, a, np.float32(0.0)))


def cats_apply(x, t: float) -> MaskedVector:
    """Tensor-wide thresholding: zero every element with |x_i| <= t."""
    x = as_vector(x, "x")
    t = float(t)
    if not (t >= 0.0 and np.isfinite(t)):
        raise ValueError(f"threshold must be finite and >= 0, got {t}")
    return MaskedVector.from_values(np.where(np.abs(x) > t, x, np.float32(0.0)))


def ffn_objective(a_up, a_gate, pruned) -> float:
    """FFN sparsification error: sum over pruned channels of (a_up_i * a_gate_i)^2.

    Identical to the direct norm ||a_up (.) a_gate - a_up (.) masked(a_gate)||^2
    because the objective is a sum of independent per-channel terms.
    """
    a_up = as_vector(a_up, "a_up")
    a_gate = as_vector(a_gate, "a_gate")
    if a_up.shape != a_gate.shape:
        raise ValueError("a_up and a_gate must have equal length")
    idx = _as_pruneset(pruned).check_dim(a_up.shape[0])
    prod = a_up[idx].astype(np.float64) * a_gate[idx].astype(np.float64)
    return float(np.dot(prod, prod))


def attn_objective_exact(x, pruned, w) -> float:
    """Exact projection error ||x W - x_hat W||^2 via two dense matvecs."""
    x = as_vector(x, "x")
    w = np.asarray(w, dtype=np.float32)
    if x.shape[0] != w.shape[0]:
        raise ValueError(f"dimension mismatch: x has {x.shape[0]}, w has {w.shape[0]} rows")
    idx = _as_pruneset(pruned).check_dim(x.shape[0])
    x64 = x.astype(np.float64)
    x_hat = x64.copy()
    x_hat[idx] = 0.0
    w64 = w.astype(np.float64)
    diff = x64 @ w64 - x_hat @ w64
    return float(np.dot(diff, diff))


def attn_objective_diag(x, pruned, row_norms_sq) -> float:
    """Diagonal-curvature error estimate: sum over pruned i of ||W_i||^2 * x_i^2.

    Exact when W has orthogonal rows; otherwise an estimate that drops the
    cross terms of the full quadratic form.
    """
    x = as_vector(x, "x")
    rn2 = np.asarray(row_norms_sq, dtype=np.float64).ravel()
    if x.shape[0] != rn2.shape[0]:
        raise ValueError("row_norms_sq must match activation length")
    idx = _as_pruneset(pruned).check_dim(x.shape[0])
    xi = x[idx].astype(np.float64)
    return float(np.sum(rn2[idx] * xi * xi))
