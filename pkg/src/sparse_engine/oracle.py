"""Reference implementations the fast paths are judged against.

Everything here favors transparency over speed: exhaustive search where the
budget allows, pure-Python float64 loops for the block forward. None of it
shares code with the engine's vectorized or kernel paths.
"""

from __future__ import annotations

import itertools
import math
from typing import Optional

import numpy as np

from .model import RMS_EPS, LayerWeights, ModelConfig
from .sparsify import PruneSet

EXHAUSTIVE_MAX_DIM = 20


def _budget(d: int, k: Optional[float], count: Optional[int]) -> int:
    if (k is None) == (count is None):
        raise ValueError("give exactly one of k and count")
    if count is None:
        if not 0.0 <= k <= 1.0:
            raise ValueError(f"k must be in [0, 1], got {k}")
        count = math.ceil(k * d)
    if not 0 <= count <= d:
        raise ValueError(f"prune count {count} out of range for dim {d}")
    return count


def optimal_ffn_pruneset(a_up, a_gate, k: Optional[float] = None, count: Optional[int] = None) -> PruneSet:
    """Error-minimizing prune set for the gated product: separable, so exact.

    The error of pruning set P is sum over P of (a_up_i * a_gate_i)^2; the
    smallest ceil(k * d) magnitudes (or an explicit count) are optimal. Ties
    break toward the lowest index.
    """
    a_up = np.asarray(a_up, dtype=np.float64).ravel()
    a_gate = np.asarray(a_gate, dtype=np.float64).ravel()
    if a_up.shape != a_gate.shape:
        raise ValueError(f"shape mismatch: {a_up.shape} vs {a_gate.shape}")
    m = _budget(a_up.shape[0], k, count)
    scores = np.abs(a_up * a_gate)
    order = np.argsort(scores, kind="stable")
    return PruneSet(np.sort(order[:m]).astype(np.int64))


def optimal_attn_pruneset(
    x,
    w=None,
    k: Optional[float] = None,
    count: Optional[int] = None,
    objective: str = "exact",
) -> PruneSet:
    """Prune set minimizing a projection-input error objective.

    objective "exact" minimizes ||x W - x_hat W||^2 by exhaustive search over
    all subsets of the budgeted size (dims above 20 are refused: the search
    is combinatorial). "diag" greedily drops the smallest ||W_i||^2 x_i^2
    terms, which is exact when the rows of W are orthogonal; "abs" greedily
    drops the smallest |x_i| and needs no weights. Ties break toward the
    lowest index; w is the math orientation [d_in, d_out].
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    d = x.shape[0]
    m = _budget(d, k, count)
    if objective == "abs":
        order = np.argsort(np.abs(x), kind="stable")
        return PruneSet(np.sort(order[:m]).astype(np.int64))
    if w is None:
        raise ValueError(f"objective {objective!r} needs weights")
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != d:
        raise ValueError(f"weight shape {w.shape} does not match input dim {d}")
    if objective == "diag":
        scores = np.sum(w * w, axis=1) * x * x
        order = np.argsort(scores, kind="stable")
        return PruneSet(np.sort(order[:m]).astype(np.int64))
    if objective != "exact":
        raise ValueError(f"unknown objective {objective!r}")
    if d > EXHAUSTIVE_MAX_DIM:
        raise ValueError(f"exhaustive search is limited to dim <= {EXHAUSTIVE_MAX_DIM}, got {d}")
    contrib = x[:, None] * w  # dropping set P costs ||sum over P of contrib[i]||^2
    best = None
    best_err = math.inf
    for combo in itertools.combinations(range(d), m):
        delta = contrib[list(combo)].sum(axis=0)
        e = float(delta @ delta)
        if e < best_err:
            best_err = e
            best = combo
    return PruneSet(np.asarray(best, dtype=np.int64))


def _sigmoid(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def reference_block_forward(x, layer: LayerWeights, config: ModelConfig, past_k=None, past_v=None):
    """One pre-norm residual block as explicit float64 scalar loops.

    Independent of the engine's vectorized path in both code and arithmetic
    (float64 throughout, sequential sums). past_k/past_v are earlier cache
    entries [n_kv_heads, prev_len, head_dim]; returns (block output,
    this token's k, this token's v) as float64 arrays.
    """
    c = config
    d = c.d_model
    hd = c.head_dim
    n_kv = c.n_kv_heads
    group = c.n_heads // n_kv
    xf = [float(v) for v in np.asarray(x).ravel()]
    if len(xf) != d:
        raise ValueError(f"input dim {len(xf)} != d_model {d}")

    def norm(vec):
        ms = sum(v * v for v in vec) / len(vec)
        inv = 1.0 / math.sqrt(ms + RMS_EPS)
        return [v * inv for v in vec]

    def proj(vec, w_stored):  # [d_out, d_in] rows
        out = []
        for j in range(w_stored.shape[0]):
            s = 0.0
            for i in range(w_stored.shape[1]):
                s += float(w_stored[j, i]) * vec[i]
            out.append(s)
        return out

    xn = norm(xf)
    q = proj(xn, layer.wq)
    k_t = proj(xn, layer.wk)
    v_t = proj(xn, layer.wv)

    prev = 0 if past_k is None else past_k.shape[1]
    ctx = [0.0] * d
    for h in range(c.n_heads):
        g = h // group
        scores = []
        for l in range(prev + 1):
            s = 0.0
            for e in range(hd):
                key = float(past_k[g, l, e]) if l < prev else k_t[g * hd + e]
                s += q[h * hd + e] * key
            scores.append(s / math.sqrt(hd))
        mx = max(scores)
        exps = [math.exp(s - mx) for s in scores]
        z = sum(exps)
        probs = [e / z for e in exps]
        for e in range(hd):
            s = 0.0
            for l in range(prev + 1):
                val = float(past_v[g, l, e]) if l < prev else v_t[g * hd + e]
                s += probs[l] * val
            ctx[h * hd + e] = s
    attn_out = proj(ctx, layer.wo)
    h1 = [a + b for a, b in zip(xf, attn_out)]

    hn = norm(h1)
    gate = proj(hn, layer.w_gate)
    up = proj(hn, layer.w_up)
    prod = [g * _sigmoid(g) * u for g, u in zip(gate, up)]
    down = proj(prod, layer.w_down)
    out = [a + b for a, b in zip(h1, down)]

    k_new = np.asarray(k_t, dtype=np.float64).reshape(n_kv, hd)
    v_new = np.asarray(v_t, dtype=np.float64).reshape(n_kv, hd)
    return np.asarray(out, dtype=np.float64), k_new, v_new
