"""The two kernels that turn zeros into skipped work.

spvmm exploits input sparsity: a zero element of x means one whole weight row
is never read. vmmsp exploits output sparsity: a zero mask entry means one
weight column is never read, and surviving outputs come back already scaled by
the mask value, which fuses the gate multiply of a gated MLP into the up
projection. Both are exact on the surviving entries, so the only difference
from a dense product is the work they skip.

Run: python3 demos/02_sparse_kernels.py
"""

import numpy as np

import sparse_engine as se
from sparse_engine import KernelConfig

rng = se.make_rng(0)

# correctness on a small case first
k_dim, n_dim = 64, 96
w = rng.standard_normal((k_dim, n_dim)).astype(np.float32)
x = rng.standard_normal(k_dim, dtype=np.float32)
x[rng.random(k_dim) < 0.6] = 0.0
mask = rng.standard_normal(n_dim, dtype=np.float32)
mask[rng.random(n_dim) < 0.6] = 0.0

y_sp = se.spvmm(x, w, KernelConfig())
y_ref = se.dense_vmm(x, w)
print(f"spvmm vs dense, {np.mean(x == 0.0):.0%} zero inputs: "
      f"max rel diff {se.max_rel_diff(y_sp, y_ref):.2e}")

w_nk = np.ascontiguousarray(w.T)  # vmmsp wants the stored [n_out, k] layout
y_ms = se.vmmsp(x, w_nk, mask, KernelConfig())
y_ref = mask * se.dense_vmm(x, w)
print(f"vmmsp vs mask*dense, {np.mean(mask == 0.0):.0%} masked outputs: "
      f"max rel diff {se.max_rel_diff(y_ms, y_ref):.2e}")

# the counted variants report how much work the zeros removed
_, reads = se.spvmm_counted(x, w, KernelConfig())
print(f"spvmm weight reads: {reads} of {k_dim * n_dim} "
      f"({reads / (k_dim * n_dim):.0%})")

# latency at decoder-projection dims: zeros turn into wall-clock time
k_dim, n_dim = 4096, 11008
reps = 5
cfg = KernelConfig(block_size=se.streaming_block_size(n_dim), thread_count=1)
print(f"\nlatency at {k_dim}x{n_dim}, {reps} reps, min over reps (ms):")
print(f"{'sparsity':>8} {'dense':>8} {'spvmm':>8} {'vs dense':>9}")
for sp in (0.0, 0.5, 0.9, 0.99):
    dense = se.bench_kernel("dense", k_dim, n_dim, sp, reps, se.make_rng(1), cfg)
    sparse = se.bench_kernel("spvmm", k_dim, n_dim, sp, reps, se.make_rng(1), cfg)
    ratio = dense.min_ns / sparse.min_ns
    print(f"{sp:>8} {dense.min_ns / 1e6:>8.2f} {sparse.min_ns / 1e6:>8.2f} {ratio:>8.2f}x")
print("(dense is flat because it reads every weight regardless; spvmm's time"
      " tracks the surviving rows)")
