"""Sparsity-exploiting vector-matrix kernels with block-parallel execution.

Two kernels, both over disjoint output blocks with no atomics or locks:

- spvmm: input-sparse. Weight rows whose input element is exactly 0.0 are
  skipped entirely (no reads, no MACs). Consumes the pre-transposed [K, N]
  layout so each surviving row is a contiguous stream.
- vmmsp: output-sparse. Output elements whose mask entry is exactly 0.0 are
  skipped (the whole dot product), survivors are scaled by the mask value.
  Consumes the checkpoint-native [N, K] layout.

spvmm gathers the nonzero input indices once and processes eight weight rows
per sweep over a block: the eight-way form cuts accumulator load/store
traffic and gives the hardware prefetcher parallel row streams. Accumulation
still proceeds over the nonzero k in ascending order for every output
element, so results are bit-identical across block sizes and thread counts;
equivalence to the dense reference is tolerance-based (different summation
order than BLAS).

Instrumented *_counted variants return exact read counts; they are the
work-skipping oracles, not the fast path.
"""

from __future__ import annotations

import math
import os
import statistics
import time
from dataclasses import dataclass

import numpy as np
import numba
from numba import njit, prange

from .tensor_core import as_matrix, as_vector, dense_vmm


def _default_threads() -> int:
    return os.cpu_count() or 1


@dataclass(frozen=True)
class KernelConfig:
    """Immutable kernel execution parameters.

    thread_count defaults to the available cores and is clamped at launch to
    the numba pool size (NUMBA_NUM_THREADS). block_size is the output-block
    grain; see streaming_block_size for a host-aware choice.
    """

    block_size: int = 64
    thread_count: int = 0  # 0 = available cores

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.thread_count == 0:
            object.__setattr__(self, "thread_count", _default_threads())
        if self.thread_count < 1:
            raise ValueError(f"thread_count must be >= 1, got {self.thread_count}")

    @property
    def effective_threads(self) -> int:
        return min(self.thread_count, numba.config.NUMBA_NUM_THREADS)


def streaming_block_size(n: int, threads: int = 1) -> int:
    """Block size that keeps weight reads page-sequential on few-core hosts.

    One block per call when single-threaded (whole rows stream contiguously);
    otherwise a few blocks per thread for load balance, never below the
    default grain.
    """
    if threads <= 1:
        return n
    return max(64, math.ceil(n / (4 * threads)))


@dataclass(frozen=True)
class TransposedWeight:
    """[K, N] C-contiguous weight layout consumed by spvmm.

    Checkpoints store projections [N_out, K_in]; pre-transposition happens once
    at preparation time so the kernel's per-row access is unit-stride.
    """

    data: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float32)
        if d.ndim != 2:
            raise ValueError(f"transposed weight must be 2-D, got shape {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def k_in(self) -> int:
        return self.data.shape[0]

    @property
    def n_out(self) -> int:
        return self.data.shape[1]


def pre_transpose(w) -> TransposedWeight:
    """Materialize the [K, N] math-orientation view of a weight contiguously.

    Pass stored_weight.T for checkpoint-layout ([N_out, K_in]) weights; the
    physical transpose happens here, once. Values are untouched (layout only).
    """
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise ValueError(f"weight must be 2-D, got shape {w.shape}")
    return TransposedWeight(np.ascontiguousarray(w))


@njit(parallel=True, fastmath=True, cache=True)
def _spvmm_jit(x, w, block_size):  # w: [K, N] C-contiguous
    k_dim, n_dim = w.shape
    y = np.empty(n_dim, dtype=np.float32)
    nz = np.empty(k_dim, dtype=np.int64)
    nnz = 0
    for k in range(k_dim):
        if x[k] != 0.0:
            nz[nnz] = k
            nnz += 1
    n_blocks = (n_dim + block_size - 1) // block_size
    for b in prange(n_blocks):
        n0 = b * block_size
        n1_upp = min(block_size, n_dim - n0)
        acc = np.zeros(n1_upp, dtype=np.float32)
        g = 0
        while g + 8 <= nnz:
            k0, k1, k2, k3 = nz[g], nz[g + 1], nz[g + 2], nz[g + 3]
            k4, k5, k6, k7 = nz[g + 4], nz[g + 5], nz[g + 6], nz[g + 7]
            x0, x1, x2, x3 = x[k0], x[k1], x[k2], x[k3]
            x4, x5, x6, x7 = x[k4], x[k5], x[k6], x[k7]
            for n1 in range(n1_upp):
                acc[n1] += (
                    x0 * w[k0, n0 + n1]
                    + x1 * w[k1, n0 + n1]
                    + x2 * w[k2, n0 + n1]
                    + x3 * w[k3, n0 + n1]
                    + x4 * w[k4, n0 + n1]
                    + x5 * w[k5, n0 + n1]
                    + x6 * w[k6, n0 + n1]
                    + x7 * w[k7, n0 + n1]
                )
            g += 8
        while g < nnz:
            k = nz[g]
            xk = x[k]
            for n1 in range(n1_upp):
                acc[n1] += xk * w[k, n0 + n1]
            g += 1
        for n1 in range(n1_upp):
            y[n0 + n1] = acc[n1]
    return y


@njit(parallel=True, fastmath=True, cache=True)
def _spvmm_counted_jit(x, w, block_size):
    k_dim, n_dim = w.shape
    y = np.empty(n_dim, dtype=np.float32)
    n_blocks = (n_dim + block_size - 1) // block_size
    reads = 0
    for b in prange(n_blocks):
        n0 = b * block_size
        n1_upp = min(block_size, n_dim - n0)
        acc = np.zeros(n1_upp, dtype=np.float32)
        for k in range(k_dim):
            xk = x[k]
            if xk != 0.0:
                for n1 in range(n1_upp):
                    acc[n1] += xk * w[k, n0 + n1]
                reads += n1_upp
        for n1 in range(n1_upp):
            y[n0 + n1] = acc[n1]
    return y, reads


@njit(parallel=True, fastmath=True, cache=True)
def _vmmsp_jit(x, w, mask, block_size):  # w: [N, K] C-contiguous
    n_dim, k_dim = w.shape
    y = np.empty(n_dim, dtype=np.float32)
    n_blocks = (n_dim + block_size - 1) // block_size
    for b in prange(n_blocks):
        n0 = b * block_size
        n1_upp = min(block_size, n_dim - n0)
        for n1 in range(n1_upp):
            n = n0 + n1
            m = mask[n]
            if m != 0.0:
                acc = np.float32(0.0)
                for k in range(k_dim):
                    acc += x[k] * w[n, k]
                y[n] = acc * m
            else:
                y[n] = 0.0
    return y


@njit(parallel=True, fastmath=True, cache=True)
def _vmmsp_counted_jit(x, w, mask, block_size):
    n_dim, k_dim = w.shape
    y = np.empty(n_dim, dtype=np.float32)
    n_blocks = (n_dim + block_size - 1) // block_size
    reads = 0
    dots = 0
    for b in prange(n_blocks):
        n0 = b * block_size
        n1_upp = min(block_size, n_dim - n0)
        for n1 in range(n1_upp):
            n = n0 + n1
            m = mask[n]
            if m != 0.0:
                acc = np.float32(0.0)
                for k in range(k_dim):
                    acc += x[k] * w[n, k]
                y[n] = acc * m
                reads += k_dim
                dots += 1
            else:
                y[n] = 0.0
    return y, reads, dots


def _weight_kn(w) -> np.ndarray:
    if isinstance(w, TransposedWeight):
        return w.data
    return as_matrix(w, "w")


def _apply_threads(cfg: KernelConfig) -> None:
    numba.set_num_threads(cfg.effective_threads)


def spvmm(x, w, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """Input-sparse vector-matrix multiply; rows for zero x[k] are skipped."""
    data = _weight_kn(w)
    x = as_vector(x, "x")
    if x.shape[0] != data.shape[0]:
        raise ValueError(f"dimension mismatch: x has {x.shape[0]}, weight expects {data.shape[0]}")
    _apply_threads(cfg)
    return _spvmm_jit(x, data, cfg.block_size)


def spvmm_counted(x, w, cfg: KernelConfig = KernelConfig()):
    """spvmm plus the exact number of weight elements read."""
    data = _weight_kn(w)
    x = as_vector(x, "x")
    if x.shape[0] != data.shape[0]:
        raise ValueError(f"dimension mismatch: x has {x.shape[0]}, weight expects {data.shape[0]}")
    _apply_threads(cfg)
    y, reads = _spvmm_counted_jit(x, data, cfg.block_size)
    return y, int(reads)


def vmmsp(x, w, mask, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """Output-sparse vector-matrix multiply: y[n] = mask[n] * (w[n] . x).

    w is [N, K] row-major per output; dot products for zero mask entries are
    skipped entirely.
    """
    w = as_matrix(w, "w")
    x = as_vector(x, "x")
    mask = as_vector(mask, "mask")
    if x.shape[0] != w.shape[1]:
        raise ValueError(f"dimension mismatch: x has {x.shape[0]}, weight expects {w.shape[1]}")
    if mask.shape[0] != w.shape[0]:
        raise ValueError(f"dimension mismatch: mask has {mask.shape[0]}, weight has {w.shape[0]} outputs")
    _apply_threads(cfg)
    return _vmmsp_jit(x, w, mask, cfg.block_size)


def vmmsp_counted(x, w, mask, cfg: KernelConfig = KernelConfig()):
    """vmmsp plus exact weight-element reads and inner-product count."""
    w = as_matrix(w, "w")
    x = as_vector(x, "x")
    mask = as_vector(mask, "mask")
    if x.shape[0] != w.shape[1] or mask.shape[0] != w.shape[0]:
        raise ValueError("dimension mismatch")
    _apply_threads(cfg)
    y, reads, dots = _vmmsp_counted_jit(x, w, mask, cfg.block_size)
    return y, int(reads), int(dots)


@dataclass(frozen=True)
class BenchRecord:
    kernel: str
    k_dim: int
    n_dim: int
    sparsity: float
    block_size: int
    threads: int
    reps: int
    min_ns: int
    median_ns: int
    checksum: float


BENCH_CSV_HEADER = "kernel,K,N,sparsity,block_size,threads,reps,min_ns,median_ns,checksum"


def bench_csv_row(r: BenchRecord) -> str:
    return (
        f"{r.kernel},{r.k_dim},{r.n_dim},{r.sparsity!r},{r.block_size},"
        f"{r.threads},{r.reps},{r.min_ns},{r.median_ns},{r.checksum!r}"
    )


def write_bench_csv(records, fh) -> None:
    fh.write(BENCH_CSV_HEADER + "\n")
    for r in records:
        fh.write(bench_csv_row(r) + "\n")


def bench_kernel(
    kind: str,
    k_dim: int,
    n_dim: int,
    sparsity: float,
    reps: int,
    rng: np.random.Generator,
    cfg: KernelConfig = KernelConfig(),
    warmup: int = 2,
) -> BenchRecord:
    """Time one kernel configuration on synthetic inputs.

    Inputs carry exactly floor(sparsity * len) zeros at random positions.
    Draw order (weights, then values, then zero positions) is fixed, so equal
    rng seeds give identical inputs across kinds: the dense row and the spvmm
    row at the same dims/sparsity compute the same product and their checksums
    agree to kernel tolerance. Warm-up runs (JIT compile included) are not
    timed; latency is wall-clock min/median over reps.
    """
    if kind not in ("spvmm", "vmmsp", "dense"):
        raise ValueError(f"unknown kernel kind {kind!r}")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    w_kn = rng.standard_normal((k_dim, n_dim), dtype=np.float32)
    x = rng.standard_normal(k_dim, dtype=np.float32)
    if kind in ("spvmm", "dense"):
        zeros = rng.choice(k_dim, size=math.floor(sparsity * k_dim), replace=False)
        x[zeros] = 0.0
    if kind == "spvmm":
        w = pre_transpose(w_kn)
        run = lambda: spvmm(x, w, cfg)
    elif kind == "vmmsp":
        mask = rng.standard_normal(n_dim, dtype=np.float32)
        zeros = rng.choice(n_dim, size=math.floor(sparsity * n_dim), replace=False)
        mask[zeros] = 0.0
        w_nk = np.ascontiguousarray(w_kn.T)
        run = lambda: vmmsp(x, w_nk, mask, cfg)
    else:
        run = lambda: dense_vmm(x, w_kn)
    for _ in range(warmup):
        y = run()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        y = run()
        times.append(time.perf_counter_ns() - t0)
    return BenchRecord(
        kernel=kind,
        k_dim=k_dim,
        n_dim=n_dim,
        sparsity=float(sparsity),
        block_size=cfg.block_size,
        threads=cfg.effective_threads,
        reps=reps,
        min_ns=min(times),
        median_ns=int(statistics.median(times)),
        checksum=float(np.sum(y, dtype=np.float64)),
    )
