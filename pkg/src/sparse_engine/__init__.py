"""CPU engine and analysis toolkit for activation-sparsified gated-MLP transformers.

Channel-wise and tensor-wide activation thresholding, sparsity-exploiting
vector-matrix kernels, a toy decoder with a KV cache to run them end to end,
and brute-force oracles that make the error claims testable.
"""

import os

# numba sizes its worker pool from NUMBA_NUM_THREADS at import time. On small
# containers that default is the core count, which would make multi-thread
# kernel configs unrunnable; raise the ceiling before numba is first imported.
# Requested thread counts are still clamped in kernels.KernelConfig.
if "NUMBA_NUM_THREADS" not in os.environ:
    os.environ["NUMBA_NUM_THREADS"] = str(max(os.cpu_count() or 1, 8))
# Pin the threading layer: the TBB probe warns on mismatched library versions.
if "NUMBA_THREADING_LAYER" not in os.environ:
    os.environ["NUMBA_THREADING_LAYER"] = "omp"

from .tensor_core import dense_vmm, empirical_quantile, make_rng, max_rel_diff, silu
from .sparsify import (
    MaskedVector,
    PruneSet,
    attn_objective_diag,
    attn_objective_exact,
    cats_apply,
    cwt_apply,
    ffn_objective,
)
from .calibration import (
    ActivationTrace,
    AttnThresholds,
    ChannelStats,
    ChannelThresholds,
    Site,
    ThresholdSet,
    calibrate,
    channel_stats,
    channel_thresholds,
    estimated_scores,
    fraction_pruned,
    tensor_threshold,
    thresholds_from_traces,
)
from .kernels import (
    BenchRecord,
    KernelConfig,
    TransposedWeight,
    bench_kernel,
    pre_transpose,
    spvmm,
    spvmm_counted,
    streaming_block_size,
    vmmsp,
    vmmsp_counted,
)
from .model import (
    DEFAULT_CONFIG,
    DecodeResult,
    EngineError,
    FileFormatError,
    InvariantError,
    KvCache,
    LayerWeights,
    ModelConfig,
    SemanticError,
    ToyModel,
    activated_params,
    attn_forward,
    block_forward,
    collect_traces,
    decode,
    ffn_dense,
    ffn_sparse,
    init_model,
    load_checkpoint,
    load_trace,
    prepare_model,
    rms_norm,
    save_checkpoint,
    save_trace,
    site_projection_errors,
)
from .oracle import (
    optimal_attn_pruneset,
    optimal_ffn_pruneset,
    reference_block_forward,
)

__version__ = "0.1.0"
