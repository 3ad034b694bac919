"""Toy decoder-only transformer with a sparsity-exploiting decode path.

Architecture: token embedding, a stack of pre-norm residual blocks (RMS
normalization without learned gain, grouped-query attention, gated MLP), a
final RMS norm, and a linear head. No positional encoding: position
information enters only through the causal cache structure, which is all the
sparsification machinery needs. Batch size is 1 and decoding is greedy
(argmax, lowest index on ties).

Sparse execution: the gate projection always runs dense; its thresholded
output becomes the vmmsp mask for the up projection (mask values scale, so
the fused product lands in one pass) and the zeros it leaves feed spvmm for
the down projection. Attention modes sparsify projection inputs with
tensor-wide thresholds: "selective" thresholds only the q-projection input
and the o-projection input (cached k/v stay exact), "full" shares one
threshold across the q/k/v inputs. Prefill always runs dense; thresholded
compute starts at the last prompt token.

Two engines share every masking decision: "kernels" dispatches to the
sparsity-exploiting kernels, "masked" applies the identical masks through
dense matmuls. Their outputs agree to kernel tolerance, which is the
correctness check for the fast path.

File formats (both little-endian, fixed headers then raw float32):

- checkpoint: magic "TGSM", u32 version, u32 n_layers/d_model/d_ff/n_heads/
  n_kv_heads/vocab_size/max_seq_len, u64 seed, then weights in order:
  embedding [vocab, d_model]; per layer wq, wk, wv, wo, w_gate, w_up, w_down;
  head [vocab, d_model]. Projections are stored [d_out, d_in] row-major.
- trace: magic "ACTV", u32 version, u32 layer_index, u8 site, u32 n_samples,
  u32 dim, then the rows row-major.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .calibration import ActivationTrace, AttnThresholds, ChannelThresholds, Site, ThresholdSet
from .kernels import KernelConfig, TransposedWeight, pre_transpose, spvmm, vmmsp
from .sparsify import cats_apply, cwt_apply
from .tensor_core import as_vector, dense_vmm, make_rng, silu

CHECKPOINT_MAGIC = b"TGSM"
CHECKPOINT_VERSION = 1
TRACE_MAGIC = b"ACTV"
TRACE_VERSION = 1
RMS_EPS = 1e-5


class EngineError(Exception):
    """Base for errors with a defined CLI exit code."""


class FileFormatError(EngineError):
    """Unreadable or structurally invalid input file (CLI exit 2)."""


class SemanticError(EngineError):
    """Well-formed inputs that do not fit together (CLI exit 3)."""


class InvariantError(EngineError):
    """Internal consistency violation (CLI exit 4)."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    n_kv_heads: int
    vocab_size: int
    max_seq_len: int
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_ff", "n_heads", "n_kv_heads", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError(f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim


DEFAULT_CONFIG = ModelConfig(
    n_layers=4,
    d_model=1024,
    d_ff=4096,
    n_heads=16,
    n_kv_heads=4,
    vocab_size=4096,
    max_seq_len=1024,
)


@dataclass
class LayerWeights:
    """One block's projections, each stored [d_out, d_in] row-major."""

    wq: np.ndarray      # [d_model, d_model]
    wk: np.ndarray      # [kv_dim, d_model]
    wv: np.ndarray      # [kv_dim, d_model]
    wo: np.ndarray      # [d_model, d_model]
    w_gate: np.ndarray  # [d_ff, d_model]
    w_up: np.ndarray    # [d_ff, d_model]
    w_down: np.ndarray  # [d_model, d_ff]


@dataclass
class ToyModel:
    config: ModelConfig
    embedding: np.ndarray  # [vocab_size, d_model]
    layers: tuple
    head: np.ndarray       # [vocab_size, d_model]


@dataclass(frozen=True)
class PreparedLayer:
    """Kernel-ready weights: [K, N] transposes for spvmm, stored layout for vmmsp."""

    wq_t: TransposedWeight
    wk_t: TransposedWeight
    wv_t: TransposedWeight
    wo_t: TransposedWeight
    w_down_t: TransposedWeight


def prepare_model(model: ToyModel) -> tuple:
    return tuple(
        PreparedLayer(
            wq_t=pre_transpose(l.wq.T),
            wk_t=pre_transpose(l.wk.T),
            wv_t=pre_transpose(l.wv.T),
            wo_t=pre_transpose(l.wo.T),
            w_down_t=pre_transpose(l.w_down.T),
        )
        for l in model.layers
    )


def init_model(config: ModelConfig, up_channels: str = "heterogeneous") -> ToyModel:
    """Gaussian init scaled 1/sqrt(d_in), deterministic in config.seed.

    up_channels controls the per-channel magnitude profile of the up
    projection, the quantity channel statistics respond to:

    - "heterogeneous": rows scaled log-uniformly over [0.1, 10], so channel
      mean magnitudes spread two decades.
    - "homogeneous": every row is a shared Gaussian row times a random sign,
      so per-channel mean magnitudes are exactly equal and channel-wise
      thresholds collapse to a tensor-wide one.

    Draw order (embedding; per layer q, k, v, o, gate, up, up profile; head)
    is part of the format: equal seeds give bit-identical weights.
    """
    if up_channels not in ("heterogeneous", "homogeneous"):
        raise ValueError(f"unknown up_channels {up_channels!r}")
    c = config
    rng = make_rng(c.seed)

    def draw(d_out, d_in):
        scale = np.float32(1.0 / math.sqrt(d_in))
        return rng.standard_normal((d_out, d_in), dtype=np.float32) * scale

    embedding = draw(c.vocab_size, c.d_model)
    layers = []
    for _ in range(c.n_layers):
        wq = draw(c.d_model, c.d_model)
        wk = draw(c.kv_dim, c.d_model)
        wv = draw(c.kv_dim, c.d_model)
        wo = draw(c.d_model, c.d_model)
        w_gate = draw(c.d_ff, c.d_model)
        w_up = draw(c.d_ff, c.d_model)
        if up_channels == "heterogeneous":
            scales = np.exp(rng.uniform(math.log(0.1), math.log(10.0), size=c.d_ff)).astype(np.float32)
            w_up = np.ascontiguousarray(w_up * scales[:, None])
        else:
            signs = np.where(rng.random(c.d_ff) < 0.5, np.float32(-1.0), np.float32(1.0))
            w_up = np.ascontiguousarray(signs[:, None] * w_up[0][None, :])
        w_down = draw(c.d_model, c.d_ff)
        layers.append(LayerWeights(wq, wk, wv, wo, w_gate, w_up, w_down))
    head = draw(c.vocab_size, c.d_model)
    return ToyModel(config=c, embedding=embedding, layers=tuple(layers), head=head)


class KvCache:
    """Append-only per-layer key/value store, [n_kv_heads, seq, head_dim]."""

    def __init__(self, n_kv_heads: int, max_len: int, head_dim: int):
        self.k = np.zeros((n_kv_heads, max_len, head_dim), dtype=np.float32)
        self.v = np.zeros((n_kv_heads, max_len, head_dim), dtype=np.float32)
        self.length = 0

    def append(self, k_t: np.ndarray, v_t: np.ndarray) -> None:
        if self.length >= self.k.shape[1]:
            raise InvariantError(f"kv cache overflow: capacity {self.k.shape[1]}")
        self.k[:, self.length, :] = k_t
        self.v[:, self.length, :] = v_t
        self.length += 1

    def keys(self) -> np.ndarray:
        return self.k[:, : self.length, :]

    def values(self) -> np.ndarray:
        return self.v[:, : self.length, :]


def rms_norm(x: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    """x / sqrt(mean(x^2) + eps); no learned gain. Mean in float64."""
    x = as_vector(x, "x")
    ms = float(np.mean(np.square(x.astype(np.float64))))
    return x * np.float32(1.0 / math.sqrt(ms + eps))


def _resolve_cfg(cfg: Optional[KernelConfig], n_out: int) -> KernelConfig:
    # Default: one streaming block, rows read page-sequentially. Explicit cfg wins.
    if cfg is not None:
        return cfg
    return KernelConfig(block_size=n_out, thread_count=1)


def _sparse_proj(x_masked, wt: TransposedWeight, w_stored, cfg, engine):
    if engine == "kernels":
        return spvmm(x_masked, wt, _resolve_cfg(cfg, wt.n_out))
    return dense_vmm(x_masked, w_stored.T)


def ffn_dense(x, layer: LayerWeights, tap=None, layer_index: int = 0) -> np.ndarray:
    """Gated MLP: (silu(x W_gate) . (x W_up)) W_down, all dense."""
    a_gate = silu(dense_vmm(x, layer.w_gate.T))
    a_up = dense_vmm(x, layer.w_up.T)
    if tap is not None:
        tap(layer_index, Site.FFN_GATE, a_gate)
        tap(layer_index, Site.FFN_UP, a_up)
    return dense_vmm(a_gate * a_up, layer.w_down.T)


def ffn_sparse(
    x,
    layer: LayerWeights,
    thresholds: ChannelThresholds,
    cfg: Optional[KernelConfig] = None,
    engine: str = "kernels",
    prepared: Optional[PreparedLayer] = None,
):
    """Thresholded gated MLP; returns (output, surviving channel count).

    The dense gate output is thresholded into the vmmsp mask, so the up
    projection computes only surviving rows and lands already multiplied by
    the gate. The down projection then skips the zeroed channels.
    """
    a_gate = silu(dense_vmm(x, layer.w_gate.T))
    masked = cwt_apply(a_gate, thresholds.t, thresholds.always_prune)
    if engine == "kernels":
        w_down_t = prepared.w_down_t if prepared is not None else pre_transpose(layer.w_down.T)
        h_in = vmmsp(x, layer.w_up, masked.values, _resolve_cfg(cfg, layer.w_up.shape[0]))
        out = spvmm(h_in, w_down_t, _resolve_cfg(cfg, w_down_t.n_out))
    else:
        h_in = masked.values * dense_vmm(x, layer.w_up.T)
        out = dense_vmm(h_in, layer.w_down.T)
    return out, masked.nnz


def attn_forward(
    x,
    layer: LayerWeights,
    cache: KvCache,
    config: ModelConfig,
    mode: str = "dense",
    thresholds: Optional[AttnThresholds] = None,
    cfg: Optional[KernelConfig] = None,
    engine: str = "kernels",
    prepared: Optional[PreparedLayer] = None,
    tap=None,
    layer_index: int = 0,
):
    """One token of grouped-query attention; returns (output, keep stats).

    x is the normalized block input. mode "selective" thresholds the
    q-projection input (k/v enter the cache exact) and the o-projection
    input; "full" shares one input threshold across q/k/v. Softmax runs in
    float32 with max subtraction.
    """
    x = as_vector(x, "x")
    if mode not in ("dense", "selective", "full"):
        raise ValueError(f"unknown attention mode {mode!r}")
    if mode != "dense" and thresholds is None:
        raise ValueError(f"attention mode {mode!r} needs thresholds")
    if tap is not None:
        tap(layer_index, Site.ATTN_QUERY_INPUT, x)
    if prepared is None and engine == "kernels" and mode != "dense":
        prepared = PreparedLayer(
            wq_t=pre_transpose(layer.wq.T),
            wk_t=pre_transpose(layer.wk.T),
            wv_t=pre_transpose(layer.wv.T),
            wo_t=pre_transpose(layer.wo.T),
            w_down_t=pre_transpose(layer.w_down.T),
        )
    stats = {}
    if mode == "dense":
        q = dense_vmm(x, layer.wq.T)
        k_t = dense_vmm(x, layer.wk.T)
        v_t = dense_vmm(x, layer.wv.T)
    elif mode == "selective":
        mq = cats_apply(x, thresholds.t_q)
        stats["attn_q_in"] = (mq.nnz, x.shape[0])
        q = _sparse_proj(mq.values, prepared.wq_t if prepared else None, layer.wq, cfg, engine)
        k_t = dense_vmm(x, layer.wk.T)
        v_t = dense_vmm(x, layer.wv.T)
    else:
        mi = cats_apply(x, thresholds.t_i)
        stats["attn_qkv_in"] = (mi.nnz, x.shape[0])
        q = _sparse_proj(mi.values, prepared.wq_t if prepared else None, layer.wq, cfg, engine)
        k_t = _sparse_proj(mi.values, prepared.wk_t if prepared else None, layer.wk, cfg, engine)
        v_t = _sparse_proj(mi.values, prepared.wv_t if prepared else None, layer.wv, cfg, engine)

    hd = config.head_dim
    n_kv = config.n_kv_heads
    group = config.n_heads // n_kv
    cache.append(k_t.reshape(n_kv, hd), v_t.reshape(n_kv, hd))
    keys = cache.keys()      # [n_kv, L, hd]
    vals = cache.values()
    qg = q.reshape(n_kv, group, hd)
    scores = np.einsum("gqd,gld->gql", qg, keys) * np.float32(1.0 / math.sqrt(hd))
    scores -= scores.max(axis=2, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=2, keepdims=True)
    ctx = np.einsum("gql,gld->gqd", scores, vals).reshape(config.d_model)
    ctx = np.ascontiguousarray(ctx)

    if tap is not None:
        tap(layer_index, Site.ATTN_OUTPUT_INPUT, ctx)
    if mode == "dense":
        out = dense_vmm(ctx, layer.wo.T)
    else:
        mo = cats_apply(ctx, thresholds.t_o)
        stats["attn_o_in"] = (mo.nnz, ctx.shape[0])
        out = _sparse_proj(mo.values, prepared.wo_t if prepared else None, layer.wo, cfg, engine)
    return out, stats


def _block_modes(mode: str):
    # ThresholdSet mode -> (ffn sparse?, attention mode)
    return {
        "dense": (False, "dense"),
        "cats": (True, "dense"),
        "cwt": (True, "dense"),
        "cwt_full_attn": (True, "full"),
        "cwt_selective_attn": (True, "selective"),
    }[mode]


def block_forward(
    x,
    layer: LayerWeights,
    cache: KvCache,
    config: ModelConfig,
    mode: str = "dense",
    ffn_thresholds: Optional[ChannelThresholds] = None,
    attn_thresholds: Optional[AttnThresholds] = None,
    cfg: Optional[KernelConfig] = None,
    engine: str = "kernels",
    prepared: Optional[PreparedLayer] = None,
    tap=None,
    layer_index: int = 0,
):
    """Pre-norm residual block; returns (new hidden state, keep stats)."""
    ffn_is_sparse, attn_mode = _block_modes(mode)
    attn_out, stats = attn_forward(
        rms_norm(x), layer, cache, config,
        mode=attn_mode, thresholds=attn_thresholds, cfg=cfg, engine=engine,
        prepared=prepared, tap=tap, layer_index=layer_index,
    )
    h = x + attn_out
    f_in = rms_norm(h)
    if ffn_is_sparse:
        f_out, kept = ffn_sparse(f_in, layer, ffn_thresholds, cfg=cfg, engine=engine, prepared=prepared)
        stats["ffn_gate"] = (kept, config.d_ff)
    else:
        f_out = ffn_dense(f_in, layer, tap=tap, layer_index=layer_index)
    return h + f_out, stats


@dataclass
class DecodeResult:
    mode: str
    engine: str
    prompt_len: int
    token_ids: np.ndarray    # prompt + generated, int64
    generated: np.ndarray    # int64 [gen_len]
    step_ns: np.ndarray      # int64 [gen_len], thresholded-path steps only
    checksum: float          # float64 sum of final-norm hidden states over steps
    keep_counts: dict        # site -> int64 [n_layers, 2] (kept, total)
    logits: Optional[np.ndarray] = None  # float32 [gen_len, vocab] when collected

    @property
    def total_ns(self) -> int:
        return int(self.step_ns.sum())

    @property
    def tokens_per_second(self) -> float:
        return float(len(self.step_ns) / (self.total_ns / 1e9))

    def keep_fraction(self, site: str) -> float:
        kept, total = self.keep_counts[site].sum(axis=0)
        return float(kept / total)


def _check_thresholds(model: ToyModel, thresholds: ThresholdSet) -> None:
    c = model.config
    if len(thresholds.ffn) != c.n_layers:
        raise SemanticError(
            f"thresholds cover {len(thresholds.ffn)} layers, model has {c.n_layers}"
        )
    for ct in thresholds.ffn:
        if ct.dim != c.d_ff:
            raise SemanticError(f"ffn thresholds dim {ct.dim} != d_ff {c.d_ff}")
    ffn_is_sparse, attn_mode = _block_modes(thresholds.mode)
    if attn_mode != "dense":
        if len(thresholds.attn) != c.n_layers:
            raise SemanticError(
                f"attention thresholds cover {len(thresholds.attn)} layers, model has {c.n_layers}"
            )
        for at in thresholds.attn:
            if attn_mode == "selective" and at.t_q is None:
                raise SemanticError("selective attention mode needs t_q per layer")
            if attn_mode == "full" and at.t_i is None:
                raise SemanticError("full attention mode needs t_i per layer")


def decode(
    model: ToyModel,
    prompt_ids,
    gen_len: int,
    mode: str = "dense",
    thresholds: Optional[ThresholdSet] = None,
    cfg: Optional[KernelConfig] = None,
    engine: str = "kernels",
    teacher_ids=None,
    collect_logits: bool = False,
) -> DecodeResult:
    """Greedy decode: dense prefill over prompt[:-1], then gen_len timed steps.

    The thresholded path starts at the last prompt token, so every generated
    token and every timed step runs in the requested mode. teacher_ids, when
    given, replaces the fed-back argmax tokens (the argmax stream is still
    recorded), which pins two runs to one trajectory for output comparison.
    """
    c = model.config
    prompt = np.asarray(prompt_ids, dtype=np.int64)
    if prompt.ndim != 1 or prompt.size < 1:
        raise ValueError("prompt_ids must be a non-empty 1-D token sequence")
    if gen_len < 1:
        raise ValueError(f"gen_len must be >= 1, got {gen_len}")
    if engine not in ("kernels", "masked"):
        raise ValueError(f"unknown engine {engine!r}")
    if np.any(prompt < 0) or np.any(prompt >= c.vocab_size):
        raise SemanticError(f"prompt token out of range for vocab_size {c.vocab_size}")
    if prompt.size + gen_len > c.max_seq_len:
        raise SemanticError(
            f"sequence length {prompt.size + gen_len} exceeds max_seq_len {c.max_seq_len}"
        )
    if mode == "dense":
        thresholds = None
    else:
        if thresholds is None:
            raise SemanticError(f"mode {mode!r} needs a threshold set")
        if thresholds.mode != mode:
            raise SemanticError(f"threshold set is for mode {thresholds.mode!r}, run requested {mode!r}")
        _check_thresholds(model, thresholds)
    teacher = None
    if teacher_ids is not None:
        teacher = np.asarray(teacher_ids, dtype=np.int64)
        if teacher.size < gen_len - 1:
            raise ValueError(f"teacher_ids needs >= {gen_len - 1} tokens, got {teacher.size}")
        if np.any(teacher < 0) or np.any(teacher >= c.vocab_size):
            raise SemanticError(f"teacher token out of range for vocab_size {c.vocab_size}")

    prepared = prepare_model(model) if engine == "kernels" else (None,) * c.n_layers
    caches = [KvCache(c.n_kv_heads, c.max_seq_len, c.head_dim) for _ in range(c.n_layers)]

    for tok in prompt[:-1]:
        x = model.embedding[tok].copy()
        for li, layer in enumerate(model.layers):
            x, _ = block_forward(x, layer, caches[li], c, mode="dense",
                                 engine=engine, prepared=prepared[li], layer_index=li)

    keep_counts: dict = {}
    generated = np.empty(gen_len, dtype=np.int64)
    step_ns = np.empty(gen_len, dtype=np.int64)
    logits_out = np.empty((gen_len, c.vocab_size), dtype=np.float32) if collect_logits else None
    checksum = 0.0
    cur = int(prompt[-1])
    for step in range(gen_len):
        t0 = time.perf_counter_ns()
        x = model.embedding[cur].copy()
        for li, layer in enumerate(model.layers):
            ffn_t = thresholds.ffn[li] if thresholds is not None else None
            attn_t = thresholds.attn[li] if thresholds is not None and thresholds.attn else None
            x, stats = block_forward(
                x, layer, caches[li], c, mode=mode,
                ffn_thresholds=ffn_t, attn_thresholds=attn_t,
                cfg=cfg, engine=engine, prepared=prepared[li], layer_index=li,
            )
            for site, (kept, total) in stats.items():
                arr = keep_counts.setdefault(site, np.zeros((c.n_layers, 2), dtype=np.int64))
                arr[li, 0] += kept
                arr[li, 1] += total
        h = rms_norm(x)
        logits = dense_vmm(h, model.head.T)
        out_tok = int(np.argmax(logits))
        generated[step] = out_tok
        checksum += float(np.sum(h, dtype=np.float64))
        if collect_logits:
            logits_out[step] = logits
        step_ns[step] = time.perf_counter_ns() - t0
        cur = int(teacher[step]) if teacher is not None and step < gen_len - 1 else out_tok

    return DecodeResult(
        mode=mode,
        engine=engine,
        prompt_len=int(prompt.size),
        token_ids=np.concatenate([prompt, generated]),
        generated=generated,
        step_ns=step_ns,
        checksum=checksum,
        keep_counts=keep_counts,
        logits=logits_out,
    )


def collect_traces(model: ToyModel, inputs, sites=None, n_samples: Optional[int] = None) -> dict:
    """Dense forward over calibration inputs, recording activation rows.

    inputs takes three forms: a 1-D integer array of token ids (one stream,
    split into fresh segments only when the kv cache fills), a sequence of 1-D
    integer arrays or a 2-D integer array whose entries are independent
    segments each starting from an empty cache, or a [n, d_model] float32
    matrix fed in place of embedding rows. Independent segments are the right
    calibration protocol for the attention-context site: its magnitudes are a
    running average over the window, so one long stream yields a single
    autocorrelated sample path and unstable pooled quantiles. Returns
    {(layer_index, site): ActivationTrace} with up to n_samples rows each
    (all positions when n_samples is None).
    """
    c = model.config
    if sites is None:
        sites = (Site.FFN_GATE, Site.FFN_UP, Site.ATTN_QUERY_INPUT, Site.ATTN_OUTPUT_INPUT)
    wanted = frozenset(Site(s) for s in sites)

    def embed(ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
            raise ValueError("token segments must be 1-D integer arrays")
        if ids.size and (np.any(ids < 0) or np.any(ids >= c.vocab_size)):
            raise SemanticError(f"calibration token out of range for vocab_size {c.vocab_size}")
        return model.embedding[ids]

    if isinstance(inputs, (list, tuple)):
        segments = [embed(seg) for seg in inputs]
    else:
        arr = np.asarray(inputs)
        if arr.ndim == 1 and np.issubdtype(arr.dtype, np.integer):
            segments = [embed(arr)]
        elif arr.ndim == 2 and np.issubdtype(arr.dtype, np.integer):
            segments = [embed(row) for row in arr]
        elif arr.ndim == 2 and np.issubdtype(arr.dtype, np.floating):
            if arr.shape[1] != c.d_model:
                raise SemanticError(f"calibration rows have dim {arr.shape[1]}, model d_model is {c.d_model}")
            segments = [arr.astype(np.float32)]
        else:
            raise ValueError(
                "inputs must be token ids (1-D, 2-D, or a sequence of 1-D arrays)"
                " or a 2-D float activation matrix"
            )
    total = sum(seg.shape[0] for seg in segments)
    if total < 1:
        raise ValueError("calibration inputs are empty")

    rows: dict = {(li, s): [] for li in range(c.n_layers) for s in wanted}

    def tap(layer_index, site, row):
        if site in wanted:
            rows[(layer_index, site)].append(row.copy())

    budget = total if n_samples is None else min(n_samples, total)
    done = 0
    for xs in segments:
        if done >= budget:
            break
        caches = None
        for pos in range(xs.shape[0]):
            if done >= budget:
                break
            if caches is None or caches[0].length >= c.max_seq_len:
                caches = [KvCache(c.n_kv_heads, c.max_seq_len, c.head_dim) for _ in range(c.n_layers)]
            x = np.ascontiguousarray(xs[pos])
            for li, layer in enumerate(model.layers):
                x, _ = block_forward(x, layer, caches[li], c, mode="dense", tap=tap, layer_index=li)
            done += 1

    return {
        key: ActivationTrace(layer_index=key[0], site=key[1], rows=np.stack(r))
        for key, r in rows.items()
    }


def activated_params(model: ToyModel, thresholds: ThresholdSet, traces: Optional[dict] = None) -> dict:
    """Mean parameters touched per decoded token under a threshold set.

    Keep fractions come from re-applying the thresholds to held-out traces
    (exact zeros count as skipped, matching the kernels). Static structure is
    exact: the embedding row and the head are always fully read, the gate
    projection skips only always-pruned columns, and the up/down projections
    scale with the surviving gate fraction. traces may be omitted only in
    dense mode.
    """
    c = model.config
    ffn_is_sparse, attn_mode = _block_modes(thresholds.mode)
    dense_layer = (
        2 * c.d_model * c.d_model          # wq, wo
        + 2 * c.kv_dim * c.d_model         # wk, wv
        + 3 * c.d_ff * c.d_model           # gate, up, down
    )
    dense_total = c.d_model + c.vocab_size * c.d_model + c.n_layers * dense_layer
    if not ffn_is_sparse:
        return {
            "mode": thresholds.mode,
            "k": float(thresholds.k),
            "dense_params_per_token": dense_total,
            "activated_params_per_token": float(dense_total),
            "activated_fraction": 1.0,
            "per_layer": [float(dense_layer)] * c.n_layers,
        }
    if traces is None:
        raise SemanticError(f"mode {thresholds.mode!r} needs traces to estimate activated parameters")
    _check_thresholds(model, thresholds)

    def trace_for(li, site):
        try:
            return traces[(li, site)]
        except KeyError:
            raise SemanticError(f"missing trace for layer {li}, site {site.name}") from None

    from .calibration import fraction_pruned  # local: avoids a module-level name for one use

    per_layer = []
    total = float(c.d_model + c.vocab_size * c.d_model)
    for li in range(c.n_layers):
        ct = thresholds.ffn[li]
        gate_rows = trace_for(li, Site.FFN_GATE).rows
        keep_gate = 1.0 - fraction_pruned(gate_rows, ct.t, ct.always_prune)
        n_static = int(np.count_nonzero(ct.always_prune))
        layer_ap = (
            c.d_model * (c.d_ff - n_static)            # gate columns read
            + 2.0 * keep_gate * c.d_ff * c.d_model     # up rows + down rows
        )
        if attn_mode == "dense":
            layer_ap += 2 * c.d_model * c.d_model + 2 * c.kv_dim * c.d_model
        else:
            at = thresholds.attn[li]
            q_rows = trace_for(li, Site.ATTN_QUERY_INPUT).rows
            o_rows = trace_for(li, Site.ATTN_OUTPUT_INPUT).rows
            keep_o = 1.0 - fraction_pruned(o_rows, at.t_o)
            if attn_mode == "selective":
                keep_q = 1.0 - fraction_pruned(q_rows, at.t_q)
                layer_ap += keep_q * c.d_model * c.d_model + 2 * c.kv_dim * c.d_model
            else:
                keep_i = 1.0 - fraction_pruned(q_rows, at.t_i)
                layer_ap += keep_i * (c.d_model * c.d_model + 2 * c.kv_dim * c.d_model)
            layer_ap += keep_o * c.d_model * c.d_model
        per_layer.append(layer_ap)
        total += layer_ap
    return {
        "mode": thresholds.mode,
        "k": float(thresholds.k),
        "dense_params_per_token": dense_total,
        "activated_params_per_token": total,
        "activated_fraction": total / dense_total,
        "per_layer": per_layer,
    }


def site_projection_errors(model: ToyModel, traces: dict, thresholds: ThresholdSet) -> list:
    """Exact squared projection error per attention site, per layer.

    For each thresholded site the error is sum over trace rows of
    ||x W - x_hat W||^2 in float64, where x_hat zeroes entries with
    |x| <= t. Selective mode reports q and o; full mode reports q, k, v
    (shared input threshold) and o. Each dict carries a "total".
    """
    _, attn_mode = _block_modes(thresholds.mode)
    if attn_mode == "dense":
        raise SemanticError(f"mode {thresholds.mode!r} has no thresholded attention sites")
    _check_thresholds(model, thresholds)

    def err(rows: np.ndarray, t: float, w_stored: np.ndarray) -> float:
        keep = np.abs(rows) > np.float32(t)
        dropped = np.where(keep, np.float32(0.0), rows).astype(np.float64)
        # ||x W - x_hat W||^2 == ||(x - x_hat) W||^2 row by row
        d = dropped @ w_stored.T.astype(np.float64)
        return float(np.sum(d * d))

    out = []
    for li, layer in enumerate(model.layers):
        at = thresholds.attn[li]
        try:
            q_rows = traces[(li, Site.ATTN_QUERY_INPUT)].rows
            o_rows = traces[(li, Site.ATTN_OUTPUT_INPUT)].rows
        except KeyError:
            raise SemanticError(f"missing attention trace for layer {li}") from None
        entry = {"o": err(o_rows, at.t_o, layer.wo)}
        if attn_mode == "selective":
            entry["q"] = err(q_rows, at.t_q, layer.wq)
        else:
            entry["q"] = err(q_rows, at.t_i, layer.wq)
            entry["k"] = err(q_rows, at.t_i, layer.wk)
            entry["v"] = err(q_rows, at.t_i, layer.wv)
        entry["total"] = float(sum(entry.values()))
        out.append(entry)
    return out


def _pack_array(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_checkpoint(path, model: ToyModel) -> None:
    c = model.config
    with open(path, "wb") as fh:
        fh.write(struct.pack(
            "<4sI7IQ", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
            c.n_layers, c.d_model, c.d_ff, c.n_heads, c.n_kv_heads,
            c.vocab_size, c.max_seq_len, c.seed,
        ))
        fh.write(_pack_array(model.embedding))
        for l in model.layers:
            for w in (l.wq, l.wk, l.wv, l.wo, l.w_gate, l.w_up, l.w_down):
                fh.write(_pack_array(w))
        fh.write(_pack_array(model.head))


def _take_f32(buf: bytes, off: int, shape: tuple, path) -> tuple:
    count = int(np.prod(shape))
    nbytes = 4 * count
    if off + nbytes > len(buf):
        raise FileFormatError(f"{path}: truncated, expected {nbytes} more bytes at offset {off}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
    return np.ascontiguousarray(arr, dtype=np.float32), off + nbytes


def load_checkpoint(path) -> ToyModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    header = struct.calcsize("<4sI7IQ")
    if len(buf) < header:
        raise FileFormatError(f"{path}: shorter than the checkpoint header")
    magic, version, n_layers, d_model, d_ff, n_heads, n_kv_heads, vocab, max_seq, seed = struct.unpack_from(
        "<4sI7IQ", buf, 0
    )
    if magic != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = ModelConfig(
            n_layers=n_layers, d_model=d_model, d_ff=d_ff, n_heads=n_heads,
            n_kv_heads=n_kv_heads, vocab_size=vocab, max_seq_len=max_seq, seed=seed,
        )
    except ValueError as e:
        raise FileFormatError(f"{path}: invalid config: {e}") from None
    off = header
    embedding, off = _take_f32(buf, off, (vocab, d_model), path)
    layers = []
    kv_dim = config.kv_dim
    for _ in range(n_layers):
        wq, off = _take_f32(buf, off, (d_model, d_model), path)
        wk, off = _take_f32(buf, off, (kv_dim, d_model), path)
        wv, off = _take_f32(buf, off, (kv_dim, d_model), path)
        wo, off = _take_f32(buf, off, (d_model, d_model), path)
        w_gate, off = _take_f32(buf, off, (d_ff, d_model), path)
        w_up, off = _take_f32(buf, off, (d_ff, d_model), path)
        w_down, off = _take_f32(buf, off, (d_model, d_ff), path)
        layers.append(LayerWeights(wq, wk, wv, wo, w_gate, w_up, w_down))
    head, off = _take_f32(buf, off, (vocab, d_model), path)
    if off != len(buf):
        raise FileFormatError(f"{path}: {len(buf) - off} trailing bytes after weights")
    return ToyModel(config=config, embedding=embedding, layers=tuple(layers), head=head)


def save_trace(path, trace: ActivationTrace) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack(
            "<4sIIBII", TRACE_MAGIC, TRACE_VERSION,
            trace.layer_index, int(trace.site), trace.n_samples, trace.dim,
        ))
        fh.write(_pack_array(trace.rows))


def load_trace(path) -> ActivationTrace:
    with open(path, "rb") as fh:
        buf = fh.read()
    header = struct.calcsize("<4sIIBII")
    if len(buf) < header:
        raise FileFormatError(f"{path}: shorter than the trace header")
    magic, version, layer_index, site, n, dim = struct.unpack_from("<4sIIBII", buf, 0)
    if magic != TRACE_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}, expected {TRACE_MAGIC!r}")
    if version != TRACE_VERSION:
        raise FileFormatError(f"{path}: unsupported trace version {version}")
    try:
        site = Site(site)
    except ValueError:
        raise FileFormatError(f"{path}: unknown site code {site}") from None
    rows, off = _take_f32(buf, header, (n, dim), path)
    if off != len(buf):
        raise FileFormatError(f"{path}: {len(buf) - off} trailing bytes after rows")
    return ActivationTrace(layer_index=layer_index, site=site, rows=rows)
