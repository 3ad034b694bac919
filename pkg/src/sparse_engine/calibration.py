"""Threshold calibration from sampled activation traces.

Channel-wise thresholds for the gated-MLP path: per-channel importance is
estimated as mean-|up| times |gate|, the scores are pooled per layer into an
empirical CDF, and the score quantile at sparsity level k is divided back by
each channel's mean-|up| to give per-channel gate thresholds. Attention sites
use a single tensor-wide magnitude threshold from the same quantile
convention.

Statistics (means, pooled scores, quantiles) are computed in float64;
thresholds are rounded to float32 at the end. The quantile is an observed
float32 score, so in the degenerate case where every channel has the same
mean-|up| the rounded channel threshold collapses bit-exactly to the
tensor-wide threshold of the gate trace.

ThresholdSet JSON schema (version 1):

    {"version": 1, "mode": "<mode>", "k": <float>,
     "ffn":  [[t_0, t_1, ... | null], ...]        # one array per layer;
                                                  # null = channel always pruned
     "attn": [{"t_q": <float>?, "t_i": <float>?, "t_o": <float>}, ...]}

Modes: dense, cats, cwt, cwt_full_attn, cwt_selective_attn. dense stores
explicit zeros; cats/cwt carry no attention entries; selective stores
t_q/t_o, full stores t_i/t_o.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor_core import empirical_quantile

MODES = ("dense", "cats", "cwt", "cwt_full_attn", "cwt_selective_attn")
FFN_SPARSE_MODES = ("cats", "cwt", "cwt_full_attn", "cwt_selective_attn")
THRESHOLDS_VERSION = 1


class Site(enum.IntEnum):
    """Trace collection sites; values are the on-disk u8 encoding."""

    FFN_GATE = 0          # post-activation gate values sigma(x W_gate)
    FFN_UP = 1            # up-projection values x W_up
    ATTN_QUERY_INPUT = 2  # normalized block input entering q/k/v projections
    ATTN_OUTPUT_INPUT = 3  # attention head outputs entering the o projection


@dataclass(frozen=True)
class ActivationTrace:
    """Sampled activation rows for one (layer, site)."""

    layer_index: int
    site: Site
    rows: np.ndarray  # [n_samples, dim] float32

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValueError(f"trace rows must be [n_samples >= 1, dim >= 1], got {rows.shape}")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "site", Site(self.site))

    @property
    def n_samples(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean absolute up-projection value."""

    mean_abs_up: np.ndarray  # float64, >= 0

    @property
    def dim(self) -> int:
        return self.mean_abs_up.shape[0]


def channel_stats(up_trace: ActivationTrace) -> ChannelStats:
    if up_trace.site != Site.FFN_UP:
        raise ValueError(f"channel_stats needs an ffn_up trace, got {up_trace.site.name}")
    mu = np.mean(np.abs(up_trace.rows.astype(np.float64)), axis=0)
    return ChannelStats(mu)


def estimated_scores(gate_trace: ActivationTrace, stats: ChannelStats) -> np.ndarray:
    """Pooled importance-score multiset {mu_i * |gate_ij|} over all samples and channels."""
    if gate_trace.site != Site.FFN_GATE:
        raise ValueError(f"estimated_scores needs an ffn_gate trace, got {gate_trace.site.name}")
    if gate_trace.dim != stats.dim:
        raise ValueError(f"dimension mismatch: trace dim {gate_trace.dim}, stats dim {stats.dim}")
    scores = stats.mean_abs_up[None, :] * np.abs(gate_trace.rows.astype(np.float64))
    return scores.ravel()


@dataclass(frozen=True)
class ChannelThresholds:
    """Per-channel gate thresholds; flagged channels are statically pruned."""

    t: np.ndarray             # float32, >= 0; 0.0 where flagged
    always_prune: np.ndarray  # bool

    @property
    def dim(self) -> int:
        return self.t.shape[0]


def channel_thresholds(scores: np.ndarray, stats: ChannelStats, k: float) -> ChannelThresholds:
    """t_i = (score quantile at k) / mu_i; channels with mu_i == 0 are always-prune."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("channel_thresholds needs a non-empty score pool")
    big_t = empirical_quantile(scores, k)
    mu = stats.mean_abs_up
    flagged = mu == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(flagged, 0.0, big_t / mu)
    return ChannelThresholds(t.astype(np.float32), flagged)


def tensor_threshold(input_trace: ActivationTrace, k: float) -> float:
    """Single magnitude threshold: quantile of pooled |x| at sparsity level k."""
    return float(empirical_quantile(np.abs(input_trace.rows).ravel(), k))


def fraction_pruned(rows: np.ndarray, t, always_prune=None) -> float:
    """Fraction of elements a threshold prunes on a set of rows.

    t may be a scalar (tensor-wide) or a per-channel array. Elements that are
    already exactly zero count as pruned.
    """
    rows = np.asarray(rows, dtype=np.float32)
    pruned = np.abs(rows) <= np.asarray(t, dtype=np.float32)
    if always_prune is not None:
        pruned |= np.asarray(always_prune, dtype=bool)
    return float(np.mean(pruned))


@dataclass(frozen=True)
class AttnThresholds:
    """Attention-site thresholds: t_q/t_o (selective) or t_i/t_o (full)."""

    t_o: float
    t_q: Optional[float] = None
    t_i: Optional[float] = None


@dataclass(frozen=True)
class ThresholdSet:
    mode: str
    k: float
    ffn: tuple  # ChannelThresholds per layer
    attn: tuple  # AttnThresholds per layer; empty when attention is dense

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.k <= 1.0:
            raise ValueError(f"k must be in [0, 1], got {self.k}")

    def to_json_dict(self) -> dict:
        ffn = [
            [None if f else float(v) for v, f in zip(ct.t.tolist(), ct.always_prune.tolist())]
            for ct in self.ffn
        ]
        attn = []
        for at in self.attn:
            entry = {}
            if at.t_q is not None:
                entry["t_q"] = float(at.t_q)
            if at.t_i is not None:
                entry["t_i"] = float(at.t_i)
            entry["t_o"] = float(at.t_o)
            attn.append(entry)
        return {
            "version": THRESHOLDS_VERSION,
            "mode": self.mode,
            "k": float(self.k),
            "ffn": ffn,
            "attn": attn,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ThresholdSet":
        if not isinstance(doc, dict) or doc.get("version") != THRESHOLDS_VERSION:
            raise ValueError(f"unsupported thresholds document version: {doc.get('version')!r}")
        ffn = []
        for layer in doc["ffn"]:
            vals = np.array([0.0 if v is None else v for v in layer], dtype=np.float32)
            flags = np.array([v is None for v in layer], dtype=bool)
            if vals.size and (np.any(~np.isfinite(vals)) or np.any(vals < 0)):
                raise ValueError("ffn thresholds must be finite and >= 0")
            ffn.append(ChannelThresholds(vals, flags))
        attn = []
        for entry in doc.get("attn", []):
            attn.append(
                AttnThresholds(
                    t_o=float(entry["t_o"]),
                    t_q=float(entry["t_q"]) if "t_q" in entry else None,
                    t_i=float(entry["t_i"]) if "t_i" in entry else None,
                )
            )
        return cls(mode=doc["mode"], k=float(doc["k"]), ffn=tuple(ffn), attn=tuple(attn))

    @classmethod
    def load(cls, path) -> "ThresholdSet":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def calibrate(model, inputs, k: float, mode: str, n_samples: Optional[int] = None) -> ThresholdSet:
    """Run dense forward passes over calibration inputs and derive all thresholds.

    inputs is anything collect_traces accepts: a 1-D array of token ids, a
    batch of independent token segments (2-D array or sequence of 1-D arrays,
    the preferred protocol when attention sites are thresholded), or a
    [n, d_model] float32 matrix of hidden states fed in place of embeddings.
    n_samples caps the rows used per site (default: all positions the inputs
    yield). Deterministic given model + inputs + k + mode.
    """
    from .model import collect_traces  # deferred: model imports this module

    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"k must be in [0, 1], got {k}")

    n_layers = model.config.n_layers
    d_ff = model.config.d_ff
    if mode == "dense":
        ffn = tuple(
            ChannelThresholds(np.zeros(d_ff, dtype=np.float32), np.zeros(d_ff, dtype=bool))
            for _ in range(n_layers)
        )
        attn = tuple(AttnThresholds(t_o=0.0, t_q=0.0) for _ in range(n_layers))
        return ThresholdSet(mode=mode, k=k, ffn=ffn, attn=attn)

    need_attn = mode in ("cwt_full_attn", "cwt_selective_attn")
    sites = [Site.FFN_GATE, Site.FFN_UP]
    if need_attn:
        sites += [Site.ATTN_QUERY_INPUT, Site.ATTN_OUTPUT_INPUT]
    traces = collect_traces(model, inputs, sites=sites, n_samples=n_samples)
    return thresholds_from_traces(traces, k, mode, n_layers, d_ff)


def thresholds_from_traces(traces: dict, k: float, mode: str, n_layers: int, d_ff: int) -> ThresholdSet:
    """Derive a ThresholdSet from already-collected traces; see calibrate."""
    if mode not in FFN_SPARSE_MODES:
        raise ValueError(f"mode {mode!r} derives no thresholds from traces")
    need_attn = mode in ("cwt_full_attn", "cwt_selective_attn")
    ffn = []
    attn = []
    for layer in range(n_layers):
        gate = traces[(layer, Site.FFN_GATE)]
        if mode == "cats":
            ts = np.float32(tensor_threshold(gate, k))
            ffn.append(ChannelThresholds(np.full(d_ff, ts, dtype=np.float32), np.zeros(d_ff, dtype=bool)))
        else:
            stats = channel_stats(traces[(layer, Site.FFN_UP)])
            scores = estimated_scores(gate, stats)
            ffn.append(channel_thresholds(scores, stats, k))
        if need_attn:
            t_in = tensor_threshold(traces[(layer, Site.ATTN_QUERY_INPUT)], k)
            t_o = tensor_threshold(traces[(layer, Site.ATTN_OUTPUT_INPUT)], k)
            if mode == "cwt_full_attn":
                attn.append(AttnThresholds(t_o=t_o, t_i=t_in))
            else:
                attn.append(AttnThresholds(t_o=t_o, t_q=t_in))
    return ThresholdSet(mode=mode, k=k, ffn=tuple(ffn), attn=tuple(attn))
