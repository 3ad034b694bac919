"""Why per-channel thresholds: one tensor-wide cutoff misprices channels.

The FFN pruning error of dropping channel i is |a_up_i * a_gate_i|, so a gate
magnitude that is harmless on a small-|a_up| channel can be expensive on a
large one. A single threshold on |a_gate| ignores that; dividing one pooled
score cutoff by each channel's mean |a_up| prices it in. This script builds a
model whose up-projection rows span two orders of magnitude in scale and shows
what that does to thresholds, realized sparsity, and error.

Run: python3 demos/01_channel_thresholds.py
"""

import numpy as np

import sparse_engine as se

K = 0.5

config = se.ModelConfig(
    n_layers=2, d_model=64, d_ff=128, n_heads=4, n_kv_heads=2,
    vocab_size=211, max_seq_len=192, seed=42,
)
model = se.init_model(config)

segments = se.make_rng(100).integers(0, config.vocab_size, size=(16, 16), dtype=np.int64)
holdout = se.make_rng(101).integers(0, config.vocab_size, size=(16, 16), dtype=np.int64)
traces = se.collect_traces(model, segments, sites=(se.Site.FFN_GATE, se.Site.FFN_UP))
ho_traces = se.collect_traces(model, holdout, sites=(se.Site.FFN_GATE, se.Site.FFN_UP))

stats = se.channel_stats(traces[(0, se.Site.FFN_UP)])
mu = stats.mean_abs_up
print(f"layer 0 mean |a_up| per channel: min {mu.min():.4f}  max {mu.max():.4f}  "
      f"spread {mu.max() / mu.min():.0f}x")

# one pooled-quantile cutoff, divided per channel
scores = se.estimated_scores(traces[(0, se.Site.FFN_GATE)], stats)
ct = se.channel_thresholds(scores, stats, K)
tensor_t = se.tensor_threshold(traces[(0, se.Site.FFN_GATE)], K)
print(f"tensor-wide |a_gate| threshold at k={K}: {tensor_t:.4f}")
print(f"channel-wise thresholds:  min {ct.t.min():.4f}  max {ct.t.max():.4f}")
print("  (large-|a_up| channels get small thresholds: they are expensive to drop)")

# both calibrations hit the target fraction on held-out tokens...
ho_gate = ho_traces[(0, se.Site.FFN_GATE)].rows
print(f"\nrealized held-out sparsity at k={K}:")
print(f"  tensor-wide : {se.fraction_pruned(ho_gate, tensor_t):.4f}")
print(f"  channel-wise: {se.fraction_pruned(ho_gate, ct.t, ct.always_prune):.4f}")

# ...but they prune different channels, and the error gap shows it
ho_up = ho_traces[(0, se.Site.FFN_UP)].rows


def mean_error(prune_fn):
    errs = [se.ffn_objective(u, g, prune_fn(g)) for u, g in zip(ho_up, ho_gate)]
    return float(np.mean(errs))


err_cats = mean_error(lambda g: np.flatnonzero(np.abs(g) <= tensor_t))
err_cwt = mean_error(lambda g: np.flatnonzero((np.abs(g) <= ct.t) | ct.always_prune))
print(f"\nmean held-out pruning error (layer 0):")
print(f"  tensor-wide : {err_cats:.5f}")
print(f"  channel-wise: {err_cwt:.5f}  ({err_cwt / err_cats:.1%} of tensor-wide)")
