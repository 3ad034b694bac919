"""Sparsifying attention: all four projection inputs, or just two.

Full sparsification thresholds the shared q/k/v input and the output-
projection input; selective sparsification thresholds only the q and output
inputs, leaving keys and values exact in the cache. At the same sparsity
level the two read nearly the same number of weights (k/v projections are
small under grouped-query attention), but full sparsification adds k/v
projection error on every cached token. This script prices both on the same
probe states.

Run: python3 demos/05_attention_ablation.py
"""

import numpy as np

import sparse_engine as se

K = 0.5

config = se.ModelConfig(
    n_layers=2, d_model=256, d_ff=1024, n_heads=8, n_kv_heads=2,
    vocab_size=512, max_seq_len=512, seed=1234,
)
model = se.init_model(config)
segments = se.make_rng(100).integers(0, config.vocab_size, size=(16, 16), dtype=np.int64)
holdout = se.collect_traces(
    model, se.make_rng(101).integers(0, config.vocab_size, size=(16, 16), dtype=np.int64))

full = se.calibrate(model, segments, k=K, mode="cwt_full_attn")
sel = se.calibrate(model, segments, k=K, mode="cwt_selective_attn")

print(f"per-layer attention projection errors on held-out states, k={K}:")
for li in range(config.n_layers):
    e_full = se.site_projection_errors(model, holdout, full)[li]
    e_sel = se.site_projection_errors(model, holdout, sel)[li]
    f_parts = "  ".join(f"{s}={e_full[s]:.1f}" for s in ("q", "k", "v", "o"))
    print(f"  layer {li} full     : {f_parts}  total={e_full['total']:.1f}")
    print(f"  layer {li} selective: q={e_sel['q']:.1f}  o={e_sel['o']:.1f}"
          f"  total={e_sel['total']:.1f}")

tot_full = sum(e["total"] for e in se.site_projection_errors(model, holdout, full))
tot_sel = sum(e["total"] for e in se.site_projection_errors(model, holdout, sel))
ap_full = se.activated_params(model, full, holdout)["activated_fraction"]
ap_sel = se.activated_params(model, sel, holdout)["activated_fraction"]
print(f"\nsummed error:      full {tot_full:.1f}  vs  selective {tot_sel:.1f} "
      f"({tot_full / tot_sel:.2f}x)")
print(f"activated params:  full {ap_full:.4f}  vs  selective {ap_sel:.4f} "
      f"(gap {abs(ap_full - ap_sel):.4f})")
print("\nselective drops the k/v error terms entirely for ~1.5 points of"
      "\nactivated parameters: the better trade at equal sparsity level.")
