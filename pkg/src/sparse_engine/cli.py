"""Command-line front end.

Reports go to stdout as JSON with sorted keys; progress logging goes to
stderr. Given equal seeds, every output byte is reproducible except latency
fields, which live under separate keys ("timing" in reports, the *_ns
columns in benchmark CSV) so consumers can strip them.

Exit codes: 0 success, 2 unreadable or malformed input file, 3 well-formed
inputs that do not fit together, 4 violated internal invariant.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .calibration import (
    MODES,
    Site,
    ThresholdSet,
    thresholds_from_traces,
)
from .kernels import (
    BenchRecord,
    KernelConfig,
    bench_kernel,
    streaming_block_size,
    write_bench_csv,
)
from .model import (
    DEFAULT_CONFIG,
    EngineError,
    FileFormatError,
    InvariantError,
    ModelConfig,
    SemanticError,
    collect_traces,
    decode,
    init_model,
    load_checkpoint,
    load_trace,
    save_checkpoint,
    save_trace,
)
from .oracle import optimal_ffn_pruneset
from .sparsify import ffn_objective
from .tensor_core import RNG_ALGORITHM, make_rng

log = logging.getLogger("sparse_engine")

MODE_FLAGS = {m.replace("_", "-"): m for m in MODES}
DEFAULT_SPARSITY = 0.5
DEFAULT_SAMPLES = 512
DEFAULT_PROMPT_LEN = 64
DEFAULT_GEN_LEN = 128
DEFAULT_REPS = 1


def _emit(doc: dict) -> None:
    json.dump(doc, sys.stdout, sort_keys=True, indent=2)
    sys.stdout.write("\n")


def _env_threads() -> int:
    raw = os.environ.get("SPARSE_ENGINE_THREADS", "")
    if not raw:
        return 0
    try:
        return max(int(raw), 0)
    except ValueError:
        return 0


def _load_model(path):
    log.info("loading checkpoint %s", path)
    return load_checkpoint(path)


def _load_thresholds(path) -> ThresholdSet:
    log.info("loading thresholds %s", path)
    try:
        return ThresholdSet.load(path)
    except (json.JSONDecodeError, ValueError, KeyError, TypeError) as e:
        raise FileFormatError(f"{path}: {e}") from None


def _mode_from_flag(flag: str) -> str:
    if flag not in MODE_FLAGS:
        raise SemanticError(f"unknown mode {flag!r}; expected one of {sorted(MODE_FLAGS)}")
    return MODE_FLAGS[flag]


def _kernel_config(args, n_hint: int):
    threads = args.threads if args.threads else (_env_threads() or 1)
    if args.block_size:
        return KernelConfig(block_size=args.block_size, thread_count=threads)
    if threads > 1:
        return KernelConfig(block_size=streaming_block_size(n_hint, threads), thread_count=threads)
    return None  # per-projection streaming default


def _config_dict(c: ModelConfig) -> dict:
    return {
        "n_layers": c.n_layers,
        "d_model": c.d_model,
        "d_ff": c.d_ff,
        "n_heads": c.n_heads,
        "n_kv_heads": c.n_kv_heads,
        "vocab_size": c.vocab_size,
        "max_seq_len": c.max_seq_len,
        "seed": c.seed,
    }


def cmd_gen_model(args) -> int:
    config = ModelConfig(
        n_layers=args.layers,
        d_model=args.d_model,
        d_ff=args.d_ff,
        n_heads=args.heads,
        n_kv_heads=args.kv_heads,
        vocab_size=args.vocab,
        max_seq_len=args.max_seq_len,
        seed=args.seed,
    )
    log.info("initializing %s model (seed %d)", args.up_channels, args.seed)
    model = init_model(config, up_channels=args.up_channels)
    save_checkpoint(args.out, model)
    _emit({
        "command": "gen-model",
        "path": str(args.out),
        "bytes": os.path.getsize(args.out),
        "config": _config_dict(config),
        "up_channels": args.up_channels,
        "rng_algorithm": RNG_ALGORITHM,
    })
    return 0


# Calibration streams are split into short independent segments: the
# attention-context site's magnitudes depend on the window length, and pooled
# quantiles from one long autocorrelated stream do not transfer across streams.
CALIB_SEGMENT_LEN = 16


def _calibration_tokens(config: ModelConfig, samples: int, seed: int) -> list:
    rng = make_rng(seed)
    flat = rng.integers(0, config.vocab_size, size=samples, dtype=np.int64)
    return [flat[i:i + CALIB_SEGMENT_LEN] for i in range(0, samples, CALIB_SEGMENT_LEN)]


def cmd_calibrate(args) -> int:
    model = _load_model(args.model)
    mode = _mode_from_flag(args.mode)
    if mode == "dense":
        raise SemanticError("dense mode has no thresholds to calibrate")
    tokens = _calibration_tokens(model.config, args.samples, args.seed)
    sites = [Site.FFN_GATE, Site.FFN_UP]
    if mode in ("cwt_full_attn", "cwt_selective_attn") or args.dump_traces:
        sites += [Site.ATTN_QUERY_INPUT, Site.ATTN_OUTPUT_INPUT]
    log.info("collecting %d calibration rows per site (%d sites)", args.samples, len(sites))
    traces = collect_traces(model, tokens, sites=sites)
    thresholds = thresholds_from_traces(
        traces, args.sparsity, mode, model.config.n_layers, model.config.d_ff
    )
    thresholds.save(args.out)
    dumped = None
    if args.dump_traces:
        out_dir = Path(args.dump_traces)
        out_dir.mkdir(parents=True, exist_ok=True)
        dumped = []
        for (li, site), trace in sorted(traces.items()):
            p = out_dir / f"trace_l{li}_{site.name.lower()}.actv"
            save_trace(p, trace)
            dumped.append(str(p))
    ffn_summary = [
        {
            "layer": li,
            "t_min": float(ct.t[~ct.always_prune].min()) if (~ct.always_prune).any() else None,
            "t_max": float(ct.t[~ct.always_prune].max()) if (~ct.always_prune).any() else None,
            "n_always_pruned": int(np.count_nonzero(ct.always_prune)),
        }
        for li, ct in enumerate(thresholds.ffn)
    ]
    attn_summary = [
        {k: v for k, v in (("t_q", at.t_q), ("t_i", at.t_i), ("t_o", at.t_o)) if v is not None}
        for at in thresholds.attn
    ]
    _emit({
        "command": "calibrate",
        "out": str(args.out),
        "mode": mode,
        "k": args.sparsity,
        "samples": args.samples,
        "seed": args.seed,
        "rng_algorithm": RNG_ALGORITHM,
        "ffn": ffn_summary,
        "attn": attn_summary,
        "dumped_traces": dumped,
    })
    return 0


def cmd_run(args) -> int:
    model = _load_model(args.model)
    thresholds = None
    if args.thresholds:
        thresholds = _load_thresholds(args.thresholds)
    if args.mode:
        mode = _mode_from_flag(args.mode)
    elif thresholds is not None:
        mode = thresholds.mode
    else:
        mode = "dense"
    if mode != "dense" and thresholds is None:
        raise SemanticError(f"mode {mode!r} needs --thresholds")
    rng = make_rng(args.seed)
    prompt = rng.integers(0, model.config.vocab_size, size=args.prompt_len, dtype=np.int64)
    cfg = _kernel_config(args, max(model.config.d_ff, model.config.d_model))
    log.info("decoding %d tokens after a %d-token prompt (mode %s)", args.gen_len, args.prompt_len, mode)
    result = decode(
        model, prompt, args.gen_len, mode=mode, thresholds=thresholds, cfg=cfg,
    )
    keep = {site: result.keep_fraction(site) for site in sorted(result.keep_counts)}
    _emit({
        "command": "run",
        "mode": mode,
        "engine": result.engine,
        "model": {"path": str(args.model), "config": _config_dict(model.config)},
        "thresholds": None if thresholds is None else {
            "path": str(args.thresholds), "mode": thresholds.mode, "k": float(thresholds.k),
        },
        "prompt_len": args.prompt_len,
        "gen_len": args.gen_len,
        "seed": args.seed,
        "rng_algorithm": RNG_ALGORITHM,
        "kernel_config": None if cfg is None else {
            "block_size": cfg.block_size, "threads": cfg.effective_threads,
        },
        "generated_tokens": result.generated.tolist(),
        "checksum": result.checksum,
        "keep_fractions": keep,
        "timing": {
            "total_ns": result.total_ns,
            "tokens_per_second": result.tokens_per_second,
            "step_ns_min": int(result.step_ns.min()),
            "step_ns_median": int(np.median(result.step_ns)),
        },
    })
    return 0


def _parse_dims(spec: str):
    try:
        k, n = spec.lower().split("x")
        return int(k), int(n)
    except ValueError:
        raise SemanticError(f"bad --dims value {spec!r}, expected KxN") from None


def _parse_float_list(spec: str):
    try:
        return [float(v) for v in spec.split(",") if v != ""]
    except ValueError:
        raise SemanticError(f"bad float list {spec!r}") from None


def cmd_bench_kernels(args) -> int:
    dims = [_parse_dims(d) for d in args.dims] or [(4096, 11008)]
    sparsities = _parse_float_list(args.sparsity)
    kinds = [k.strip() for k in args.kernels.split(",") if k.strip()]
    for kind in kinds:
        if kind not in ("spvmm", "vmmsp", "dense"):
            raise SemanticError(f"unknown kernel {kind!r}")
    threads = args.threads if args.threads else (_env_threads() or 1)
    records = []
    for k_dim, n_dim in dims:
        for sp in sparsities:
            if not 0.0 <= sp <= 1.0:
                raise SemanticError(f"sparsity {sp} out of [0, 1]")
            for kind in kinds:
                bs = args.block_size or streaming_block_size(n_dim, threads)
                cfg = KernelConfig(block_size=bs, thread_count=threads)
                log.info("bench %s K=%d N=%d sparsity=%g", kind, k_dim, n_dim, sp)
                records.append(bench_kernel(
                    kind, k_dim, n_dim, sp, args.reps, make_rng(args.seed), cfg,
                ))
    if args.csv:
        with open(args.csv, "w") as fh:
            write_bench_csv(records, fh)
    _emit({
        "command": "bench-kernels",
        "csv": str(args.csv) if args.csv else None,
        "seed": args.seed,
        "rng_algorithm": RNG_ALGORITHM,
        "records": [
            {
                "kernel": r.kernel, "K": r.k_dim, "N": r.n_dim,
                "sparsity": r.sparsity, "block_size": r.block_size,
                "threads": r.threads, "reps": r.reps,
                "min_ns": r.min_ns, "median_ns": r.median_ns,
                "checksum": r.checksum,
            }
            for r in records
        ],
    })
    return 0


def _load_trace_dir(path) -> dict:
    traces = {}
    files = sorted(Path(path).glob("*.actv"))
    if not files:
        raise FileFormatError(f"{path}: no .actv files")
    for p in files:
        t = load_trace(p)
        traces[(t.layer_index, t.site)] = t
    return traces


def cmd_compare_error(args) -> int:
    model = _load_model(args.model)
    c = model.config
    ks = _parse_float_list(args.sparsity)
    for k in ks:
        if not 0.0 <= k <= 1.0:
            raise SemanticError(f"sparsity {k} out of [0, 1]")
    ffn_sites = (Site.FFN_GATE, Site.FFN_UP)
    if args.trace_dir:
        calib = _load_trace_dir(args.trace_dir)
        missing = [
            (li, s.name) for li in range(c.n_layers) for s in ffn_sites if (li, s) not in calib
        ]
        if missing:
            raise SemanticError(f"{args.trace_dir}: missing traces for {missing}")
    else:
        tokens = _calibration_tokens(c, args.samples, args.seed)
        log.info("collecting %d calibration rows per site", args.samples)
        calib = collect_traces(model, tokens, sites=ffn_sites)
    eval_tokens = _calibration_tokens(c, args.samples, args.seed + 1)
    log.info("collecting %d held-out rows per site", args.samples)
    held_out = collect_traces(model, eval_tokens, sites=ffn_sites)

    rows = []
    for k in ks:
        cats_errs = []
        cwt_errs = []
        oracle_errs = []
        for li in range(c.n_layers):
            cats_set = thresholds_from_traces(calib, k, "cats", c.n_layers, c.d_ff).ffn[li]
            cwt_set = thresholds_from_traces(calib, k, "cwt", c.n_layers, c.d_ff).ffn[li]
            gate_rows = held_out[(li, Site.FFN_GATE)].rows
            up_rows = held_out[(li, Site.FFN_UP)].rows
            for g, u in zip(gate_rows, up_rows):
                p_cats = np.flatnonzero(np.abs(g) <= cats_set.t)
                p_cwt = np.flatnonzero((np.abs(g) <= cwt_set.t) | cwt_set.always_prune)
                cats_errs.append(ffn_objective(u, g, p_cats))
                cwt_errs.append(ffn_objective(u, g, p_cwt))
                p_opt = optimal_ffn_pruneset(u, g, count=len(p_cwt))
                oracle_errs.append(ffn_objective(u, g, p_opt))
        cats_mean = float(np.mean(cats_errs))
        cwt_mean = float(np.mean(cwt_errs))
        oracle_mean = float(np.mean(oracle_errs))
        rows.append({
            "k": k,
            "cats_mean": cats_mean,
            "cwt_mean": cwt_mean,
            "oracle_mean": oracle_mean,
            "cwt_vs_cats": cwt_mean / cats_mean if cats_mean > 0 else None,
        })
        log.info("k=%g cats=%.6g cwt=%.6g oracle=%.6g", k, cats_mean, cwt_mean, oracle_mean)
    _emit({
        "command": "compare-error",
        "model": {"path": str(args.model), "config": _config_dict(c)},
        "samples": args.samples,
        "seed": args.seed,
        "rng_algorithm": RNG_ALGORITHM,
        "trace_dir": str(args.trace_dir) if args.trace_dir else None,
        "rows": rows,
    })
    return 0


def cmd_gen_trace(args) -> int:
    model = _load_model(args.model)
    tokens = _calibration_tokens(model.config, args.samples, args.seed)
    log.info("collecting %d rows per site", args.samples)
    traces = collect_traces(model, tokens)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for (li, site), trace in sorted(traces.items()):
        p = out_dir / f"trace_l{li}_{site.name.lower()}.actv"
        save_trace(p, trace)
        written.append(str(p))
    _emit({
        "command": "gen-trace",
        "out": str(out_dir),
        "samples": args.samples,
        "seed": args.seed,
        "rng_algorithm": RNG_ALGORITHM,
        "files": written,
    })
    return 0


def _add_kernel_flags(p) -> None:
    p.add_argument("--block-size", type=int, default=0,
                   help="kernel output-block size (default: stream whole rows)")
    p.add_argument("--threads", type=int, default=0,
                   help="kernel threads (default: SPARSE_ENGINE_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparse-engine",
        description="Activation-sparsity toolkit: calibration, sparse decode, kernel benchmarks.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-model", help="initialize a model and write a checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=DEFAULT_CONFIG.n_layers)
    p.add_argument("--d-model", type=int, default=DEFAULT_CONFIG.d_model)
    p.add_argument("--d-ff", type=int, default=DEFAULT_CONFIG.d_ff)
    p.add_argument("--heads", type=int, default=DEFAULT_CONFIG.n_heads)
    p.add_argument("--kv-heads", type=int, default=DEFAULT_CONFIG.n_kv_heads)
    p.add_argument("--vocab", type=int, default=DEFAULT_CONFIG.vocab_size)
    p.add_argument("--max-seq-len", type=int, default=DEFAULT_CONFIG.max_seq_len)
    p.add_argument("--up-channels", choices=("heterogeneous", "homogeneous"), default="heterogeneous")
    p.set_defaults(fn=cmd_gen_model)

    p = sub.add_parser("calibrate", help="derive activation thresholds from a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", required=True, choices=sorted(MODE_FLAGS))
    p.add_argument("--sparsity", type=float, default=DEFAULT_SPARSITY)
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-traces", default="", help="also write per-site .actv trace files here")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("run", help="greedy decode with a threshold set")
    p.add_argument("--model", required=True)
    p.add_argument("--thresholds", default="")
    p.add_argument("--mode", choices=sorted(MODE_FLAGS), default="")
    p.add_argument("--prompt-len", type=int, default=DEFAULT_PROMPT_LEN)
    p.add_argument("--gen-len", type=int, default=DEFAULT_GEN_LEN)
    p.add_argument("--seed", type=int, default=0)
    _add_kernel_flags(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("bench-kernels", help="time kernels on synthetic inputs")
    p.add_argument("--dims", action="append", default=[], help="KxN, repeatable (default 4096x11008)")
    p.add_argument("--sparsity", default="0.0,0.5,0.75,0.9,0.99", help="comma-separated levels")
    p.add_argument("--kernels", default="dense,spvmm,vmmsp", help="comma-separated kinds")
    p.add_argument("--reps", type=int, default=DEFAULT_REPS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default="")
    _add_kernel_flags(p)
    p.set_defaults(fn=cmd_bench_kernels)

    p = sub.add_parser("compare-error", help="held-out pruning error: tensor-wide vs channel-wise vs oracle")
    p.add_argument("--model", required=True)
    p.add_argument("--sparsity", default="0.0,0.3,0.5,0.7,0.9", help="comma-separated levels")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace-dir", default="", help="reuse calibration traces dumped by calibrate")
    p.set_defaults(fn=cmd_compare_error)

    p = sub.add_parser("gen-trace", help="write activation traces for offline analysis")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_trace)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileFormatError as e:
        log.error("%s", e)
        return 2
    except OSError as e:
        log.error("%s", e)
        return 2
    except SemanticError as e:
        log.error("%s", e)
        return 3
    except InvariantError as e:
        log.error("invariant violated: %s", e)
        return 4
    except EngineError as e:
        log.error("%s", e)
        return 4


if __name__ == "__main__":
    sys.exit(main())
