"""Command-line front end: gen, compress, stream, diagnose, audit, sweep.

Exit codes: 0 success, 1 validation/usage error, 2 internal invariant
breach. All outputs are deterministic given identical flags (no
timestamps, fixed seeds).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import baselines
from .errors import KvError, ValidationError
from .diagnostics import (
    COVERAGE_METRICS,
    attention_error_and_bounds,
    cdf_max_gap,
    coverage_cdf,
    logdet_audit,
    quantization_error,
)
from .kvcore import (
    BudgetConfig,
    CacheSnapshot,
    Granularity,
    OrthMode,
    SelectorConfig,
)
from .kvio import (
    SyntheticSpec,
    generate_synthetic,
    read_kvd,
    write_kvd,
    write_results,
)
from .selector import CandidatePool, cords_select, d2_select
from .streaming import (
    LayerSchedule,
    _select_old_indices,
    run_stream,
    split_into_blocks,
)

CONFIG_ENV = "KVCORESET_CONFIG"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(ValidationError):
    pass


def _load_config_defaults(path: str | None) -> dict:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _selector_config(args, defaults: dict) -> SelectorConfig:
    def pick(flag, key, fallback):
        v = getattr(args, flag, None)
        if v is not None:
            return v
        return defaults.get(key, fallback)

    return SelectorConfig(
        alpha=float(pick("alpha", "alpha", 0.25)),
        eta=float(pick("eta", "eta", 0.25)),
        lam=float(pick("lam", "lambda", 0.25)),
        eps0=float(pick("eps0", "eps0", 1e-6)),
        eps_logdet=float(pick("eps_logdet", "eps_logdet", 1e-6)),
        orth_mode=OrthMode(pick("orth_mode", "orth_mode", "maxcos")),
        granularity=Granularity(pick("granularity", "granularity", "token")),
        rng_seed=int(pick("seed", "rng_seed", 0)),
    )


def _add_selector_flags(p):
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--eps0", type=float, default=None)
    p.add_argument("--eps-logdet", dest="eps_logdet", type=float, default=None)
    p.add_argument("--orth-mode", dest="orth_mode",
                   choices=["exact", "maxcos"], default=None)
    p.add_argument("--granularity", choices=["token", "frame"], default=None)
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="kvcoreset", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=1,
                        help="worker hint; never changes outputs")
    parser.add_argument("--config", default=None,
                        help=f"JSON config path (default from ${CONFIG_ENV})")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic KVD cache")
    g.add_argument("--out", required=True)
    g.add_argument("--clusters", type=int, default=4)
    g.add_argument("--tokens-per-frame", type=int, default=4)
    g.add_argument("--frames", type=int, default=32)
    g.add_argument("--duplicate-rate", type=float, default=0.0)
    g.add_argument("--noise-scale", type=float, default=0.05)
    g.add_argument("--dk", type=int, default=8)
    g.add_argument("--dv", type=int, default=8)
    g.add_argument("--layers", type=int, default=1)
    g.add_argument("--gen-seed", type=int, default=0)

    c = sub.add_parser("compress", help="one-shot compression of a KVD cache")
    c.add_argument("--input", required=True)
    c.add_argument("--budget", type=int, required=True)
    c.add_argument(
        "--selector", default="cords",
        choices=["cords", "d2", "uniform", "random", "vnorm", "kmeans", "shortlist"],
    )
    c.add_argument("--out", required=True, help="output directory")
    _add_selector_flags(c)

    s = sub.add_parser("stream", help="replay a KVD cache as a block stream")
    s.add_argument("--input", required=True)
    s.add_argument("--budget", type=int, required=True)
    s.add_argument("--block-tokens", dest="block_tokens", type=int, default=None)
    s.add_argument("--recent-frac", dest="recent_frac", type=float, default=0.25)
    s.add_argument("--layers-mode", dest="layers_mode", default="bottom25",
                   help="bottom25 | all | comma-separated layer list")
    s.add_argument("--anchors", default=None,
                   help="comma-separated anchor layers (default: lowest active)")
    s.add_argument("--out", required=True, help="output directory")
    _add_selector_flags(s)

    d = sub.add_parser("diagnose", help="attention error vs. bounds + coverage CDF")
    d.add_argument("--input", required=True)
    d.add_argument("--budget", type=int, required=True)
    d.add_argument("--queries", type=int, default=8)
    d.add_argument("--out", required=True, help="output directory")
    _add_selector_flags(d)

    a = sub.add_parser("audit", help="log-det identity / submodularity audit")
    a.add_argument("--trials", type=int, default=1000)
    a.add_argument("--dim", type=int, default=8)
    a.add_argument("--eps", type=float, default=1e-4)
    a.add_argument("--audit-seed", type=int, default=0)
    a.add_argument("--out", default=None, help="optional results file")

    w = sub.add_parser("sweep", help="grid over alpha/eta/lambda/budget")
    w.add_argument("--input", required=True)
    w.add_argument("--alphas", default="0.25")
    w.add_argument("--etas", default="0.25")
    w.add_argument("--lambdas", default="0.25")
    w.add_argument("--budgets", required=True, help="comma-separated budgets")
    w.add_argument("--queries", type=int, default=4)
    w.add_argument("--out", required=True, help="output directory")
    _add_selector_flags(w)
    return parser


def _baseline_indices(selector, pool, b, config):
    if selector == "uniform":
        return baselines.uniform_select(pool.size, b)
    if selector == "random":
        return baselines.random_select(pool.size, b, config.rng_seed)
    if selector == "vnorm":
        return baselines.value_norm_topk(pool, b)
    if selector == "kmeans":
        return baselines.kmeans_representative(pool, b, config)
    if selector == "shortlist":
        return np.sort(baselines.greedy_shortlist(pool, b, alpha=config.alpha))
    raise ValidationError(f"unknown selector {selector}")


def cmd_gen(args, defaults) -> int:
    spec = SyntheticSpec(
        clusters=args.clusters,
        tokens_per_frame=args.tokens_per_frame,
        frames=args.frames,
        duplicate_rate=args.duplicate_rate,
        noise_scale=args.noise_scale,
        d_k=args.dk,
        d_v=args.dv,
        n_layers=args.layers,
        rng_seed=args.gen_seed,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_kvd(generate_synthetic(spec), args.out)
    return 0


def compress_snapshot(snapshot, budget, selector, config):
    """Select on layer 0 and reuse its indices on every layer (so the
    written snapshot stays token-aligned); returns (indices, snapshot)."""
    anchor = snapshot.layers[0]
    if not 1 <= budget <= anchor.n_tokens:
        raise ValidationError(f"budget {budget} outside [1, {anchor.n_tokens}]")
    if selector in ("cords", "d2"):
        sel_config = config if selector == "cords" else SelectorConfig(
            alpha=config.alpha, eta=config.eta, lam=0.0, eps0=config.eps0,
            eps_logdet=config.eps_logdet, orth_mode=config.orth_mode,
            granularity=config.granularity, rng_seed=config.rng_seed,
        )
        indices = _select_old_indices(anchor, anchor.n_tokens, budget, sel_config)
    else:
        indices = np.asarray(
            _baseline_indices(selector, CandidatePool.from_layer(anchor), budget, config),
            dtype=np.int64,
        )
    indices = np.sort(indices)
    compressed = CacheSnapshot([layer.take(indices) for layer in snapshot.layers])
    return indices, compressed


def cmd_compress(args, defaults) -> int:
    config = _selector_config(args, defaults)
    if args.budget < 1:
        raise ValidationError("budget must be positive")
    snapshot = read_kvd(args.input)
    indices, compressed = compress_snapshot(snapshot, args.budget, args.selector, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_kvd(compressed, out / "compressed.kvd")
    records = [
        {"layer": layer, "retained_indices": indices.tolist()}
        for layer in range(snapshot.n_layers)
    ]
    write_results(
        records,
        {
            "command": "compress",
            "selector": args.selector,
            "budget": args.budget,
            "config": config,
            "input_tokens": snapshot.n_tokens,
            "retained_tokens": int(len(indices)),
        },
        out / "results.txt",
    )
    return 0


def _parse_schedule(args, n_layers) -> LayerSchedule:
    mode = args.layers_mode
    if mode == "bottom25":
        active = set(range(max(1, int(0.25 * n_layers))))
    elif mode == "all":
        active = set(range(n_layers))
    else:
        active = {int(x) for x in mode.split(",") if x != ""}
        if not active or any(not 0 <= a < n_layers for a in active):
            raise ValidationError(f"bad layer list {mode!r}")
    if args.anchors:
        anchors = {int(x) for x in args.anchors.split(",") if x != ""}
    else:
        anchors = {min(active)}
    return LayerSchedule.from_anchors(n_layers, active, anchors)


def cmd_stream(args, defaults) -> int:
    config = _selector_config(args, defaults)
    snapshot = read_kvd(args.input)
    budget = BudgetConfig(
        total_budget=args.budget,
        recent_fraction=args.recent_frac,
        block_tokens=args.block_tokens,
    )
    schedule = _parse_schedule(args, snapshot.n_layers)
    state = run_stream(
        split_into_blocks(snapshot, budget.block_tokens), budget, schedule, config
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    final = state.persistent_snapshot()
    write_kvd(final, out / "stream.kvd")
    write_results(
        state.compression_log,
        {
            "command": "stream",
            "budget": {
                "total_budget": budget.total_budget,
                "recent_fraction": budget.recent_fraction,
                "block_tokens": budget.block_tokens,
            },
            "config": config,
            "active_layers": sorted(schedule.active_layers),
            "anchors": sorted(schedule.anchors),
            "firings": len(state.compression_log),
            "final_tokens": final.n_tokens,
        },
        out / "stream_log.txt",
    )
    return 0


def _gaussian_queries(cache, n_queries, seed) -> np.ndarray:
    """Standard Gaussian probes scaled to the mean key norm."""
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n_queries, cache.d_k))
    mean_norm = float(np.linalg.norm(cache.keys, axis=1).mean())
    scale = mean_norm / max(np.sqrt(cache.d_k), 1e-12)
    return q * scale


def cmd_diagnose(args, defaults) -> int:
    config = _selector_config(args, defaults)
    snapshot = read_kvd(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    anchor = snapshot.layers[0]
    indices, _ = compress_snapshot(snapshot, args.budget, "cords", config)
    queries = _gaussian_queries(anchor, args.queries, config.rng_seed)
    err_lines = ["query,error,bound_v,bound_dalpha"]
    violations = 0
    for qi, q in enumerate(queries):
        err, bv, bd = attention_error_and_bounds(q, anchor, indices, config.alpha)
        err_lines.append(f"{qi},{err:.12g},{bv:.12g},{bd:.12g}")
        if not (err <= bv + 1e-5 and bv <= bd + 1e-5):
            violations += 1
    (out / "error_bounds.csv").write_text("\n".join(err_lines) + "\n")

    cdf_lines = ["metric,layer,distance"]
    for metric in COVERAGE_METRICS:
        pooled = []
        for li, layer in enumerate(snapshot.layers):
            samples = coverage_cdf(layer, indices, metric)
            pooled.append(samples)
            cdf_lines.extend(f"{metric},{li},{s:.12g}" for s in samples)
        for s in np.sort(np.concatenate(pooled)):
            cdf_lines.append(f"{metric},pooled,{s:.12g}")
    (out / "coverage_cdf.csv").write_text("\n".join(cdf_lines) + "\n")

    write_results(
        [],
        {
            "command": "diagnose",
            "budget": args.budget,
            "config": config,
            "queries": args.queries,
            "bound_violations": violations,
            "quantization_error": quantization_error(anchor, indices, config.alpha),
        },
        out / "diagnose.txt",
    )
    return 0


class InvariantBreach(KvError):
    pass


def cmd_audit(args, defaults) -> int:
    report = logdet_audit(
        trials=args.trials, d=args.dim, eps=args.eps, rng_seed=args.audit_seed
    )
    meta = report.metadata
    # monotonicity flags are informational: the coverage objective can
    # legitimately decrease when a candidate is nearly inside the span
    # (marginal gain log(eps + residual) < 0), so they do not gate
    print(
        f"max identity deviation: {meta['max_identity_diff']:.3e}\n"
        f"submodularity violations: {meta['submodularity_violations']}\n"
        f"monotonicity flags: {meta['monotonicity_violations']}\n"
        f"exhaustive (1-1/e) guarantee: "
        f"{'ok' if meta['exhaustive_guarantee_ok'] else 'FAILED'}"
        f" (worst ratio {meta['worst_greedy_ratio']:.6f})"
    )
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_results(report.logdet_audit, meta, args.out)
    ok = (
        meta["max_identity_diff"] <= 1e-8
        and meta["submodularity_violations"] == 0
        and meta["exhaustive_guarantee_ok"]
    )
    if not ok:
        raise InvariantBreach("log-det audit tolerance breach")
    return 0


def _csv_floats(text):
    return [float(x) for x in text.split(",") if x != ""]


def cmd_sweep(args, defaults) -> int:
    config = _selector_config(args, defaults)
    snapshot = read_kvd(args.input)
    anchor = snapshot.layers[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    queries = _gaussian_queries(anchor, args.queries, config.rng_seed)
    lines = [
        "alpha,eta,lambda,budget,quant_error,mean_attn_error,mean_bound_dalpha,"
        "coverage_gap_jointkv"
    ]
    for alpha in _csv_floats(args.alphas):
        for eta in _csv_floats(args.etas):
            for lam in _csv_floats(args.lambdas):
                for budget in [int(b) for b in args.budgets.split(",") if b != ""]:
                    cell = SelectorConfig(
                        alpha=alpha, eta=eta, lam=lam, eps0=config.eps0,
                        eps_logdet=config.eps_logdet, orth_mode=config.orth_mode,
                        granularity=config.granularity, rng_seed=config.rng_seed,
                    )
                    indices, _ = compress_snapshot(snapshot, budget, "cords", cell)
                    qe = quantization_error(anchor, indices, alpha)
                    errs, bounds = [], []
                    bound_alpha = min(alpha, 0.999999)
                    for q in queries:
                        e, _, bd = attention_error_and_bounds(
                            q, anchor, indices, bound_alpha
                        )
                        errs.append(e)
                        bounds.append(bd)
                    rand = baselines.random_select(
                        anchor.n_tokens, len(indices), cell.rng_seed
                    )
                    gap, _ = cdf_max_gap(
                        coverage_cdf(anchor, indices, "JointKV"),
                        coverage_cdf(anchor, rand, "JointKV"),
                    )
                    lines.append(
                        f"{alpha},{eta},{lam},{budget},{qe:.12g},"
                        f"{np.mean(errs):.12g},{np.mean(bounds):.12g},{gap:.12g}"
                    )
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "compress": cmd_compress,
    "stream": cmd_stream,
    "diagnose": cmd_diagnose,
    "audit": cmd_audit,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        defaults = _load_config_defaults(args.config)
        return _COMMANDS[args.command](args, defaults)
    except InvariantBreach as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
