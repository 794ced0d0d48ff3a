"""Command-line entry point: ``h1bkv <command> [flags]``.

Exit codes: 0 on success (and, for checks, when within tolerance), 1 on a
runtime failure or a failed check, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, bench, quant, rng, toymodel
from .attention import calibrate_tau, load_calibration_set, save_calibration_set, synthetic_items
from .cache import PRESETS, CacheConfig, compression_report
from .sketch import estimate_similarity_curve

DEFAULT_COSINES = (-0.9, -0.5, 0.0, 0.5, 0.9)
DEFAULT_PROMPT = "The quick brown fox jumps over the lazy dog. "


@dataclass
class RunReport:
    command: str
    seed: int
    config: dict
    results: dict
    rows: list[dict] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    passed: bool = True

    def to_json(self) -> dict:
        return {
            "command": self.command,
            "version": __version__,
            "seed": self.seed,
            "config": self.config,
            "results": self.results,
            "rows": self.rows,
            "timings": self.timings,
            "passed": self.passed,
        }

    def render(self, fmt: str) -> str:
        if fmt == "json":
            # allow_nan=False enforces the all-finite contract
            return json.dumps(self.to_json(), indent=2, allow_nan=False) + "\n"
        buf = io.StringIO()
        rows = self.rows or [_flat(self.results)]
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()


def _flat(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flat(v, key + "."))
        elif not isinstance(v, list):
            out[key] = v
    return out


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


def _seed(text: str) -> int:
    value = _nonneg_int(text)
    if value > rng.MASK64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not (math.isfinite(value) and value > 0):
        raise argparse.ArgumentTypeError(f"expected a positive finite number, got {text}")
    return value


def _cosine(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not -1.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"cosine must lie strictly inside (-1, 1), got {value}")
    return value


def _tau(text: str) -> float | None:
    if text == "auto":
        return None
    return _positive_float(text)


def cmd_validate_sketch(args: argparse.Namespace) -> RunReport:
    t0 = time.perf_counter()
    points = estimate_similarity_curve(args.b, args.cos, args.trials, seed=args.seed, d=args.d)
    rows = [
        {"cosine": p.cosine, "empirical": p.empirical, "theoretical": p.theoretical, "abs_error": p.abs_error}
        for p in points
    ]
    worst = max(p.abs_error for p in points)
    return RunReport(
        "validate-sketch",
        args.seed,
        {"b": args.b, "trials": args.trials, "d": args.d, "cosines": list(args.cos), "tol": args.tol},
        {"max_abs_error": worst, "within_tol": worst <= args.tol},
        rows,
        {"wall_s": time.perf_counter() - t0},
        passed=worst <= args.tol,
    )


def cmd_quantcheck(args: argparse.Namespace) -> RunReport:
    t0 = time.perf_counter()
    d, r = args.d, args.range
    vectors = (rng.uniform(args.seed, args.trials * d).reshape(args.trials, d) * 2.0 - 1.0) * r
    worst_err = worst_excess = 0.0
    worst_step = 0.0
    violations = 0
    for v in vectors:
        q = quant.quantize(v)
        vh = quant.dequantize(q)
        err = np.abs(vh - v)
        excess = err - (q.step / 2.0 + np.spacing(np.maximum(np.abs(v), np.abs(vh))))
        violations += int(np.sum(excess > 0))
        i = int(np.argmax(err))
        if err[i] > worst_err:
            worst_err, worst_step = float(err[i]), q.step
        worst_excess = max(worst_excess, float(excess.max()))
    constants = rng.standard_normal(rng.derive_seed(args.seed, 1), 32) * r
    constant_exact = all(
        np.array_equal(quant.dequantize(quant.quantize(np.full(d, c))), np.full(d, c)) for c in [0.0, *constants]
    )
    passed = violations == 0 and constant_exact
    return RunReport(
        "quantcheck",
        args.seed,
        {"trials": args.trials, "d": d, "range": r},
        {
            "max_abs_error": worst_err,
            "step_at_max_error": worst_step,
            "half_step_at_max_error": worst_step / 2.0,
            "max_excess_over_bound": worst_excess,
            "bound_violations": violations,
            "constant_vectors_exact": constant_exact,
        },
        timings={"wall_s": time.perf_counter() - t0},
        passed=passed,
    )


def cmd_memory(args: argparse.Namespace) -> RunReport:
    shape = dict(n_layers=args.layers, n_heads=args.heads, head_dim=args.head_dim)
    reference = CacheConfig.preset("reference", **shape, sketch_bits=args.b, fp_width=args.fp_width)
    rows = []
    reports = {}
    for name in args.modes:
        cfg = CacheConfig.preset(name, **shape, sketch_bits=args.b, fp_width=args.fp_width)
        rep = compression_report(reference, cfg, args.context)
        reports[name] = rep
        part = rep["b"]
        rows.append(
            {
                "mode": name,
                "bytes": part["total_bytes"],
                "mb": part["total_mb"],
                "key_bytes": part["key_bytes"],
                "value_bytes": part["value_bytes"],
                "compression_vs_reference": rep["ratio"],
            }
        )
    return RunReport(
        "memory",
        args.seed,
        {**shape, "context": args.context, "sketch_bits": args.b, "fp_width": args.fp_width, "modes": list(args.modes)},
        {"sizes": {r["mode"]: r["bytes"] for r in rows}, "reports": reports},
        rows,
    )


def cmd_calibrate(args: argparse.Namespace) -> RunReport:
    t0 = time.perf_counter()
    if args.input and args.input_pos:
        raise ValueError("give the calibration set either positionally or with --in, not both")
    args.input = args.input or args.input_pos
    if args.input:
        items = load_calibration_set(args.input)
        if not items:
            raise ValueError("calibration file holds no records")
        d = items[0].keys.shape[1]
        source = str(args.input)
    else:
        d = args.d
        items = synthetic_items(args.seed, args.contexts, args.tokens, d)
        source = "synthetic"
    if args.write_set:
        save_calibration_set(items, args.write_set)
    if args.tau_lo >= args.tau_hi:
        raise ValueError("--tau-lo must be smaller than --tau-hi")
    config = CacheConfig(1, 1, d, sketch_bits=args.b, master_seed=args.seed)
    res = calibrate_tau(items, config, (args.tau_lo, args.tau_hi))
    return RunReport(
        "calibrate",
        args.seed,
        {"source": source, "items": len(items), "b": args.b, "d": d, "search_range": [args.tau_lo, args.tau_hi]},
        {**res.to_json(), "improved": res.kl <= res.kl_at_one},
        timings={"wall_s": time.perf_counter() - t0},
        passed=res.kl <= res.kl_at_one,
    )


def _model(args: argparse.Namespace) -> toymodel.ModelWeights:
    config = toymodel.ModelConfig(
        n_layers=args.layers,
        d_model=args.d_model,
        n_heads=args.heads,
        max_context=args.max_context,
        weight_seed=args.weight_seed,
        qk_norm=not args.no_qk_norm,
    )
    if args.weights:
        return toymodel.load_weights(args.weights, config)
    return toymodel.init_weights(config)


def cmd_decode(args: argparse.Namespace) -> RunReport:
    t0 = time.perf_counter()
    weights = _model(args)
    mc = weights.config
    prompt = toymodel.read_corpus(args.corpus) if args.corpus else toymodel.encode_text(args.prompt)
    cfg_a = mc.cache_config(args.config_a, sketch_bits=args.b, master_seed=args.seed)
    cfg_b = mc.cache_config(args.config_b, sketch_bits=args.b, master_seed=args.seed)
    report = toymodel.decode_compare(weights, prompt, args.steps, cfg_a, cfg_b, args.tau)
    results = report.to_json()
    for key in ("kl_per_step", "tokens_a", "tokens_b"):
        results.pop(key)
    if len(prompt) >= 2:
        results["ppl_a"] = toymodel.pseudo_perplexity(weights, prompt, cfg_a, report.tau_a)
        results["ppl_b"] = toymodel.pseudo_perplexity(weights, prompt, cfg_b, report.tau_b)
    rows = [
        {"step": i, "kl": kl, "token_a": a, "token_b": b}
        for i, (kl, a, b) in enumerate(zip(report.kl_per_step, report.tokens_a, report.tokens_b))
    ]
    return RunReport(
        "decode",
        args.seed,
        {
            "model": {k: getattr(mc, k) for k in ("n_layers", "d_model", "n_heads", "vocab_size", "max_context", "weight_seed", "qk_norm")},
            "config_a": args.config_a,
            "config_b": args.config_b,
            "sketch_bits": args.b,
            "steps": args.steps,
            "prompt_tokens": len(prompt),
            "tau": "auto" if args.tau is None else args.tau,
            "weights_file": str(args.weights) if args.weights else None,
        },
        results,
        rows,
        {"wall_s": time.perf_counter() - t0},
    )


def cmd_bench(args: argparse.Namespace) -> RunReport:
    modes = bench.MODES if args.mode == "both" else (args.mode,)
    t0 = time.perf_counter()
    rows = bench.bench_scoring(
        args.context, d=args.d, b=args.b, repeats=args.repeats, warmup=args.warmup, modes=modes, seed=args.seed
    )
    table = [{"context": r.context, "mode": r.mode, "median_ns": r.median_ns, "bytes": r.bytes} for r in rows]
    speedups = {}
    for ctx in args.context:
        per = {r.mode: r for r in rows if r.context == ctx}
        if "float" in per and "bitwise" in per:
            speedups[str(ctx)] = per["float"].median_ns / per["bitwise"].median_ns
    return RunReport(
        "bench",
        args.seed,
        {"contexts": list(args.context), "d": args.d, "b": args.b, "repeats": args.repeats, "warmup": args.warmup, "modes": list(modes)},
        {"key_bytes_per_token": {m: bench.key_bytes_per_token(m, args.d, args.b) for m in modes}},
        table,
        {
            "speedup_float_over_bitwise": speedups,
            "std_ns": {f"{r.context}/{r.mode}": r.std_ns for r in rows},
            "wall_s": time.perf_counter() - t0,
            "machine": platform.machine(),
        },
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seed, default=0, help="64-bit seed (default 0)")
    common.add_argument("--output", choices=("json", "csv"), default="json")
    common.add_argument("--out", type=Path, help="write the report here instead of stdout")
    common.add_argument("--tol", type=_positive_float, default=0.01, help="tolerance for validation checks")

    parser = argparse.ArgumentParser(prog="h1bkv", description="Sketched-key, 4-bit-value KV cache tools")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-sketch", parents=[common], help="Monte-Carlo check of sketch scores vs the arccos law")
    p.add_argument("--b", type=_positive_int, default=256)
    p.add_argument("--trials", type=_positive_int, default=10000)
    p.add_argument("--cos", type=_cosine, nargs="+", default=list(DEFAULT_COSINES))
    p.add_argument("--d", type=_positive_int, default=8, help="ambient dimension of the test vectors")
    p.set_defaults(func=cmd_validate_sketch)

    p = sub.add_parser("quantcheck", parents=[common], help="4-bit round-trip error property run")
    p.add_argument("--trials", type=_positive_int, default=1000)
    p.add_argument("--d", type=_positive_int, default=64)
    p.add_argument("--range", type=_positive_float, default=3.0, help="entries drawn uniformly from [-range, range]")
    p.set_defaults(func=cmd_quantcheck)

    p = sub.add_parser("memory", parents=[common], help="cache byte accounting for a model shape")
    p.add_argument("--layers", type=_positive_int, default=32)
    p.add_argument("--heads", type=_positive_int, default=32)
    p.add_argument("--head-dim", type=_positive_int, default=128)
    p.add_argument("--context", type=_nonneg_int, default=8192)
    p.add_argument("--b", type=_positive_int, default=256)
    p.add_argument("--fp-width", type=_positive_int, default=2)
    p.add_argument("--modes", nargs="+", choices=sorted(PRESETS), default=["reference", "key-only", "h1bkv"])
    p.set_defaults(func=cmd_memory)

    p = sub.add_parser("calibrate", parents=[common], help="fit the softmax temperature on a calibration set")
    p.add_argument("input_pos", nargs="?", type=Path, metavar="input", help="JSON calibration set (default: synthetic)")
    p.add_argument("--in", dest="input", type=Path, help="same as the positional input")
    p.add_argument("--b", type=_positive_int, default=256)
    p.add_argument("--d", type=_positive_int, default=64)
    p.add_argument("--contexts", type=_positive_int, default=64)
    p.add_argument("--tokens", type=_positive_int, default=32)
    p.add_argument("--tau-lo", type=_positive_float, default=1e-3)
    p.add_argument("--tau-hi", type=_positive_float, default=1e3)
    p.add_argument("--write-set", type=Path, help="also save the calibration set used")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("decode", parents=[common], help="greedy decode with two cache backends and compare")
    p.add_argument("--config-a", choices=sorted(PRESETS), default="reference")
    p.add_argument("--config-b", choices=sorted(PRESETS), default="h1bkv")
    p.add_argument("--b", type=_positive_int, default=256)
    p.add_argument("--steps", type=_positive_int, default=64)
    p.add_argument("--prompt", default=DEFAULT_PROMPT)
    p.add_argument("--corpus", type=Path, help="byte file used as the prompt instead of --prompt")
    p.add_argument("--tau", type=_tau, default=None, help="temperature, or 'auto' to calibrate (default)")
    p.add_argument("--weights", type=Path, help="tensor file to load instead of seeded init")
    p.add_argument("--weight-seed", type=_seed, default=0)
    p.add_argument("--layers", type=_positive_int, default=2)
    p.add_argument("--d-model", type=_positive_int, default=64)
    p.add_argument("--heads", type=_positive_int, default=4)
    p.add_argument("--max-context", type=_positive_int, default=512)
    p.add_argument("--no-qk-norm", action="store_true", help="leave queries and keys unnormalized")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", parents=[common], help="scoring latency, FP16 dot products vs bitwise sketches")
    p.add_argument("--context", type=_positive_int, nargs="+", default=[1024, 8192])
    p.add_argument("--d", type=_positive_int, default=64)
    p.add_argument("--b", type=_positive_int, default=256)
    p.add_argument("--repeats", type=_positive_int, default=30)
    p.add_argument("--warmup", type=_nonneg_int, default=3)
    p.add_argument("--mode", choices=("both", *bench.MODES), default="both")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        report = args.func(args)
        text = report.render(args.output)
    except (OSError, ValueError, IndexError) as exc:
        print(f"h1bkv {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
