"""Command-line entry points: run experiments, synthesize traces, compare
reports, and validate configs.

Subcommands:
  run       simulate a config (optionally sweeping all policies)
  synth     generate a power-law Poisson workload as canonical JSONL
  compare   ratio table between a baseline report and candidates
  validate  check a config file and exit
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import config as config_mod
from . import engine, trace

OUTPUT_DIR_ENV = "PREWARMSIM_OUTPUT_DIR"


class CompareError(ValueError):
    pass


def _add_run(sub):
    p = sub.add_parser("run", help="run an experiment from a TOML config")
    p.add_argument("--config", required=True, help="experiment config path")
    p.add_argument(
        "--policy",
        choices=config_mod.POLICIES,
        help="override the config's policy",
    )
    p.add_argument(
        "--sweep",
        action="store_true",
        help="run every policy on the identical trace, one subdirectory each",
    )
    p.add_argument("--output-dir", help="override output directory")


def _add_synth(sub):
    p = sub.add_parser("synth", help="synthesize a workload trace")
    p.add_argument(
        "--models", required=True, help="comma-separated model ids, most popular first"
    )
    p.add_argument("--alpha", type=float, default=1.0, help="power-law exponent")
    p.add_argument("--rps", type=float, required=True, help="aggregate requests/s")
    p.add_argument("--duration", type=float, required=True, help="trace length (s)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument(
        "--length-dist", choices=("fixed", "lognormal"), default="fixed"
    )
    p.add_argument("--input-tokens", type=int, default=128)
    p.add_argument("--output-tokens", type=int, default=64)
    p.add_argument("--in-mean", type=float, default=5.0)
    p.add_argument("--in-sigma", type=float, default=0.8)
    p.add_argument("--out-mean", type=float, default=4.0)
    p.add_argument("--out-sigma", type=float, default=0.8)


def _add_compare(sub):
    p = sub.add_parser("compare", help="compare metrics reports (first is baseline)")
    p.add_argument("reports", nargs="+", help="metrics.json paths (>= 2)")


def _add_validate(sub):
    p = sub.add_parser("validate", help="validate a config file")
    p.add_argument("--config", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prewarmsim",
        description="Trace-driven simulator for multi-LLM GPU serving with "
        "predictive prewarming",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run(sub)
    _add_synth(sub)
    _add_compare(sub)
    _add_validate(sub)
    return parser


def cmd_run(args) -> int:
    cfg = config_mod.load_config(args.config)
    out_root = args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir
    requests = config_mod.materialize_trace(cfg)
    policies = list(config_mod.POLICIES) if args.sweep else [args.policy or cfg.policy]
    status = 0
    for policy in policies:
        report = engine.run(cfg, requests, policy)
        outdir = Path(out_root) / policy if args.sweep else Path(out_root)
        report.write_artifacts(outdir)
        print(f"[{policy}] wrote {outdir}/metrics.json")
        print(report.render_summary())
        if report.invariant_violations:
            print(
                f"[{policy}] {len(report.invariant_violations)} invariant "
                "violations logged",
                file=sys.stderr,
            )
            status = 1
    return status


def cmd_synth(args) -> int:
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    if args.length_dist == "fixed":
        sampler = trace.fixed_lengths(args.input_tokens, args.output_tokens)
    else:
        sampler = trace.lognormal_lengths(
            args.in_mean, args.in_sigma, args.out_mean, args.out_sigma
        )
    requests = trace.synthesize_workload(
        models, args.alpha, args.rps, args.duration, args.seed, sampler
    )
    trace.save_trace(requests, args.out)
    print(f"wrote {len(requests)} requests to {args.out}")
    return 0


def load_report(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def compare_reports(reports: list[dict]) -> dict:
    """Ratios (baseline / candidate) of tail TTFT per model plus hit ratios.

    All reports must replay the identical trace.
    """
    if len(reports) < 2:
        raise CompareError("need at least two reports")
    base = reports[0]
    for r in reports[1:]:
        if r["trace_hash"] != base["trace_hash"]:
            raise CompareError(
                f"trace hash mismatch: {r['trace_hash']} vs {base['trace_hash']}"
            )
    comparison = {"baseline_policy": base["policy"], "candidates": []}
    for cand in reports[1:]:
        entry = {
            "policy": cand["policy"],
            "hit_ratio": {"baseline": base["hit_ratio"], "candidate": cand["hit_ratio"]},
            "per_model": {},
        }
        for model, stats in cand["per_model"].items():
            base_stats = base["per_model"].get(model)
            if base_stats is None:
                continue
            ratios = {}
            for q in ("p95", "p99"):
                b = base_stats["ttft_ms"][q]
                c = stats["ttft_ms"][q]
                ratios[f"ttft_{q}_ratio"] = None if not b or not c else b / c
            entry["per_model"][model] = ratios
        comparison["candidates"].append(entry)
    return comparison


def render_comparison(comparison: dict) -> str:
    lines = [f"baseline: {comparison['baseline_policy']}"]
    for cand in comparison["candidates"]:
        hr = cand["hit_ratio"]
        lines.append(
            f"vs {cand['policy']}: hit_ratio {hr['baseline']} -> {hr['candidate']}"
        )
        lines.append(f"  {'model':<20}{'P95 ratio':>12}{'P99 ratio':>12}")
        for model, ratios in sorted(cand["per_model"].items()):

            def fmt(v):
                return "n/a" if v is None else f"{v:.3f}"

            lines.append(
                f"  {model:<20}{fmt(ratios['ttft_p95_ratio']):>12}"
                f"{fmt(ratios['ttft_p99_ratio']):>12}"
            )
    return "\n".join(lines)


def cmd_compare(args) -> int:
    reports = [load_report(p) for p in args.reports]
    comparison = compare_reports(reports)
    print(render_comparison(comparison))
    return 0


def cmd_validate(args) -> int:
    try:
        config_mod.load_config(args.config)
    except config_mod.ConfigError as e:
        print(f"invalid: {e}", file=sys.stderr)
        return 1
    print("ok")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "compare":
            return cmd_compare(args)
        if args.command == "validate":
            return cmd_validate(args)
    except (config_mod.ConfigError, trace.TraceError, CompareError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
