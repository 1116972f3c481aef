"""Simulation outputs: per-request latency records, summaries, and artifact
serialization.

The metrics JSON embeds the resolved config and the trace hash so any report
is reproducible from its own header; serialization is canonical (sorted keys)
so identical runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class RequestRecord:
    request_id: str
    model_id: str
    arrival_ms: float
    output_tokens: int
    queue_ms: float = 0.0
    startup_ms: float = 0.0
    load_stall_ms: float = 0.0
    prefill_ms: float = 0.0
    first_token_ms: float | None = None
    completion_ms: float | None = None
    tpot_ms: float | None = None

    @property
    def ttft_ms(self) -> float | None:
        if self.first_token_ms is None:
            return None
        return self.first_token_ms - self.arrival_ms


def _percentiles(values: list[float]) -> dict:
    if not values:
        return {"count": 0, "p50": None, "p95": None, "p99": None, "mean": None}
    arr = np.asarray(values, dtype=np.float64)
    return {
        "count": int(arr.size),
        "p50": float(np.percentile(arr, 50)),
        "p95": float(np.percentile(arr, 95)),
        "p99": float(np.percentile(arr, 99)),
        "mean": float(arr.mean()),
    }


@dataclass
class MetricsReport:
    policy: str
    seed: int
    config: dict
    trace_hash: str
    records: list[RequestRecord] = field(default_factory=list)
    audit: list[dict] = field(default_factory=list)
    prediction_rows: list[dict] = field(default_factory=list)
    role_timeline: list[dict] = field(default_factory=list)
    pipeline_rows: list[dict] = field(default_factory=list)
    invariant_violations: list[str] = field(default_factory=list)
    scale_ups_total: int = 0
    scale_ups_warm: int = 0
    scale_ups_cold: int = 0
    capacity_starved: int = 0
    undrained: int = 0

    @property
    def hit_ratio(self) -> float | None:
        if self.scale_ups_total == 0:
            return None
        return self.scale_ups_warm / self.scale_ups_total

    def model_summary(self) -> dict:
        by_model: dict[str, dict[str, list[float]]] = {}
        for r in self.records:
            bucket = by_model.setdefault(r.model_id, {"ttft": [], "tpot": []})
            if r.ttft_ms is not None:
                bucket["ttft"].append(r.ttft_ms)
            if r.tpot_ms is not None:
                bucket["tpot"].append(r.tpot_ms)
        return {
            model: {
                "ttft_ms": _percentiles(vals["ttft"]),
                "tpot_ms": _percentiles(vals["tpot"]),
            }
            for model, vals in sorted(by_model.items())
        }

    def overall_summary(self) -> dict:
        ttft = [r.ttft_ms for r in self.records if r.ttft_ms is not None]
        tpot = [r.tpot_ms for r in self.records if r.tpot_ms is not None]
        return {"ttft_ms": _percentiles(ttft), "tpot_ms": _percentiles(tpot)}

    def prediction_error_summary(self) -> dict:
        errors: dict[str, list[float]] = {}
        for row in self.prediction_rows:
            if row["actual"] is None or row["actual"] <= 0:
                continue
            key = f"{row['target']}"
            errors.setdefault(key, []).append(
                abs(row["predicted"] - row["actual"]) / row["actual"]
            )
        return {
            target: float(np.mean(vals)) if vals else None
            for target, vals in sorted(errors.items())
        }

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "policy": self.policy,
            "seed": self.seed,
            "trace_hash": self.trace_hash,
            "config": self.config,
            "requests_total": len(self.records),
            "undrained": self.undrained,
            "scale_ups": {
                "total": self.scale_ups_total,
                "warm": self.scale_ups_warm,
                "cold": self.scale_ups_cold,
                "capacity_starved": self.capacity_starved,
            },
            "hit_ratio": self.hit_ratio,
            "per_model": self.model_summary(),
            "overall": self.overall_summary(),
            "prediction_mean_relative_error": self.prediction_error_summary(),
            "invariant_violations": self.invariant_violations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)

    def write_artifacts(self, outdir) -> list[Path]:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        written = []

        metrics_path = out / "metrics.json"
        metrics_path.write_text(self.to_json() + "\n", encoding="utf-8")
        written.append(metrics_path)

        req_path = out / "requests.csv"
        with open(req_path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(
                [
                    "request_id",
                    "model_id",
                    "arrival_ms",
                    "queue_ms",
                    "startup_ms",
                    "load_stall_ms",
                    "prefill_ms",
                    "ttft_ms",
                    "tpot_ms",
                    "output_tokens",
                    "completion_ms",
                ]
            )
            for r in self.records:
                w.writerow(
                    [
                        r.request_id,
                        r.model_id,
                        r.arrival_ms,
                        r.queue_ms,
                        r.startup_ms,
                        r.load_stall_ms,
                        r.prefill_ms,
                        "" if r.ttft_ms is None else r.ttft_ms,
                        "" if r.tpot_ms is None else r.tpot_ms,
                        r.output_tokens,
                        "" if r.completion_ms is None else r.completion_ms,
                    ]
                )
        written.append(req_path)

        audit_path = out / "decisions.jsonl"
        with open(audit_path, "w", encoding="utf-8") as f:
            for rec in self.audit:
                f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
                f.write("\n")
        written.append(audit_path)

        summary_path = out / "summary.txt"
        summary_path.write_text(self.render_summary(), encoding="utf-8")
        written.append(summary_path)

        pred_path = out / "prediction_log.csv"
        with open(pred_path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(
                ["model_id", "target", "day", "window", "seasonal", "delta", "predicted", "actual"]
            )
            for row in self.prediction_rows:
                w.writerow(
                    [
                        row["model_id"],
                        row["target"],
                        row["day"],
                        row["window"],
                        row["seasonal"],
                        row["delta"],
                        row["predicted"],
                        "" if row["actual"] is None else row["actual"],
                    ]
                )
        written.append(pred_path)

        timeline_path = out / "gpu_timeline.csv"
        with open(timeline_path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["time_ms", "gpu_id", "old_role", "new_role"])
            for row in self.role_timeline:
                w.writerow([row["time_ms"], row["gpu_id"], row["old_role"], row["new_role"]])
        written.append(timeline_path)

        if self.pipeline_rows:
            pipe_path = out / "pipeline_traces.csv"
            with open(pipe_path, "w", newline="", encoding="utf-8") as f:
                w = csv.writer(f)
                w.writerow(
                    ["gpu_id", "label", "start_ms", "finish_ms", "n_chunks", "stall_ms"]
                )
                for row in self.pipeline_rows:
                    w.writerow(
                        [
                            row["gpu_id"],
                            row["label"],
                            row["start_ms"],
                            row["finish_ms"],
                            row["n_chunks"],
                            row["stall_ms"],
                        ]
                    )
            written.append(pipe_path)

        return written

    def render_summary(self) -> str:
        lines = [
            f"policy: {self.policy}",
            f"seed: {self.seed}",
            f"trace_hash: {self.trace_hash}",
            f"requests: {len(self.records)} (undrained: {self.undrained})",
            f"scale_ups: total={self.scale_ups_total} warm={self.scale_ups_warm} "
            f"cold={self.scale_ups_cold} starved={self.capacity_starved}",
            f"hit_ratio: {'n/a' if self.hit_ratio is None else f'{self.hit_ratio:.4f}'}",
            "",
            f"{'model':<20}{'count':>8}{'P50':>12}{'P95':>12}{'P99':>12}{'TPOT':>10}",
        ]
        for model, stats in self.model_summary().items():
            t = stats["ttft_ms"]
            d = stats["tpot_ms"]

            def fmt(v):
                return "n/a" if v is None else f"{v:.1f}"

            lines.append(
                f"{model:<20}{t['count']:>8}{fmt(t['p50']):>12}{fmt(t['p95']):>12}"
                f"{fmt(t['p99']):>12}{fmt(d['mean']):>10}"
            )
        lines.append("")
        return "\n".join(lines)
