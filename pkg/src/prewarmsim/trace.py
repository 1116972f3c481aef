"""Request traces: canonical JSONL ingestion, synthetic workload generation,
and per-window load statistics.

The canonical trace format is JSON Lines, one request per line, with fields
``ts_ms``, ``model``, ``input_tokens``, ``output_tokens`` and an optional
``id``. All functions here are pure over immutable inputs.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels

DAY_MS = 86_400_000

# Named RNG substreams derived from the experiment seed, so each component
# draws from an independent, reproducible stream.
SUBSTREAMS = {"arrivals": 0, "models": 1, "lengths": 2}

LengthSampler = Callable[[np.random.Generator], tuple[int, int]]


class TraceError(ValueError):
    """Raised for malformed trace files; message carries path and line number."""


@dataclass(frozen=True)
class Request:
    id: str
    model_id: str
    arrival: float
    input_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.input_tokens < 1 or self.output_tokens < 1:
            raise ValueError(
                f"request {self.id}: token counts must be >= 1 "
                f"(got {self.input_tokens}, {self.output_tokens})"
            )
        if self.arrival < 0:
            raise ValueError(f"request {self.id}: negative arrival {self.arrival}")


@dataclass(frozen=True)
class WindowStats:
    model_id: str
    day: int
    window: int
    avg_load: float
    peak_load: int


def substream(seed: int, name: str) -> np.random.Generator:
    """Child generator for a named component of the experiment seed."""
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(SUBSTREAMS[name],))
    )


def fixed_lengths(input_tokens: int, output_tokens: int) -> LengthSampler:
    def sample(rng):
        return input_tokens, output_tokens

    return sample


def lognormal_lengths(
    in_mean: float = 5.0,
    in_sigma: float = 0.8,
    out_mean: float = 4.0,
    out_sigma: float = 0.8,
    max_tokens: int = 8192,
) -> LengthSampler:
    def sample(rng):
        inp = int(np.clip(int(rng.lognormal(in_mean, in_sigma)), 1, max_tokens))
        out = int(np.clip(int(rng.lognormal(out_mean, out_sigma)), 1, max_tokens))
        return inp, out

    return sample


def power_law_shares(n: int, alpha: float) -> np.ndarray:
    """Normalized popularity shares for ranks 1..n proportional to rank^-alpha."""
    ranks = np.arange(1, n + 1, dtype=np.float64)
    weights = ranks**-alpha
    return weights / weights.sum()


def load_trace(path, fmt: str = "jsonl") -> list[Request]:
    """Parse a trace file into Requests sorted by arrival.

    Records with missing or invalid fields raise TraceError naming the line.
    Non-monotonic timestamps are reported as a warning and sorted.
    """
    if fmt != "jsonl":
        raise TraceError(f"unknown trace format {fmt!r}")
    requests: list[Request] = []
    seen_ids: set[str] = set()
    prev_ts = -math.inf
    non_monotonic = False
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            try:
                ts = rec["ts_ms"]
                model = rec["model"]
                inp = rec["input_tokens"]
                out = rec["output_tokens"]
            except KeyError as e:
                raise TraceError(f"{path}:{lineno}: missing field {e.args[0]!r}") from e
            rid = str(rec.get("id", f"r{lineno:07d}"))
            if rid in seen_ids:
                raise TraceError(f"{path}:{lineno}: duplicate request id {rid!r}")
            seen_ids.add(rid)
            try:
                req = Request(rid, str(model), float(ts), int(inp), int(out))
            except (TypeError, ValueError) as e:
                raise TraceError(f"{path}:{lineno}: {e}") from e
            if req.arrival < prev_ts:
                non_monotonic = True
            prev_ts = req.arrival
            requests.append(req)
    if non_monotonic:
        warnings.warn(
            f"{path}: non-monotonic timestamps; requests sorted by arrival",
            stacklevel=2,
        )
        requests.sort(key=lambda r: r.arrival)
    return requests


def save_trace(requests: Iterable[Request], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in requests:
            rec = {
                "id": r.id,
                "ts_ms": r.arrival,
                "model": r.model_id,
                "input_tokens": r.input_tokens,
                "output_tokens": r.output_tokens,
            }
            f.write(json.dumps(rec, separators=(",", ":")))
            f.write("\n")


def trace_hash(requests: Sequence[Request]) -> str:
    """Canonical digest of a request sequence, independent of on-disk form."""
    h = hashlib.sha256()
    for r in requests:
        h.update(
            f"{r.id},{r.model_id},{r.arrival!r},{r.input_tokens},{r.output_tokens}\n".encode()
        )
    return h.hexdigest()


def synthesize_workload(
    models: Sequence[str],
    alpha: float,
    rps: float,
    duration_s: float,
    seed: int,
    length_dist: LengthSampler | None = None,
) -> list[Request]:
    """Poisson arrivals at aggregate rate ``rps`` split across models by a
    power-law popularity with exponent ``alpha`` (rank 1 most popular).

    Deterministic for a fixed seed; alpha=0 degenerates to a uniform split.
    """
    if not models:
        raise ValueError("empty model list")
    if rps <= 0:
        raise ValueError("rps must be > 0")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if length_dist is None:
        length_dist = fixed_lengths(128, 64)

    arrivals_rng = substream(seed, "arrivals")
    models_rng = substream(seed, "models")
    lengths_rng = substream(seed, "lengths")

    duration_ms = duration_s * 1000.0
    gap_mean = 1000.0 / rps
    arrivals: list[float] = []
    t = 0.0
    while True:
        t += arrivals_rng.exponential(gap_mean)
        if t >= duration_ms:
            break
        arrivals.append(t)

    shares = power_law_shares(len(models), alpha)
    picks = models_rng.choice(len(models), size=len(arrivals), p=shares)
    requests = []
    for i, (ts, m) in enumerate(zip(arrivals, picks)):
        inp, out = length_dist(lengths_rng)
        requests.append(Request(f"req_{i:07d}", models[int(m)], ts, inp, out))
    return requests


def compute_window_stats(
    requests: Sequence[Request],
    completions: Mapping[str, float],
    window_ms: float,
    *,
    windows_per_day: int | None = None,
    day_ms: int = DAY_MS,
    horizon_ms: float | None = None,
) -> list[WindowStats]:
    """Per-model, per-window average and peak concurrency.

    A request occupies [arrival, end); peak is the exact maximum of the
    concurrency step function over the window and avg its time-weighted mean.
    Windows with no activity are emitted as zeros so they count as
    observations downstream.
    """
    if window_ms <= 0:
        raise ValueError("window_ms must be > 0")
    if windows_per_day is None:
        if day_ms % int(window_ms):
            raise ValueError(f"window {window_ms} ms does not divide the day evenly")
        windows_per_day = int(day_ms // window_ms)
    if not requests:
        return []

    by_model: dict[str, list[tuple[float, float]]] = {}
    for r in requests:
        end = float(completions[r.id])
        if end < r.arrival:
            raise ValueError(f"request {r.id}: end {end} before arrival {r.arrival}")
        by_model.setdefault(r.model_id, []).append((r.arrival, end))

    if horizon_ms is None:
        horizon_ms = max(end for spans in by_model.values() for _, end in spans)
    n_windows = int(math.ceil(horizon_ms / window_ms))
    if n_windows <= 0:
        return []

    out: list[WindowStats] = []
    for model in sorted(by_model):
        spans = by_model[model]
        starts = np.array([s for s, _ in spans], dtype=np.float64)
        ends = np.array([e for _, e in spans], dtype=np.float64)
        times = np.concatenate([starts, ends])
        deltas = np.concatenate(
            [np.ones(len(starts), dtype=np.int64), -np.ones(len(ends), dtype=np.int64)]
        )
        uniq, inverse = np.unique(times, return_inverse=True)
        net = np.zeros(len(uniq), dtype=np.int64)
        np.add.at(net, inverse, deltas)
        avg, peak = kernels.window_aggregate(uniq, net, float(window_ms), n_windows)
        for w in range(n_windows):
            out.append(
                WindowStats(
                    model_id=model,
                    day=w // windows_per_day,
                    window=w % windows_per_day,
                    avg_load=float(avg[w]),
                    peak_load=int(peak[w]),
                )
            )
    return out
