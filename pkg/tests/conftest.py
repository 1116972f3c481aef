import sys
from pathlib import Path

# test helpers (oracles, lifecycle_walker) live next to the tests
sys.path.insert(0, str(Path(__file__).parent))

from prewarmsim.autoscaler import ScalePolicy
from prewarmsim.cluster import ModelSpec
from prewarmsim.config import (
    ClusterConfig,
    ExperimentConfig,
    LatencyConfig,
    PredictorConfig,
    SimConfig,
    validate_config,
)

PAGE = 2 * 1024 * 1024
GIB = 1024**3
# 31.25 GiB/s: dyadic bytes/ms, and per-page copy (0.0625 ms) exceeds the
# calibrated per-page map cost (0.0390625 ms), so pipelines never stall.
DYADIC_GIB_PER_S = 31.25


def desk_model(model_id="s", weight_gib=1.0, parallelism=1, **kw):
    defaults = dict(
        max_batch=4,
        layers=8,
        prefill_a_ms=0.1,
        prefill_b_ms=10.0,
        decode_c_ms=20.0,
        kv_bytes_per_token=262_144,
    )
    defaults.update(kw)
    return ModelSpec(model_id, round(weight_gib * GIB), parallelism, **defaults)


def periodic_trace(
    model_id,
    days,
    day_ms,
    window_ms,
    busy_windows,
    concurrency,
    spec,
    offset_ms=5_000.0,
    slack_ms=50.0,
):
    """Deterministic day-periodic workload: during each busy window,
    ``concurrency`` back-to-back request streams keep the model loaded.

    Request duration follows the latency model (prefill + (out-1)*decode), so
    the trace reproduces the same concurrency profile every day.
    """
    from prewarmsim.trace import Request

    out_tokens = 100
    in_tokens = 64
    duration = (
        spec.prefill_a_ms * in_tokens
        + spec.prefill_b_ms
        + (out_tokens - 1) * spec.decode_c_ms
    )
    requests = []
    i = 0
    for day in range(days):
        for w in busy_windows:
            start = day * day_ms + w * window_ms + offset_ms
            end = day * day_ms + (w + 1) * window_ms
            for stream in range(concurrency):
                t = start + stream * 7.0
                while t < end - duration:
                    requests.append(
                        Request(f"{model_id}_{i:06d}", model_id, t, in_tokens, out_tokens)
                    )
                    i += 1
                    t += duration + slack_ms
    requests.sort(key=lambda r: r.arrival)
    return [
        Request(f"q{j:06d}", r.model_id, r.arrival, r.input_tokens, r.output_tokens)
        for j, r in enumerate(requests)
    ]


def desk_config(models=None, *, seed=0, policy="warmserve", **overrides):
    """Small, fast experiment config: 4-GiB GPUs, 1-minute windows,
    10-minute artificial days."""
    cfg = ExperimentConfig(
        seed=seed,
        policy=policy,
        cluster=ClusterConfig(
            servers=1,
            gpus_per_server=4,
            page_size_bytes=PAGE,
            pages_per_gpu=2048,
            h2d_gib_per_s=DYADIC_GIB_PER_S,
        ),
        predictor=PredictorConfig(window_ms=60_000, seasonal_days=2),
        scaler=ScalePolicy(
            check_interval_ms=10_000.0,
            scale_down_utilization_threshold=0.5,
            sustain_windows=2,
        ),
        latency=LatencyConfig(warm_start_ms=500.0, cold_extra_ms=5_000.0),
        sim=SimConfig(day_ms=600_000, drain_timeout_ms=120_000.0),
        models=models or [desk_model()],
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    if cfg.trace_path is None and cfg.synth is None:
        cfg.trace_path = "<in-memory>"  # engine tests pass requests directly
        validate_config(cfg)
        cfg.trace_path = None
    else:
        validate_config(cfg)
    return cfg
