"""Experiment configuration: TOML loading, validation with field paths, and
resolution into the concrete objects the simulation consumes.

All randomness flows from the single top-level seed through named substreams,
so trace synthesis and arrival generation can be re-seeded independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import trace as trace_mod
from .autoscaler import ScalePolicy
from .cluster import ModelSpec

GIB = 1024**3

POLICIES = ("warmserve", "sllm_gpu", "no_prewarm")


class ConfigError(ValueError):
    """Validation failure; the message names the offending field path."""


@dataclass
class ClusterConfig:
    servers: int = 1
    gpus_per_server: int = 8
    page_size_bytes: int = 2 * 1024 * 1024
    pages_per_gpu: int = 40_960  # 80 GiB of 2 MiB pages
    h2d_gib_per_s: float = 128.0
    map_ms_per_page: float = 0.0390625  # 0.2 s per 10 GiB of 2 MiB pages
    chunk_pages: int = 64
    # constant per-token synchronization cost for multi-GPU instances
    interconnect_sync_ms: float = 0.0

    @property
    def bandwidth_bytes_per_ms(self) -> float:
        return self.h2d_gib_per_s * GIB / 1000.0


@dataclass
class PredictorConfig:
    window_ms: int = 300_000
    seasonal_days: int = 3
    lookback_windows: int = 10
    weight_orientation: str = "recent"


@dataclass
class LatencyConfig:
    warm_start_ms: float = 500.0
    cold_extra_ms: float = 17_000.0
    decode_batch_slowdown: float = 0.0
    speed_factor: float = 1.0
    ref_input_tokens: int = 512


@dataclass
class SimConfig:
    day_ms: int = trace_mod.DAY_MS
    drain_timeout_ms: float = 120_000.0
    invariant_checks: bool = True
    dump_pipeline_traces: bool = False


@dataclass
class SynthConfig:
    models: list[str] = field(default_factory=list)
    alpha: float = 1.0
    rps: float = 1.0
    duration_s: float = 3600.0
    length_kind: str = "fixed"  # fixed | lognormal
    input_tokens: int = 128
    output_tokens: int = 64
    in_mean: float = 5.0
    in_sigma: float = 0.8
    out_mean: float = 4.0
    out_sigma: float = 0.8


@dataclass
class ExperimentConfig:
    seed: int = 0
    policy: str = "warmserve"
    output_dir: str = "out"
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    scaler: ScalePolicy = field(default_factory=ScalePolicy)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    models: list[ModelSpec] = field(default_factory=list)
    trace_path: str | None = None
    synth: SynthConfig | None = None

    @property
    def windows_per_day(self) -> int:
        return self.sim.day_ms // self.predictor.window_ms

    def spec(self, model_id: str) -> ModelSpec:
        for m in self.models:
            if m.model_id == model_id:
                return m
        raise KeyError(model_id)

    def to_dict(self) -> dict:
        """Resolved config as plain JSON-serializable data."""

        def plain(obj):
            if hasattr(obj, "__dataclass_fields__"):
                return {k: plain(getattr(obj, k)) for k in obj.__dataclass_fields__}
            if isinstance(obj, (list, tuple)):
                return [plain(v) for v in obj]
            return obj

        out = {
            "seed": self.seed,
            "policy": self.policy,
            "cluster": plain(self.cluster),
            "predictor": plain(self.predictor),
            "scaler": plain(self.scaler),
            "latency": plain(self.latency),
            "sim": plain(self.sim),
            "models": [plain(m) for m in self.models],
            "trace_path": self.trace_path,
            "synth": plain(self.synth) if self.synth else None,
        }
        return out


def _take(section: dict, path: str, cls, defaults):
    """Build a dataclass from a TOML table, rejecting unknown keys."""
    known = set(defaults.__dataclass_fields__)
    for key in section:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown field")
    kwargs = {k: section[k] for k in section}
    try:
        return cls(**{**defaults.__dict__, **kwargs})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _model_spec(raw: dict, idx: int) -> ModelSpec:
    path = f"models[{idx}]"
    if "model_id" not in raw:
        raise ConfigError(f"{path}.model_id: required")
    raw = dict(raw)
    if "weight_gib" in raw:
        raw["weight_bytes"] = round(raw.pop("weight_gib") * GIB)
    if "weight_bytes" not in raw:
        raise ConfigError(f"{path}.weight_bytes: required (or weight_gib)")
    known = set(ModelSpec.__dataclass_fields__)
    for key in raw:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown field")
    try:
        return ModelSpec(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    top_known = {
        "schema_version",
        "seed",
        "policy",
        "output_dir",
        "cluster",
        "predictor",
        "scaler",
        "latency",
        "sim",
        "models",
        "trace",
        "synth",
    }
    for key in data:
        if key not in top_known:
            raise ConfigError(f"{key}: unknown field")
    if data.get("schema_version", 1) != 1:
        raise ConfigError("schema_version: unsupported")
    cfg.seed = int(data.get("seed", 0))
    cfg.policy = data.get("policy", "warmserve")
    cfg.output_dir = data.get("output_dir", "out")
    cfg.cluster = _take(data.get("cluster", {}), "cluster", ClusterConfig, ClusterConfig())
    cfg.predictor = _take(
        data.get("predictor", {}), "predictor", PredictorConfig, PredictorConfig()
    )
    cfg.scaler = _take(data.get("scaler", {}), "scaler", ScalePolicy, ScalePolicy())
    cfg.latency = _take(data.get("latency", {}), "latency", LatencyConfig, LatencyConfig())
    cfg.sim = _take(data.get("sim", {}), "sim", SimConfig, SimConfig())
    cfg.models = [_model_spec(m, i) for i, m in enumerate(data.get("models", []))]
    trace_section = data.get("trace")
    if trace_section is not None:
        if "path" not in trace_section:
            raise ConfigError("trace.path: required")
        cfg.trace_path = trace_section["path"]
    synth_section = data.get("synth")
    if synth_section is not None:
        cfg.synth = _take(synth_section, "synth", SynthConfig, SynthConfig())
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.policy not in POLICIES:
        raise ConfigError(f"policy: must be one of {POLICIES}, got {cfg.policy!r}")
    if not cfg.models:
        raise ConfigError("models: at least one model spec is required")
    ids = [m.model_id for m in cfg.models]
    if len(set(ids)) != len(ids):
        raise ConfigError("models: duplicate model_id")
    if cfg.predictor.window_ms <= 0:
        raise ConfigError("predictor.window_ms: must be > 0")
    if cfg.sim.day_ms % cfg.predictor.window_ms != 0:
        raise ConfigError(
            f"predictor.window_ms: {cfg.predictor.window_ms} does not divide "
            f"sim.day_ms ({cfg.sim.day_ms}) evenly"
        )
    if (cfg.trace_path is None) == (cfg.synth is None):
        raise ConfigError("trace/synth: exactly one trace source is required")
    if cfg.synth is not None:
        for m in cfg.synth.models:
            if m not in ids:
                raise ConfigError(f"synth.models: unknown model {m!r}")
        if not cfg.synth.models:
            raise ConfigError("synth.models: must not be empty")
        if cfg.synth.length_kind not in ("fixed", "lognormal"):
            raise ConfigError("synth.length_kind: must be fixed or lognormal")
    page = cfg.cluster.page_size_bytes
    for i, m in enumerate(cfg.models):
        if m.partition_pages(page) >= cfg.cluster.pages_per_gpu:
            raise ConfigError(
                f"models[{i}]: partition leaves no KV pages on a "
                f"{cfg.cluster.pages_per_gpu}-page GPU"
            )
        if m.parallelism > cfg.cluster.gpus_per_server:
            raise ConfigError(
                f"models[{i}]: parallelism {m.parallelism} exceeds GPUs per server"
            )
    total_initial = sum(m.initial_instances * m.parallelism for m in cfg.models)
    if total_initial > cfg.cluster.servers * cfg.cluster.gpus_per_server:
        raise ConfigError("models: initial_instances exceed cluster GPU count")
    if cfg.latency.speed_factor <= 0:
        raise ConfigError("latency.speed_factor: must be > 0")
    if cfg.latency.warm_start_ms < 0 or cfg.latency.cold_extra_ms < 0:
        raise ConfigError("latency: stage constants must be >= 0")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with open(p, "rb") as f:
        try:
            data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{p}: invalid TOML: {e}") from e
    return config_from_dict(data)


def length_sampler(synth: SynthConfig) -> trace_mod.LengthSampler:
    if synth.length_kind == "fixed":
        return trace_mod.fixed_lengths(synth.input_tokens, synth.output_tokens)
    return trace_mod.lognormal_lengths(
        synth.in_mean, synth.in_sigma, synth.out_mean, synth.out_sigma
    )


def materialize_trace(cfg: ExperimentConfig) -> list[trace_mod.Request]:
    """Load or synthesize the request sequence this experiment replays."""
    if cfg.trace_path is not None:
        requests = trace_mod.load_trace(cfg.trace_path)
    else:
        requests = trace_mod.synthesize_workload(
            cfg.synth.models,
            cfg.synth.alpha,
            cfg.synth.rps,
            cfg.synth.duration_s,
            cfg.seed,
            length_sampler(cfg.synth),
        )
    ids = {m.model_id for m in cfg.models}
    for r in requests:
        if r.model_id not in ids:
            raise ConfigError(
                f"trace references model {r.model_id!r} missing from model specs"
            )
    return requests
