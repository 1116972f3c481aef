import pytest

from prewarmsim.config import (
    ConfigError,
    config_from_dict,
    length_sampler,
    load_config,
    materialize_trace,
)

BASE_TOML = """
schema_version = 1
seed = 7
policy = "warmserve"
output_dir = "out"

[cluster]
servers = 1
gpus_per_server = 4
pages_per_gpu = 2048
h2d_gib_per_s = 31.25

[predictor]
window_ms = 60000

[sim]
day_ms = 600000

[[models]]
model_id = "m7b"
weight_gib = 1.0
parallelism = 1
max_batch = 4

[synth]
models = ["m7b"]
alpha = 1.0
rps = 2.0
duration_s = 60.0
"""


def write_config(tmp_path, text=BASE_TOML, name="exp.toml"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestLoadConfig:
    def test_valid_config(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        assert cfg.seed == 7
        assert cfg.windows_per_day == 10
        assert cfg.models[0].model_id == "m7b"
        assert cfg.models[0].weight_bytes == 1024**3
        assert cfg.synth.models == ["m7b"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.toml")

    def test_invalid_toml(self, tmp_path):
        p = write_config(tmp_path, "policy = [unclosed")
        with pytest.raises(ConfigError, match="invalid TOML"):
            load_config(p)

    def test_unknown_policy(self, tmp_path):
        p = write_config(tmp_path, BASE_TOML.replace('"warmserve"', '"magic"'))
        with pytest.raises(ConfigError, match="policy"):
            load_config(p)

    def test_unknown_field_path(self, tmp_path):
        p = write_config(tmp_path, BASE_TOML + "\n[scaler]\nwarp_speed = 1\n")
        with pytest.raises(ConfigError, match="scaler.warp_speed"):
            load_config(p)

    def test_window_must_divide_day(self, tmp_path):
        p = write_config(tmp_path, BASE_TOML.replace("window_ms = 60000", "window_ms = 70000"))
        with pytest.raises(ConfigError, match="window_ms"):
            load_config(p)

    def test_exactly_one_trace_source(self, tmp_path):
        text = BASE_TOML + '\n[trace]\npath = "t.jsonl"\n'
        with pytest.raises(ConfigError, match="exactly one trace source"):
            load_config(write_config(tmp_path, text))
        no_source = BASE_TOML.split("[synth]")[0]
        with pytest.raises(ConfigError, match="exactly one trace source"):
            load_config(write_config(tmp_path, no_source))

    def test_synth_references_known_models(self, tmp_path):
        text = BASE_TOML.replace('models = ["m7b"]', 'models = ["ghost"]')
        with pytest.raises(ConfigError, match="synth.models: unknown model 'ghost'"):
            load_config(write_config(tmp_path, text))

    def test_weights_must_leave_kv_room(self, tmp_path):
        text = BASE_TOML.replace("weight_gib = 1.0", "weight_gib = 4.0")
        with pytest.raises(ConfigError, match="partition leaves no KV pages"):
            load_config(write_config(tmp_path, text))

    def test_parallelism_bounded_by_server(self, tmp_path):
        text = BASE_TOML.replace("parallelism = 1", "parallelism = 8")
        with pytest.raises(ConfigError, match="exceeds GPUs per server"):
            load_config(write_config(tmp_path, text))

    def test_initial_instances_bounded(self, tmp_path):
        text = BASE_TOML.replace("max_batch = 4", "max_batch = 4\ninitial_instances = 5")
        with pytest.raises(ConfigError, match="initial_instances"):
            load_config(write_config(tmp_path, text))


class TestResolution:
    def test_bandwidth_conversion(self):
        cfg = config_from_dict(
            {
                "models": [{"model_id": "m", "weight_bytes": 10}],
                "synth": {"models": ["m"]},
                "cluster": {"h2d_gib_per_s": 125.0},
            }
        )
        assert cfg.cluster.bandwidth_bytes_per_ms == 125 * 1024**3 / 1000

    def test_to_dict_round_trips_json(self):
        import json

        cfg = config_from_dict(
            {"models": [{"model_id": "m", "weight_bytes": 10}], "synth": {"models": ["m"]}}
        )
        assert json.loads(json.dumps(cfg.to_dict()))["models"][0]["model_id"] == "m"

    def test_materialize_trace_checks_model_ids(self, tmp_path):
        trace = tmp_path / "t.jsonl"
        trace.write_text(
            '{"ts_ms": 0, "model": "ghost", "input_tokens": 1, "output_tokens": 1}\n',
            encoding="utf-8",
        )
        cfg = config_from_dict(
            {
                "models": [{"model_id": "m", "weight_bytes": 10}],
                "trace": {"path": str(trace)},
            }
        )
        with pytest.raises(ConfigError, match="ghost"):
            materialize_trace(cfg)

    def test_materialize_synth_deterministic(self):
        cfg = config_from_dict(
            {
                "seed": 5,
                "models": [{"model_id": "m", "weight_bytes": 10}],
                "synth": {"models": ["m"], "rps": 5.0, "duration_s": 10.0},
            }
        )
        assert materialize_trace(cfg) == materialize_trace(cfg)

    def test_length_sampler_kinds(self):
        cfg = config_from_dict(
            {
                "models": [{"model_id": "m", "weight_bytes": 10}],
                "synth": {"models": ["m"], "length_kind": "fixed",
                          "input_tokens": 32, "output_tokens": 8},
            }
        )
        import numpy as np

        rng = np.random.default_rng(0)
        assert length_sampler(cfg.synth)(rng) == (32, 8)
