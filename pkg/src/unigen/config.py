"""Run configuration: JSON file over defaults, dotted CLI overrides on top.

The schema is closed: any key not present in DEFAULTS is rejected, so typos
fail loudly instead of silently running with defaults. The effective merged
config is hashed to name the per-run artifact directory and echoed into it.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .connectors import CachedBackend, HttpBackend, ResponseCache, StubBackend
from .metrics import MetricConfig
from .model import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "paths": {
        "corpus": None,
        "queries": None,
        "connectors": None,
        "model": None,
        "out": "runs",
    },
    "model": {
        "embed_dim": 64,
        "hidden_dim": 128,
        "encoder_layers": 2,
        "decoder_layers": 2,
        "num_heads": 4,
        "max_input_len": 64,
        "max_output_len": 48,
    },
    # "lambda" weighs the retrieval loss; 1-lambda weighs the answer loss.
    "train": {
        "lambda": 0.6,
        "learning_rate": 3e-4,
        "batch_size": 32,
        "epochs": 3,
        "grad_clip": 1.0,
        "warmup_steps": 100,
    },
    "metrics": {"k_values": [1, 5, 10], "rouge_beta": 1.0},
    "llm": {
        "backend": "stub",
        "base_url": None,
        "model": "stub",
        "api_key_env": None,
        "temperature": 0.0,
        "max_tokens": 256,
        "timeout_s": 30.0,
        "max_attempts": 4,
        "min_interval_s": 0.0,
        "max_in_flight": 4,
        "cache_dir": None,
    },
    "connector": {"m": 32, "n": 64},
    "iter": {"k_docs": 3, "max_doc_words": 60, "iterations": 2},
    "decode": {"beam_size": 10, "answer_max_len": 32, "length_normalize": False},
    "pseudo": {"k_per_doc": 5},
    "ablation": {"share_encoder": True, "use_q_connector": True, "use_d_connector": True},
    "seed": 0,
    "jobs": 4,
}


def _check_value(path: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported config value {value!r}")


def _merge(base: dict, incoming: dict, prefix: str = "") -> dict:
    out = dict(base)
    for key, value in incoming.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected an object")
            out[key] = _merge(base[key], value, prefix=f"{path}.")
        else:
            out[key] = _check_value(path, base[key], value)
    return out


def load_config(path=None) -> dict:
    """Defaults, optionally overlaid with a JSON file. Unknown keys are errors."""
    if path is None:
        return json.loads(json.dumps(DEFAULTS))
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return _merge(DEFAULTS, raw)


def parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted_key: str, value) -> None:
    """Set cfg['a']['b'] from 'a.b'; the key must already exist in the schema."""
    parts = dotted_key.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted_key!r}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key {dotted_key!r}")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"{dotted_key!r} is a section, not a value")
    schema = DEFAULTS
    for part in parts[:-1]:
        schema = schema[part]
    node[leaf] = _check_value(dotted_key, schema[leaf], value)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def make_model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        share_encoder=cfg["ablation"]["share_encoder"],
        seed=cfg["seed"],
        **cfg["model"],
    )


def make_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    grad_clip = t["grad_clip"]
    return TrainConfig(
        lambda_weight=t["lambda"],
        learning_rate=t["learning_rate"],
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        grad_clip=None if grad_clip is None else float(grad_clip),
        warmup_steps=t["warmup_steps"],
    )


def make_metric_config(cfg: dict) -> MetricConfig:
    m = cfg["metrics"]
    return MetricConfig(k_values=tuple(m["k_values"]), rouge_beta=m["rouge_beta"])


def make_backend(cfg: dict):
    llm = cfg["llm"]
    kind = llm["backend"]
    if kind == "stub":
        backend = StubBackend()
    elif kind == "http":
        if not llm["base_url"]:
            raise ConfigError("llm.backend is 'http' but llm.base_url is not set")
        backend = HttpBackend(
            base_url=llm["base_url"],
            model=llm["model"],
            api_key_env=llm["api_key_env"],
            temperature=llm["temperature"],
            max_tokens=llm["max_tokens"],
            timeout_s=llm["timeout_s"],
            max_attempts=llm["max_attempts"],
            min_interval_s=llm["min_interval_s"],
            max_in_flight=min(llm["max_in_flight"], cfg["jobs"]),
        )
    else:
        raise ConfigError(f"llm.backend must be 'stub' or 'http', got {kind!r}")
    if llm["cache_dir"]:
        backend = CachedBackend(backend, ResponseCache(llm["cache_dir"]))
    return backend
