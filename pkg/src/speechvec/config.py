"""Run configuration: one JSON document with sections {data, model, train,
eval, bench}. Validation is fail-closed (unknown keys are rejected) and the
config hash is computed over a canonical serialization, so it is stable under
key reordering.
"""

import hashlib
import json

from .data import DataConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


def default_config():
    train = TrainConfig()
    return {
        "data": {
            "docs": 200,
            "vocab_size": 64,
            "topics": 0,
            "utterances_per_doc": 6,
            "eval_queries_per_doc": 2,
            "noise_lo": 0.02,
            "noise_hi": 0.08,
            "voice_spread": 0.35,
            "query_len_lo": 4,
            "query_len_hi": 8,
            "eval_query_len_lo": 0,
            "eval_query_len_hi": 0,
            "doc_len_lo": 6,
            "doc_len_hi": 24,
            "doc_topic_fraction": 0.6,
            "query_own_fraction": 0.85,
            "seed": 17,
        },
        "model": {
            "d_s": 32,
            "d_t": 64,
            "d_e": 128,
            "adapter_hidden": 64,
            "kernel": 5,
            "stride": 4,
            "seed": 1,
        },
        "train": {
            "stage1_lr": train.stage1_lr,
            "stage2_lr": train.stage2_lr,
            "epochs_per_stage": train.epochs_per_stage,
            "stage2_epochs": train.stage2_epochs,
            "batch_size": train.batch_size,
            "weight_decay": train.weight_decay,
            "warmup_fraction": train.warmup_fraction,
            "tau": train.tau,
            "seed": train.seed,
            "stage1_freeze": list(train.stage1_freeze),
            "stage2_freeze": list(train.stage2_freeze),
            "stage1_objective": train.stage1_objective,
            "joint_pre_loss": train.joint_pre_loss,
            "aug_noise": train.aug_noise,
            "aug_rotate": train.aug_rotate,
            "asr_epochs": train.asr_epochs,
            "asr_lr": train.asr_lr,
            "projection_epochs": train.projection_epochs,
            "projection_lr": train.projection_lr,
        },
        "eval": {
            "wer": 0.0,
            "seed": 101,
            "rerank_candidates": 10,
        },
        "bench": {
            "repeats": 20,
            "warmup": 3,
            "max_queries": 40,
        },
    }


def _merge_checked(defaults, user, path):
    merged = dict(defaults)
    for key, value in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key: {'.'.join(path + [key])}")
        base = defaults[key]
        if isinstance(base, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {'.'.join(path + [key])} must be an object")
            merged[key] = _merge_checked(base, value, path + [key])
        else:
            if isinstance(base, bool) != isinstance(value, bool):
                raise ConfigError(f"config key {'.'.join(path + [key])} has the wrong type")
            if isinstance(base, (int, float)) and not isinstance(value, (int, float)):
                raise ConfigError(f"config key {'.'.join(path + [key])} must be a number")
            if isinstance(base, str) and not isinstance(value, str):
                raise ConfigError(f"config key {'.'.join(path + [key])} must be a string")
            if isinstance(base, list) and not isinstance(value, list):
                raise ConfigError(f"config key {'.'.join(path + [key])} must be a list")
            merged[key] = value
    return merged


def load_config(path=None):
    """Read and validate a config file, merged over the documented defaults."""
    user = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
    cfg = _merge_checked(default_config(), user, [])
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg):
    if cfg["model"]["d_e"] <= cfg["model"]["d_t"]:
        raise ConfigError("model.d_e must exceed model.d_t (the head widens embeddings)")
    if not (0.0 <= cfg["eval"]["wer"] <= 1.0):
        raise ConfigError("eval.wer must be in [0, 1]")
    if cfg["data"]["noise_lo"] > cfg["data"]["noise_hi"]:
        raise ConfigError("data.noise_lo cannot exceed data.noise_hi")
    if cfg["bench"]["repeats"] < 5:
        raise ConfigError("bench.repeats must be >= 5")


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg):
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def data_config(cfg):
    d = cfg["data"]
    return DataConfig(
        docs=d["docs"],
        vocab_size=d["vocab_size"],
        topics=d["topics"],
        utterances_per_doc=d["utterances_per_doc"],
        eval_queries_per_doc=d["eval_queries_per_doc"],
        noise_lo=d["noise_lo"],
        noise_hi=d["noise_hi"],
        voice_spread=d["voice_spread"],
        query_len_lo=d["query_len_lo"],
        query_len_hi=d["query_len_hi"],
        eval_query_len_lo=d["eval_query_len_lo"],
        eval_query_len_hi=d["eval_query_len_hi"],
        doc_len_lo=d["doc_len_lo"],
        doc_len_hi=d["doc_len_hi"],
        doc_topic_fraction=d["doc_topic_fraction"],
        query_own_fraction=d["query_own_fraction"],
        d_s=cfg["model"]["d_s"],
        seed=d["seed"],
    )


def model_config(cfg):
    m = cfg["model"]
    return ModelConfig(
        vocab_size=cfg["data"]["vocab_size"],
        d_s=m["d_s"],
        d_t=m["d_t"],
        d_e=m["d_e"],
        adapter_hidden=m["adapter_hidden"],
        kernel=m["kernel"],
        stride=m["stride"],
        seed=m["seed"],
    )


def train_config(cfg):
    t = cfg["train"]
    return TrainConfig(
        stage1_lr=t["stage1_lr"],
        stage2_lr=t["stage2_lr"],
        epochs_per_stage=t["epochs_per_stage"],
        stage2_epochs=t["stage2_epochs"],
        batch_size=t["batch_size"],
        weight_decay=t["weight_decay"],
        warmup_fraction=t["warmup_fraction"],
        tau=t["tau"],
        seed=t["seed"],
        stage1_freeze=tuple(t["stage1_freeze"]),
        stage2_freeze=tuple(t["stage2_freeze"]),
        stage1_objective=t["stage1_objective"],
        joint_pre_loss=t["joint_pre_loss"],
        aug_noise=t["aug_noise"],
        aug_rotate=t["aug_rotate"],
        asr_epochs=t["asr_epochs"],
        asr_lr=t["asr_lr"],
        projection_epochs=t["projection_epochs"],
        projection_lr=t["projection_lr"],
    ).validate()
