"""Two-stage training: alignment pre-training then multi-task contrastive
fine-tuning, plus the auxiliary CTC head phase for the cascade baseline and
the three-stage freezing schedule of the projection baseline.

Everything is bitwise reproducible from (config, seed): batch order, loss
values, and checkpoint bytes.
"""

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SpeechUtterance, TrainExample
from .errors import CheckpointError, ConfigError, RangeError
from .losses import (
    TaskType,
    cls_contrastive_grad,
    cosent_grad,
    ctc_loss_grad,
    info_nce_grad,
    mse_align_grad,
)
from .model import CrossModalModel, ModelConfig
from .optim import AdamW, lr_schedule

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "params.bin"

# order in which stages derive their private RNG streams
_STAGE_INDEX = {"pre": 1, "fine": 2, "asr": 3, "projection": 4}


@dataclass
class TrainConfig:
    stage1_lr: float = 1e-5
    stage2_lr: float = 8e-6
    epochs_per_stage: int = 3
    stage2_epochs: int = 0  # 0 = same as epochs_per_stage
    batch_size: int = 8
    weight_decay: float = 0.01
    warmup_fraction: float = 0.10
    tau: float = 0.07
    seed: int = 7
    stage1_freeze: tuple = ("text_encoder",)  # alignment targets stay fixed
    stage2_freeze: tuple = ()
    stage1_objective: str = "mse"  # "mse" or "ctc"
    joint_pre_loss: bool = False  # add the alignment loss to stage-2 steps
    aug_noise: float = 0.0  # seeded per-step frame jitter against memorization
    aug_rotate: float = 0.0  # seeded per-step random small rotation (speaker augmentation)
    asr_epochs: int = 3  # CTC head phase appended to stage 2 (0 disables)
    asr_lr: float = 0.02
    projection_epochs: int = 0  # per projection stage; 0 disables the arm
    projection_lr: float = 0.01

    def validate(self):
        if self.stage1_lr <= 0 or self.stage2_lr <= 0 or self.asr_lr <= 0:
            raise ConfigError("train: learning rates must be > 0")
        if not (0.0 < self.warmup_fraction < 1.0):
            raise ConfigError("train: warmup_fraction must be in (0,1)")
        if self.batch_size < 1:
            raise ConfigError("train: batch_size must be >= 1")
        if self.tau <= 0:
            raise ConfigError("train: tau must be > 0")
        if self.stage1_objective not in ("mse", "ctc"):
            raise ConfigError(f"train: unknown stage1_objective {self.stage1_objective!r}")
        return self


# ---------------------------------------------------------------------------
# seeded frame jitter (training-time augmentation)


def _jitter_utt(utt, sigma, rot, rng):
    if sigma <= 0.0 and rot <= 0.0:
        return utt
    frames = utt.frames.astype(np.float64)
    if rot > 0.0:
        d = frames.shape[1]
        a = rng.standard_normal((d, d))
        skew = (a - a.T) / 2.0
        skew *= rot / max(np.linalg.norm(skew, 2), 1e-12)
        eye = np.eye(d)
        frames = frames @ np.linalg.solve(eye + skew, eye - skew).T
    if sigma > 0.0:
        frames = frames + sigma * rng.standard_normal(frames.shape)
    return replace(utt, frames=frames.astype(np.float32))


def _jitter_item(item, sigma, rot, rng):
    """Jitter the speech inside an utterance or training example; documents
    pass through untouched."""
    if sigma <= 0.0 and rot <= 0.0:
        return item
    if isinstance(item, SpeechUtterance):
        return _jitter_utt(item, sigma, rot, rng)
    if isinstance(item, TrainExample):
        speech = _jitter_utt(item.speech, sigma, rot, rng) if item.speech is not None else None
        pairs = item.graded_pairs
        if pairs is not None:
            pairs = [
                (_jitter_item(a, sigma, rot, rng), _jitter_item(b, sigma, rot, rng), lab)
                for a, b, lab in pairs
            ]
        return replace(item, speech=speech, graded_pairs=pairs)
    return item


# ---------------------------------------------------------------------------
# per-example losses with gradient flow into the model


def _alignment_step(model, utt, tau, scale):
    adapted, back_speech = model.adapt_speech(utt.frames)
    encoded, back_text = model.text_encoder.forward_tokens(utt.tokens)
    loss, d_adapted, d_encoded = mse_align_grad(adapted, encoded)
    back_speech(d_adapted * scale)
    back_text(d_encoded * scale)
    return loss


def _ctc_step(model, utt, tau, scale):
    log_probs, back = model.asr_log_probs(utt.frames)
    loss, d_lp = ctc_loss_grad(log_probs, utt.tokens)
    back(d_lp * scale)
    return loss


def _contrastive_step(model, example, tau, scale, grad_fn, query_fn):
    query, back_q = query_fn(example.speech)
    key_pos, back_p = model.embed_doc(example.positive)
    negs = [model.embed_doc(d) for d in example.negatives]
    loss, d_q, d_pos, d_negs = grad_fn(query, key_pos, [k for k, _ in negs], tau)
    back_q(d_q * scale)
    back_p(d_pos * scale)
    for (_, back_n), d_n in zip(negs, d_negs):
        back_n(d_n * scale)
    return loss


def _item_key(item):
    if isinstance(item, SpeechUtterance):
        return ("speech", item.utt_id)
    return ("doc", item.doc_id)


def _graded_step(model, example, tau, scale, query_fn):
    embedded = {}
    order = []
    for a, b, _ in example.graded_pairs:
        for item in (a, b):
            key = _item_key(item)
            if key not in embedded:
                if key[0] == "speech":
                    embedded[key] = query_fn(item)
                else:
                    embedded[key] = model.embed_doc(item)
                order.append(key)
    index = {key: i for i, key in enumerate(order)}
    items = [embedded[key][0] for key in order]
    pairs = [(index[_item_key(a)], index[_item_key(b)], lab)
             for a, b, lab in example.graded_pairs]
    loss, d_items = cosent_grad(items, pairs, tau)
    for key, d in zip(order, d_items):
        embedded[key][1](d * scale)
    return loss


def example_loss(model, example, tau, scale, query_fn=None):
    """Dispatch one fine-tuning example to its task loss (the Eq.-12 table:
    retrieval/reranking -> InfoNCE, sts/pair-classification -> cosent,
    classification/clustering -> label contrastive)."""
    if query_fn is None:
        query_fn = model.embed_speech
    task = TaskType(example.task)
    if task in (TaskType.RETRIEVAL, TaskType.RERANKING):
        return _contrastive_step(model, example, tau, scale, info_nce_grad, query_fn)
    if task in (TaskType.STS, TaskType.PAIR_CLASSIFICATION):
        return _graded_step(model, example, tau, scale, query_fn)
    return _contrastive_step(model, example, tau, scale, cls_contrastive_grad, query_fn)


# ---------------------------------------------------------------------------
# generic step loop


def _run_stage(model, items, step_fn, *, stage, lr_base, cfg, report, task_of=None):
    """Shuffle per epoch, batch, schedule the lr, and record one report row
    per step: {step, stage, lr, loss, task}."""
    if not items:
        return
    rng = np.random.default_rng([cfg.seed, _STAGE_INDEX[stage]])
    aug_rng = np.random.default_rng([cfg.seed, _STAGE_INDEX[stage], 0xA6])
    batches_per_epoch = math.ceil(len(items) / cfg.batch_size)
    total_steps = max(10, cfg.epochs_per_stage * batches_per_epoch)
    opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
    step = 0
    for _ in range(cfg.epochs_per_stage):
        order = rng.permutation(len(items))
        for b in range(batches_per_epoch):
            batch = [items[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            lr = lr_schedule(step, total_steps, lr_base, cfg.warmup_fraction)
            model.zero_grad()
            scale = 1.0 / len(batch)
            loss = sum(
                step_fn(model, _jitter_item(it, cfg.aug_noise, cfg.aug_rotate, aug_rng), cfg.tau, scale)
                for it in batch
            ) / len(batch)
            opt.step(lr)
            report.append({
                "step": step,
                "stage": stage,
                "lr": lr,
                "loss": float(loss),
                "task": task_of(batch[0]) if task_of else stage,
            })
            step += 1


def _task_batches(examples, batch_size, rng):
    """Single-task batches interleaved round-robin across task types."""
    by_task = {}
    for ex in examples:
        by_task.setdefault(TaskType(ex.task), []).append(ex)
    queues = []
    for task in TaskType:  # fixed task order keeps runs reproducible
        if task not in by_task:
            continue
        pool = by_task[task]
        order = rng.permutation(len(pool))
        queues.append([
            [pool[i] for i in order[b * batch_size:(b + 1) * batch_size]]
            for b in range(math.ceil(len(pool) / batch_size))
        ])
    batches = []
    while queues:
        survivors = []
        for q in queues:
            batches.append(q.pop(0))
            if q:
                survivors.append(q)
        queues = survivors
    return batches


# ---------------------------------------------------------------------------
# stages


def pretrain_stage(model, utterances, cfg, report=None):
    """Stage 1: alignment. The text encoder stays frozen so the regression
    target cannot collapse; the CTC variant aligns the speech encoder through
    the ASR head instead."""
    cfg.validate()
    report = report if report is not None else []
    model.set_frozen(cfg.stage1_freeze)
    step_fn = _alignment_step if cfg.stage1_objective == "mse" else _ctc_step
    _run_stage(model, list(utterances), step_fn, stage="pre",
               lr_base=cfg.stage1_lr, cfg=cfg, report=report,
               task_of=lambda _: "alignment" if cfg.stage1_objective == "mse" else "ctc_align")
    model.set_frozen(())
    return report


def finetune_stage(model, examples, cfg, report=None):
    """Stage 2: task-dispatched contrastive fine-tuning; every component is
    trainable including the shared scaling head."""
    cfg.validate()
    report = report if report is not None else []
    model.set_frozen(cfg.stage2_freeze)
    examples = list(examples)
    if not examples:
        model.set_frozen(())
        return report
    rng = np.random.default_rng([cfg.seed, _STAGE_INDEX["fine"]])
    aug_rng = np.random.default_rng([cfg.seed, _STAGE_INDEX["fine"], 0xA6])
    opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
    epochs = cfg.stage2_epochs or cfg.epochs_per_stage
    all_batches = [
        batch
        for _ in range(epochs)
        for batch in _task_batches(examples, cfg.batch_size, rng)
    ]
    total_steps = max(10, len(all_batches))
    for step, batch in enumerate(all_batches):
        lr = lr_schedule(step, total_steps, cfg.stage2_lr, cfg.warmup_fraction)
        model.zero_grad()
        scale = 1.0 / len(batch)
        loss = 0.0
        for ex in batch:
            ex = _jitter_item(ex, cfg.aug_noise, cfg.aug_rotate, aug_rng)
            loss += example_loss(model, ex, cfg.tau, scale)
            if cfg.joint_pre_loss and ex.speech is not None:
                loss += _alignment_step(model, ex.speech, cfg.tau, scale)
        opt.step(lr)
        report.append({
            "step": step,
            "stage": "fine",
            "lr": lr,
            "loss": float(loss / len(batch)),
            "task": TaskType(batch[0].task).value,
        })
    model.set_frozen(())
    return report


def asr_head_stage(model, utterances, cfg, report=None):
    """Train the cascade's CTC head on encoder output with everything else
    frozen; the embedding paths are untouched by construction."""
    cfg.validate()
    report = report if report is not None else []
    if cfg.asr_epochs <= 0:
        return report
    frozen = tuple(p.name.split(".")[0] for p in model.parameters()
                   if not p.name.startswith("asr_head"))
    model.set_frozen(sorted(set(frozen)))
    asr_cfg = _override(cfg, epochs_per_stage=cfg.asr_epochs)
    _run_stage(model, list(utterances), _ctc_step, stage="asr",
               lr_base=cfg.asr_lr, cfg=asr_cfg, report=report,
               task_of=lambda _: "ctc_asr")
    model.set_frozen(())
    return report


def _override(cfg, **kw):
    d = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    d.update(kw)
    return TrainConfig(**d)


def freeze_schedule_projection_baseline(stage):
    """Freeze masks for the projection baseline's three-stage schedule over
    the projection-path components (the CTC head is not part of that path and
    stays frozen throughout).

    stage 1: only the adapter trains; stage 2: adapter + speech encoder;
    stage 3: the whole projection pipeline.
    """
    if stage == 1:
        return ("text_encoder", "speech_encoder", "scale_head", "asr_head")
    if stage == 2:
        return ("text_encoder", "scale_head", "asr_head")
    if stage == 3:
        return ("asr_head",)
    raise RangeError(f"projection baseline stage must be 1, 2, or 3, got {stage}")


def train_projection_baseline(model, examples, cfg, report=None):
    """Train a clone of the model through the projection path under the
    three-stage freezing schedule; the original model is untouched."""
    cfg.validate()
    report = report if report is not None else []
    arm = model.clone()
    if cfg.projection_epochs <= 0:
        return arm, report
    retrieval = [ex for ex in examples
                 if TaskType(ex.task) in (TaskType.RETRIEVAL, TaskType.RERANKING)]
    proj_cfg = _override(cfg, epochs_per_stage=cfg.projection_epochs)
    for stage in (1, 2, 3):
        arm.set_frozen(freeze_schedule_projection_baseline(stage))
        _run_stage(
            arm, retrieval,
            lambda m, ex, tau, scale: example_loss(m, ex, tau, scale,
                                                   query_fn=m.project_to_text),
            stage="projection", lr_base=cfg.projection_lr,
            cfg=_override(proj_cfg, seed=proj_cfg.seed + stage), report=report,
            task_of=lambda ex: TaskType(ex.task).value,
        )
    arm.set_frozen(())
    return arm, report


def train_all(model, dataset, examples, cfg, ablate="none", report=None):
    """Run the selected stages. ``only1`` stops after alignment, ``only2``
    skips it; the CTC head phase rides along with stage 2."""
    if ablate not in ("none", "only1", "only2"):
        raise ConfigError(f"train: unknown ablation mode {ablate!r}")
    cfg.validate()
    report = report if report is not None else []
    stages_run = []
    if ablate in ("none", "only1"):
        pretrain_stage(model, dataset.train_utts, cfg, report)
        stages_run.append("pre")
    if ablate in ("none", "only2"):
        finetune_stage(model, examples, cfg, report)
        asr_head_stage(model, dataset.train_utts, cfg, report)
        stages_run.append("fine")
    return stages_run, report


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + params.bin (little-endian float32)


def save_checkpoint(model, out_dir, *, stage, steps, config_hash=""):
    os.makedirs(out_dir, exist_ok=True)
    params = model.parameters()
    entries = []
    blob = bytearray()
    for p in params:
        raw = np.ascontiguousarray(p.value.astype("<f4")).tobytes()
        entries.append({
            "name": p.name,
            "rows": int(p.value.shape[0]),
            "cols": int(p.value.shape[1]),
            "offset": len(blob),
            "nbytes": len(raw),
        })
        blob.extend(raw)
    manifest = {
        "format_version": 1,
        "stage": stage,
        "steps": steps,
        "config_hash": config_hash,
        "seed": model.config.seed,
        "model": {
            "vocab_size": model.config.vocab_size,
            "d_s": model.config.d_s,
            "d_t": model.config.d_t,
            "d_e": model.config.d_e,
            "adapter_hidden": model.config.adapter_hidden,
            "kernel": model.config.kernel,
            "stride": model.config.stride,
            "seed": model.config.seed,
        },
        "params": entries,
        "total_bytes": len(blob),
        "params_sha256": model.params_sha256(),
    }
    with open(os.path.join(out_dir, CHECKPOINT_MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, CHECKPOINT_BLOB), "wb") as fh:
        fh.write(bytes(blob))
    return manifest


def load_checkpoint(ckpt_dir):
    """Rebuild the model from a checkpoint directory; offsets must tile the
    blob exactly."""
    with open(os.path.join(ckpt_dir, CHECKPOINT_MANIFEST), encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(os.path.join(ckpt_dir, CHECKPOINT_BLOB), "rb") as fh:
        blob = fh.read()
    if manifest["total_bytes"] != len(blob):
        raise CheckpointError(
            f"blob is {len(blob)} bytes, manifest says {manifest['total_bytes']}"
        )
    cursor = 0
    model = CrossModalModel(ModelConfig(**manifest["model"]))
    by_name = {p.name: p for p in model.parameters()}
    for entry in manifest["params"]:
        if entry["offset"] != cursor:
            raise CheckpointError(f"offset gap before {entry['name']}")
        cursor += entry["nbytes"]
        p = by_name.get(entry["name"])
        if p is None or p.value.shape != (entry["rows"], entry["cols"]):
            raise CheckpointError(f"unexpected parameter {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=entry["rows"] * entry["cols"],
                            offset=entry["offset"])
        p.value = arr.reshape(entry["rows"], entry["cols"]).copy()
        p.zero_grad()
    if cursor != len(blob):
        raise CheckpointError("blob has trailing bytes beyond the manifest")
    return model, manifest


def write_report_jsonl(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
