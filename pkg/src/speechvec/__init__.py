"""speechvec: end-to-end speech-to-document embedding retrieval at desk scale.

A compact, fully testable system that trains a cross-modal embedding model
(speech encoder, Conv1D+MLP adapter, shared scaling head, text encoder) in two
stages, filters its synthetic corpus, and benchmarks end-to-end retrieval
against a simulated cascaded ASR pipeline for accuracy, error propagation,
and latency.
"""

from .data import (
    DataConfig,
    Dataset,
    Document,
    SpeechUtterance,
    TrainExample,
    build_dataset,
    build_train_examples,
    gen_corpus,
    synth_speech,
)
from .errors import SpeechvecError
from .losses import (
    TaskType,
    cls_contrastive,
    cosent,
    ctc_greedy_decode,
    ctc_loss,
    info_nce,
    mse_align,
    select_loss,
)
from .model import CrossModalModel, ModelConfig
from .optim import AdamW, lr_schedule
from .retrieval import (
    EvalReport,
    RetrievalIndex,
    bench_latency,
    build_index,
    cascaded_pipeline,
    eval_suite,
    search_topk,
)
from .tensor import ParamTensor, cosine_sim, log_sum_exp
from .training import (
    TrainConfig,
    finetune_stage,
    freeze_schedule_projection_baseline,
    load_checkpoint,
    pretrain_stage,
    save_checkpoint,
    train_all,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "CrossModalModel",
    "DataConfig",
    "Dataset",
    "Document",
    "EvalReport",
    "ModelConfig",
    "ParamTensor",
    "RetrievalIndex",
    "SpeechUtterance",
    "SpeechvecError",
    "TaskType",
    "TrainConfig",
    "TrainExample",
    "bench_latency",
    "build_dataset",
    "build_index",
    "build_train_examples",
    "cascaded_pipeline",
    "cls_contrastive",
    "cosent",
    "cosine_sim",
    "ctc_greedy_decode",
    "ctc_loss",
    "eval_suite",
    "finetune_stage",
    "freeze_schedule_projection_baseline",
    "gen_corpus",
    "info_nce",
    "load_checkpoint",
    "log_sum_exp",
    "lr_schedule",
    "mse_align",
    "pretrain_stage",
    "save_checkpoint",
    "search_topk",
    "select_loss",
    "synth_speech",
    "train_all",
    "__version__",
]
