"""Exact cosine top-k retrieval, the cascaded ASR-pipeline simulator with
seeded WER injection, the task-suite evaluator, and latency benchmarking.

Search is brute force over the whole index (corpora are small here), which
makes oracle tests exact and keeps the comparison between pipelines about
the pipelines, not the index structure.
"""

import json
import os
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .data import topic_label_docs
from .errors import (
    DatasetError,
    DegenerateVectorError,
    EmptyTranscriptError,
    RangeError,
)
from .losses import ctc_greedy_decode
from .tensor import cosine_sim

METHODS = ("text_only", "asr_pipeline", "project_to_text", "ctc_align", "ours")

INDEX_MANIFEST = "manifest.json"
INDEX_BLOB = "vectors.bin"


# ---------------------------------------------------------------------------
# index


@dataclass
class RetrievalIndex:
    doc_ids: list
    matrix: np.ndarray  # (n, d_e) float32, unit rows
    model_hash: str

    @property
    def size(self):
        return len(self.doc_ids)


def build_index(docs, model):
    """Embed every document, L2-normalize, and stack in corpus order."""
    if not docs:
        raise DatasetError("build_index: empty corpus")
    rows = []
    for doc in docs:
        vec, _ = model.embed_doc(doc)
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise DegenerateVectorError(f"document {doc.doc_id} embeds to zero")
        rows.append((vec / norm).astype(np.float32))
    return RetrievalIndex(
        doc_ids=[doc.doc_id for doc in docs],
        matrix=np.stack(rows),
        model_hash=model.params_sha256(),
    )


def search_topk(index, query_vec, k):
    """Exact top-k by cosine score, ties broken by ascending doc_id."""
    n = index.size
    if k < 1 or k > n:
        raise RangeError(f"search_topk: k={k} outside [1, {n}]")
    q = np.asarray(query_vec, dtype=np.float32).reshape(-1)
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise DegenerateVectorError("search_topk: zero-norm query")
    scores = index.matrix @ (q / norm)
    ids = np.asarray(index.doc_ids)
    order = np.lexsort((ids, -scores))
    return [(int(ids[i]), float(scores[i])) for i in order[:k]]


def save_index(index, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    blob = np.ascontiguousarray(index.matrix.astype("<f4")).tobytes()
    manifest = {
        "format_version": 1,
        "doc_ids": list(index.doc_ids),
        "rows": int(index.matrix.shape[0]),
        "cols": int(index.matrix.shape[1]),
        "model_hash": index.model_hash,
        "total_bytes": len(blob),
    }
    with open(os.path.join(out_dir, INDEX_MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, INDEX_BLOB), "wb") as fh:
        fh.write(blob)


def load_index(in_dir):
    with open(os.path.join(in_dir, INDEX_MANIFEST), encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(os.path.join(in_dir, INDEX_BLOB), "rb") as fh:
        blob = fh.read()
    if len(blob) != manifest["total_bytes"]:
        raise DatasetError("index blob size disagrees with manifest")
    matrix = np.frombuffer(blob, dtype="<f4").reshape(
        manifest["rows"], manifest["cols"]).copy()
    return RetrievalIndex(doc_ids=manifest["doc_ids"], matrix=matrix,
                          model_hash=manifest["model_hash"])


# ---------------------------------------------------------------------------
# cascaded pipeline with WER injection
#
# Corruption draws one (uniform, replacement) pair per token position from a
# stream keyed by (seed, utterance); a token is substituted iff its uniform
# draw falls below the WER. The corruption sets are therefore nested across a
# WER sweep, so degradation is structural, not a sampling accident.


def corrupt_tokens(tokens, wer, seed, vocab_size, stream_key=0):
    if not (0.0 <= wer <= 1.0):
        raise RangeError(f"wer must be in [0,1], got {wer}")
    rng = np.random.default_rng([int(seed), int(stream_key) & 0xFFFFFFFF, 0xC0])
    out = []
    for tok in tokens:
        u = rng.random()
        repl = int(rng.integers(0, vocab_size - 1))
        if repl >= tok:
            repl += 1  # uniform over the vocabulary minus the original token
        out.append(repl if u < wer else int(tok))
    return out


def cascaded_pipeline(utterance, wer, model, *, seed=0):
    """ASR decode, seeded token corruption, then text embedding. Raises
    EmptyTranscriptError when nothing decodes (callers count it as a miss)."""
    log_probs, _ = model.asr_log_probs(utterance.frames)
    decoded = ctc_greedy_decode(log_probs)
    if not decoded:
        raise EmptyTranscriptError(f"utterance {utterance.utt_id} decoded to nothing")
    corrupted = corrupt_tokens(decoded, wer, seed, model.config.vocab_size,
                               stream_key=zlib.crc32(utterance.utt_id.encode()))
    vec, _ = model.embed_text_tokens(corrupted)
    return vec


# ---------------------------------------------------------------------------
# query routing per method tag


def query_vector(model, utterance, method, *, wer=0.0, seed=0):
    """Embed one query along the route named by the method tag. The ours and
    ctc_align routes never touch the WER parameter."""
    if method in ("ours", "ctc_align"):
        return model.embed_speech(utterance)[0]
    if method == "text_only":
        return model.embed_text_tokens(utterance.tokens)[0]
    if method == "project_to_text":
        return model.project_to_text(utterance)[0]
    if method == "asr_pipeline":
        return cascaded_pipeline(utterance, wer, model, seed=seed)
    raise RangeError(f"unknown method {method!r}; expected one of {METHODS}")


# ---------------------------------------------------------------------------
# evaluation report


@dataclass
class EvalReport:
    method: str
    top1_acc: float
    top3_acc: float
    task_scores: dict
    latency: dict
    n_docs: int
    n_queries: int
    wer: float
    model_hash: str
    config_hash: str = ""

    def __post_init__(self):
        if self.top3_acc < self.top1_acc:
            raise DatasetError("top3 accuracy cannot be below top1")

    def to_dict(self):
        return {
            "method": self.method,
            "top1_acc": self.top1_acc,
            "top3_acc": self.top3_acc,
            "task_scores": dict(self.task_scores),
            "latency": dict(self.latency),
            "n_docs": self.n_docs,
            "n_queries": self.n_queries,
            "wer": self.wer,
            "model_hash": self.model_hash,
            "config_hash": self.config_hash,
        }


def stable_report_dict(report_dict):
    """The report minus its wall-clock fields, for hashing and bit-level
    comparison across runs."""
    d = dict(report_dict)
    d.pop("latency", None)
    return d


def _best_threshold_accuracy(scores, labels):
    order = np.argsort(scores)
    scores = np.asarray(scores)[order]
    labels = np.asarray(labels)[order]
    candidates = np.concatenate(([scores[0] - 1.0],
                                 (scores[:-1] + scores[1:]) / 2.0,
                                 [scores[-1] + 1.0]))
    best = 0.0
    for thr in candidates:
        acc = float(np.mean((scores > thr) == (labels > 0.5)))
        best = max(best, acc)
    return best


def eval_suite(model, docs, queries, method, *, wer=0.0, seed=0,
               rerank_candidates=10, index=None):
    """Top-1/Top-3 retrieval plus the reranking / pair-classification /
    classification task scores, all along the method's query route."""
    if not queries:
        raise DatasetError("eval_suite: empty query set")
    doc_ids = {d.doc_id for d in docs}
    for q in queries:
        if q.source_doc not in doc_ids:
            raise DatasetError(f"query {q.utt_id} has no gold document in the corpus")
    # only the cascade consumes the WER parameter; recording the effective
    # value keeps end-to-end reports bit-identical across a WER sweep
    wer = wer if method == "asr_pipeline" else 0.0
    if index is None:
        index = build_index(docs, model)
    by_id = {d.doc_id: d for d in docs}
    labels = topic_label_docs(docs)
    label_vecs = []
    for lab in labels:
        v, _ = model.embed_doc(lab)
        label_vecs.append(v / np.linalg.norm(v))
    label_topics = [lab.semantic_seed for lab in labels]

    rng = np.random.default_rng([int(seed), 0xE7A])
    hits1 = hits3 = 0
    rr_total = 0.0
    pair_scores, pair_labels = [], []
    cls_hits = 0
    timings = []
    k3 = min(3, index.size)
    for q in queries:
        t0 = time.perf_counter()
        try:
            vec = query_vector(model, q, method, wer=wer, seed=seed)
        except EmptyTranscriptError:
            timings.append(time.perf_counter() - t0)
            rr_total += 0.0
            pair_scores.extend([0.0, 0.0])
            pair_labels.extend([1.0, 0.0])
            continue
        top = search_topk(index, vec, k3)
        timings.append(time.perf_counter() - t0)
        ranked_ids = [doc_id for doc_id, _ in top]
        if ranked_ids and ranked_ids[0] == q.source_doc:
            hits1 += 1
        if q.source_doc in ranked_ids:
            hits3 += 1

        # reranking: gold among seeded distractors, scored then reshuffled
        gold = by_id[q.source_doc]
        others = [d for d in docs if d.doc_id != q.source_doc]
        chosen = [others[i] for i in
                  rng.choice(len(others), size=min(rerank_candidates - 1, len(others)),
                             replace=False)]
        candidates = [gold] + chosen
        order = rng.permutation(len(candidates))
        candidates = [candidates[i] for i in order]
        scored = []
        for d in candidates:
            dv, _ = model.embed_doc(d)
            scored.append((cosine_sim(vec, dv), d.doc_id))
        scored.sort(key=lambda t: (-t[0], t[1]))
        rank = 1 + [doc_id for _, doc_id in scored].index(q.source_doc)
        rr_total += 1.0 / rank

        # pair classification: (query, gold) vs (query, random other)
        rand_doc = others[int(rng.integers(0, len(others)))]
        gv, _ = model.embed_doc(gold)
        rv, _ = model.embed_doc(rand_doc)
        pair_scores.extend([cosine_sim(vec, gv), cosine_sim(vec, rv)])
        pair_labels.extend([1.0, 0.0])

        # classification: nearest topic-label embedding
        sims = [float(np.dot(vec / np.linalg.norm(vec), lv)) for lv in label_vecs]
        if label_topics[int(np.argmax(sims))] == by_id[q.source_doc].semantic_seed:
            cls_hits += 1

    n = len(queries)
    top1 = hits1 / n
    top3 = hits3 / n
    return EvalReport(
        method=method,
        top1_acc=top1,
        top3_acc=top3,
        task_scores={
            "retrieval": top1,
            "reranking": rr_total / n,
            "pair_classification": _best_threshold_accuracy(pair_scores, pair_labels),
            "classification": cls_hits / n,
        },
        latency={
            "mean_s": float(np.mean(timings)),
            "median_s": float(np.median(timings)),
            "n_queries": n,
        },
        n_docs=len(docs),
        n_queries=n,
        wer=wer,
        model_hash=index.model_hash,
    )


# ---------------------------------------------------------------------------
# latency benchmark


def bench_latency(model, utterances, repeats=20, warmup=3, methods=METHODS):
    """Median/mean wall-clock per query per method; the first ``warmup``
    repeats are discarded. Both pipelines are measured identically."""
    if repeats < 5:
        raise RangeError(f"bench_latency: repeats must be >= 5, got {repeats}")
    stats = {}
    for method in methods:
        samples = []
        for rep in range(warmup + repeats):
            for utt in utterances:
                t0 = time.perf_counter()
                try:
                    query_vector(model, utt, method, wer=0.0, seed=0)
                except EmptyTranscriptError:
                    pass  # decode cost still counts
                dt = time.perf_counter() - t0
                if rep >= warmup:
                    samples.append(dt)
        stats[method] = {
            "median_s": float(np.median(samples)),
            "mean_s": float(np.mean(samples)),
            "n_samples": len(samples),
        }
    result = {"methods": stats}
    if "ours" in stats and "asr_pipeline" in stats:
        result["ours_vs_asr_ratio"] = (
            stats["ours"]["median_s"] / stats["asr_pipeline"]["median_s"]
        )
    return result


# ---------------------------------------------------------------------------
# human-readable table (Method / Time(s) / Top1 / Top3)


def format_eval_table(reports):
    rows = [("Method", "Time(s)", "Top1-Acc.", "Top3-Acc.")]
    for rep in reports:
        d = rep.to_dict() if isinstance(rep, EvalReport) else rep
        rows.append((
            d["method"],
            f"{d['latency']['median_s']:.4f}",
            f"{100.0 * d['top1_acc']:.2f}",
            f"{100.0 * d['top3_acc']:.2f}",
        ))
    widths = [max(len(r[c]) for r in rows) for c in range(4)]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)))
        if i == 0:
            lines.append("  ".join("-" * widths[c] for c in range(4)))
    return "\n".join(lines)
