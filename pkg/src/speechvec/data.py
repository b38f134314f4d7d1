"""Synthetic paired speech/text corpus with controllable speaker variation.

Documents are drawn from latent topic clusters so retrieval has signal.
Speech is synthesized directly in feature space: each token maps to a fixed
generation embedding, gets rotated by a per-voice orthogonal transform, is
repeated for a seeded number of frames, and receives Gaussian noise. All
generation is a pure function of (arguments, seed).
"""

import base64
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import (
    DatasetError,
    EmptySequenceError,
    ParameterError,
    RangeError,
    VocabularyError,
)
from .losses import TaskType

VOICE_COUNT = 6
FRAMES_PER_TOKEN_MIN = 2
FRAMES_PER_TOKEN_MAX = 6
# quality_score = clamp(5 - QUALITY_NOISE_SLOPE * noise_sigma, 1, 5); the
# [1, 5] range matches the usual perceptual-MOS scale so a 3.0 threshold
# transfers literally.
QUALITY_NOISE_SLOPE = 20.0

# fixed entropy prefixes so generation tables are frozen forever,
# independent of corpus seeds
_TOKEN_TABLE_KEY = 0x5EED_7AB1
_VOICE_BASE_KEY = 0xBA5E_0001
_VOICE_JITTER_KEY = 0x701C_E5


@dataclass
class Document:
    doc_id: int
    tokens: list
    semantic_seed: int  # topic cluster id; shared by related documents


@dataclass
class SpeechUtterance:
    utt_id: str
    frames: np.ndarray  # (T, d_s) float32
    voice_id: int
    quality_score: float
    phoneme_durations: list  # frames per spoken token; sums to T
    source_doc: int
    tokens: list  # the spoken token sequence

    @property
    def n_frames(self):
        return int(self.frames.shape[0])


@dataclass
class TrainExample:
    task: TaskType
    speech: SpeechUtterance | None
    transcript: list
    positive: Document | None
    negatives: list = field(default_factory=list)
    graded_pairs: list | None = None  # [(item, item, label)] items are docs/utterances


# ---------------------------------------------------------------------------
# fixed generation tables


@lru_cache(maxsize=8)
def token_feature_table(vocab_size, d_s):
    """Generation-side token embeddings, (V, d_s); frozen given (V, d_s).

    Rows are unit vectors pushed apart by a short deterministic repulsion
    pass, the way a phoneme inventory is acoustically spread out; without it
    a random draw leaves near-duplicate tokens that no encoder could tell
    apart. Treat the returned array as read-only (it is cached).
    """
    rng = np.random.default_rng([_TOKEN_TABLE_KEY, vocab_size, d_s])
    table = rng.standard_normal((vocab_size, d_s))
    table /= np.linalg.norm(table, axis=1, keepdims=True)
    for _ in range(200):
        overlaps = table @ table.T
        np.fill_diagonal(overlaps, 0.0)
        weights = np.exp(8.0 * overlaps * overlaps) * overlaps
        step = weights @ table
        table -= 0.1 * step / np.abs(weights).sum(axis=1, keepdims=True).clip(1e-9)
        table /= np.linalg.norm(table, axis=1, keepdims=True)
    table.setflags(write=False)
    return table


def voice_transform(voice_id, d_s, spread=0.35):
    """Orthogonal per-voice transform: a base rotation shared by all voices
    composed with a per-voice Cayley rotation whose angles are bounded by
    2*atan(spread), so speaker variation is real but not a fresh basis."""
    if not (0 <= voice_id < VOICE_COUNT):
        raise RangeError(f"voice_id must be in [0, {VOICE_COUNT - 1}], got {voice_id}")
    base_rng = np.random.default_rng([_VOICE_BASE_KEY, d_s])
    base_q, _ = np.linalg.qr(base_rng.standard_normal((d_s, d_s)))
    jitter_rng = np.random.default_rng([_VOICE_JITTER_KEY, voice_id, d_s])
    a = jitter_rng.standard_normal((d_s, d_s))
    skew = (a - a.T) / 2.0
    skew *= spread / max(np.linalg.norm(skew, 2), 1e-12)
    eye = np.eye(d_s)
    rot = np.linalg.solve(eye + skew, eye - skew)  # Cayley: exactly orthogonal
    return base_q @ rot


# ---------------------------------------------------------------------------
# speech synthesis


def synth_speech(tokens, voice_id, noise_sigma, seed, *, vocab_size=64, d_s=32,
                 voice_spread=0.35, utt_id="u0", source_doc=-1):
    """Expand each token to a seeded number of frames through the voice
    transform and add N(0, noise_sigma^2) noise."""
    tokens = [int(t) for t in tokens]
    if len(tokens) == 0:
        raise EmptySequenceError("synth_speech: empty token sequence")
    for t in tokens:
        if not (0 <= t < vocab_size):
            raise VocabularyError(f"synth_speech: token {t} outside vocab {vocab_size}")
    if noise_sigma < 0:
        raise ParameterError(f"synth_speech: noise_sigma must be >= 0, got {noise_sigma}")
    table = token_feature_table(vocab_size, d_s)
    transform = voice_transform(voice_id, d_s, voice_spread)
    rng = np.random.default_rng([int(seed)])
    durations = rng.integers(FRAMES_PER_TOKEN_MIN, FRAMES_PER_TOKEN_MAX + 1,
                             size=len(tokens))
    clean = np.repeat((table[tokens] @ transform.T), durations, axis=0)
    frames = clean + noise_sigma * rng.standard_normal(clean.shape)
    quality = float(np.clip(5.0 - QUALITY_NOISE_SLOPE * noise_sigma, 1.0, 5.0))
    return SpeechUtterance(
        utt_id=utt_id,
        frames=frames.astype(np.float32),
        voice_id=int(voice_id),
        quality_score=quality,
        phoneme_durations=[int(d) for d in durations],
        source_doc=int(source_doc),
        tokens=tokens,
    )


# ---------------------------------------------------------------------------
# corpus generation


def _auto_topics(n_docs):
    return int(np.clip(n_docs // 25, 2, 32))


def topic_pools(vocab_size, n_topics, seed):
    """Partition ~75% of the vocabulary into per-topic pools; the rest is a
    shared background pool."""
    rng = np.random.default_rng([int(seed), 0xC1])
    perm = rng.permutation(vocab_size)
    exclusive = max(2, (3 * vocab_size // 4) // n_topics)
    pools = [perm[t * exclusive:(t + 1) * exclusive] for t in range(n_topics)]
    background = perm[n_topics * exclusive:]
    if background.size == 0:
        background = perm[-max(2, vocab_size // 8):]
    return pools, background


def gen_corpus(n_docs, vocab_size, seed, n_topics=None, doc_len=(6, 24),
               topic_fraction=0.6):
    """Deterministically draw ``n_docs`` documents from latent topic clusters.

    Each document mixes tokens from its topic pool (cluster signal, shared
    with same-topic documents) with tokens from the shared background pool
    (the document's individual signature)."""
    if n_docs < 1:
        raise ParameterError(f"gen_corpus: n_docs must be >= 1, got {n_docs}")
    if vocab_size < 8:
        raise ParameterError(f"gen_corpus: vocab_size must be >= 8, got {vocab_size}")
    if n_topics is None or n_topics <= 0:
        n_topics = _auto_topics(n_docs)
    n_topics = min(n_topics, n_docs)
    pools, background = topic_pools(vocab_size, n_topics, seed)
    rng = np.random.default_rng([int(seed), 0xD0C5])
    lo, hi = doc_len
    docs = []
    for doc_id in range(n_docs):
        topic = doc_id % n_topics
        length = int(rng.integers(lo, hi + 1))
        choose_topic = rng.random(length) < topic_fraction
        toks = np.where(
            choose_topic,
            rng.choice(pools[topic], size=length),
            rng.choice(background, size=length),
        )
        docs.append(Document(doc_id=doc_id, tokens=[int(t) for t in toks],
                             semantic_seed=topic))
    return docs


def _break_adjacent_repeats(tokens):
    """Reorder the multiset so no two neighbours are equal whenever that is
    feasible (greedy most-frequent-first scheduling). A spoken query never
    repeats a word back to back; acoustically such a repeat would collapse
    into one longer token."""
    toks = list(tokens)
    remaining = {}
    order = {}
    for i, t in enumerate(toks):
        remaining[t] = remaining.get(t, 0) + 1
        order.setdefault(t, i)
    out = []
    prev = None
    for _ in range(len(toks)):
        ranked = sorted(remaining, key=lambda t: (-remaining[t], order[t]))
        pick = next((t for t in ranked if t != prev), ranked[0])
        out.append(pick)
        remaining[pick] -= 1
        if remaining[pick] == 0:
            del remaining[pick]
        prev = pick
    return out


def related_query(doc, vocab_size, n_topics, corpus_seed, rng, qlen=(4, 8),
                  own_fraction=0.85):
    """Sample a short query for ``doc``: mostly the document's own tokens
    (distinct ones first, so the query covers its source), the rest from its
    topic pool (via semantic_seed)."""
    pools, _ = topic_pools(vocab_size, n_topics, corpus_seed)
    pool = pools[doc.semantic_seed % n_topics]
    length = int(rng.integers(qlen[0], qlen[1] + 1))
    n_own = max(1, int(round(own_fraction * length)))
    distinct = np.unique(np.asarray(doc.tokens))
    own_toks = rng.choice(distinct, size=min(n_own, distinct.size), replace=False)
    pool_take = min(length - own_toks.size, pool.size)
    pool_toks = rng.choice(pool, size=max(pool_take, 0), replace=False)
    toks = np.concatenate([own_toks, pool_toks]).astype(np.int64)
    rng.shuffle(toks)
    return _break_adjacent_repeats(int(t) for t in toks)


# ---------------------------------------------------------------------------
# dataset bundle: documents + train/eval utterances


@dataclass
class DataConfig:
    docs: int = 200
    vocab_size: int = 64
    topics: int = 0  # 0 = auto (docs // 25, clamped)
    utterances_per_doc: int = 6
    eval_queries_per_doc: int = 2
    noise_lo: float = 0.02
    noise_hi: float = 0.08
    voice_spread: float = 0.35
    query_len_lo: int = 4  # training utterances; short ones sharpen alignment
    query_len_hi: int = 8
    eval_query_len_lo: int = 0  # 0 = inherit query_len_lo/hi
    eval_query_len_hi: int = 0
    doc_len_lo: int = 6
    doc_len_hi: int = 24
    doc_topic_fraction: float = 0.6  # rest of each document is its signature
    query_own_fraction: float = 0.85  # queries drawn mostly from the document
    d_s: int = 32
    seed: int = 17

    @property
    def n_topics(self):
        return self.topics if self.topics > 0 else _auto_topics(self.docs)

    @property
    def eval_qlen(self):
        lo = self.eval_query_len_lo or self.query_len_lo
        hi = self.eval_query_len_hi or self.query_len_hi
        return lo, hi


@dataclass
class Dataset:
    docs: list
    train_utts: list
    eval_utts: list
    config: DataConfig


def _make_utterances(docs, cfg, per_doc, rng, tag, qlen=None, cycle_voices=False):
    """One speech utterance per (doc, j). With ``cycle_voices`` each document
    is spoken across all six voices in turn (training coverage); otherwise
    the voice is drawn per utterance."""
    qlen = qlen or (cfg.query_len_lo, cfg.query_len_hi)
    utts = []
    for doc in docs:
        for j in range(per_doc):
            tokens = related_query(
                doc, cfg.vocab_size, cfg.n_topics, cfg.seed, rng, qlen=qlen,
                own_fraction=cfg.query_own_fraction,
            )
            sigma = float(rng.uniform(cfg.noise_lo, cfg.noise_hi))
            voice = j % VOICE_COUNT if cycle_voices else int(rng.integers(0, VOICE_COUNT))
            utts.append(synth_speech(
                tokens,
                voice_id=voice,
                noise_sigma=sigma,
                seed=int(rng.integers(0, 2**62)),
                vocab_size=cfg.vocab_size,
                d_s=cfg.d_s,
                voice_spread=cfg.voice_spread,
                utt_id=f"{tag}{doc.doc_id:05d}.{j}",
                source_doc=doc.doc_id,
            ))
    return utts


def build_dataset(cfg):
    """Generate the full corpus bundle deterministically from ``cfg``."""
    docs = gen_corpus(cfg.docs, cfg.vocab_size, cfg.seed, cfg.n_topics,
                      doc_len=(cfg.doc_len_lo, cfg.doc_len_hi),
                      topic_fraction=cfg.doc_topic_fraction)
    train_rng = np.random.default_rng([cfg.seed, 0x7121])
    eval_rng = np.random.default_rng([cfg.seed, 0xE7A1])
    train_utts = _make_utterances(docs, cfg, cfg.utterances_per_doc, train_rng, "t",
                                  cycle_voices=True)
    eval_utts = _make_utterances(docs, cfg, cfg.eval_queries_per_doc, eval_rng, "q",
                                 qlen=cfg.eval_qlen)
    return Dataset(docs=docs, train_utts=train_utts, eval_utts=eval_utts, config=cfg)


# ---------------------------------------------------------------------------
# topic label documents (for classification/clustering tasks)

LABEL_DOC_BASE_ID = 1_000_000


def topic_label_docs(docs, top_k=6):
    """One pseudo-document per topic holding its most frequent tokens."""
    by_topic = {}
    for doc in docs:
        counts = by_topic.setdefault(doc.semantic_seed, {})
        for t in doc.tokens:
            counts[t] = counts.get(t, 0) + 1
    labels = []
    for topic in sorted(by_topic):
        counts = by_topic[topic]
        top = sorted(counts, key=lambda t: (-counts[t], t))[:top_k]
        labels.append(Document(doc_id=LABEL_DOC_BASE_ID + topic, tokens=top,
                               semantic_seed=topic))
    return labels


# ---------------------------------------------------------------------------
# training example construction
#
# Negative mining: one hard negative from the same topic cluster plus
# ``random_negatives`` drawn from the whole corpus.


def _sample_negatives(doc, docs, by_topic, rng, hard=1, random_negatives=6):
    negs = []
    mates = [d for d in by_topic[doc.semantic_seed] if d.doc_id != doc.doc_id]
    for _ in range(hard):
        if mates:
            negs.append(mates[int(rng.integers(0, len(mates)))])
    while len(negs) < hard + random_negatives:
        cand = docs[int(rng.integers(0, len(docs)))]
        if cand.doc_id != doc.doc_id:
            negs.append(cand)
    return negs


def build_train_examples(dataset, seed, aux_every=8):
    """Turn the corpus into task-typed examples. Every train utterance yields
    a retrieval example; every ``aux_every``-th also feeds one auxiliary task
    so all six loss routes stay exercised."""
    docs = dataset.docs
    by_id = {d.doc_id: d for d in docs}
    by_topic = {}
    for d in docs:
        by_topic.setdefault(d.semantic_seed, []).append(d)
    labels = topic_label_docs(docs)
    label_by_topic = {lab.semantic_seed: lab for lab in labels}
    rng = np.random.default_rng([int(seed), 0xE8])
    examples = []
    aux_cycle = [TaskType.RERANKING, TaskType.STS, TaskType.PAIR_CLASSIFICATION,
                 TaskType.CLASSIFICATION, TaskType.CLUSTERING]
    for i, utt in enumerate(dataset.train_utts):
        doc = by_id[utt.source_doc]
        negs = _sample_negatives(doc, docs, by_topic, rng)
        examples.append(TrainExample(
            task=TaskType.RETRIEVAL, speech=utt, transcript=list(utt.tokens),
            positive=doc, negatives=negs,
        ))
        if i % aux_every != 0:
            continue
        aux = aux_cycle[(i // aux_every) % len(aux_cycle)]
        if aux is TaskType.RERANKING:
            hard = _sample_negatives(doc, docs, by_topic, rng, hard=3,
                                     random_negatives=4)
            examples.append(TrainExample(
                task=aux, speech=utt, transcript=list(utt.tokens),
                positive=doc, negatives=hard,
            ))
        elif aux in (TaskType.STS, TaskType.PAIR_CLASSIFICATION):
            mates = [d for d in by_topic[doc.semantic_seed] if d.doc_id != doc.doc_id]
            mate = mates[int(rng.integers(0, len(mates)))] if mates else doc
            rand = docs[int(rng.integers(0, len(docs)))]
            if aux is TaskType.STS:
                pairs = [(utt, doc, 2.0), (utt, mate, 1.0), (utt, rand, 0.0)]
            else:
                pairs = [(utt, doc, 1.0), (utt, rand, 0.0)]
            examples.append(TrainExample(
                task=aux, speech=utt, transcript=list(utt.tokens),
                positive=doc, graded_pairs=pairs,
            ))
        else:
            pos_label = label_by_topic[doc.semantic_seed]
            neg_labels = [lab for lab in labels if lab.semantic_seed != doc.semantic_seed]
            examples.append(TrainExample(
                task=aux, speech=utt, transcript=list(utt.tokens),
                positive=pos_label, negatives=neg_labels,
            ))
    return examples


# ---------------------------------------------------------------------------
# line-delimited JSON persistence
#
# Frame matrices travel as base64-wrapped little-endian float32 with explicit
# rows/cols so readers never have to guess the layout.


def frames_to_obj(frames):
    arr = np.ascontiguousarray(frames.astype("<f4"))
    return {
        "rows": int(arr.shape[0]),
        "cols": int(arr.shape[1]),
        "b64": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def frames_from_obj(obj):
    raw = base64.b64decode(obj["b64"])
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != obj["rows"] * obj["cols"]:
        raise DatasetError(
            f"frame blob holds {arr.size} floats, expected {obj['rows']}x{obj['cols']}"
        )
    return arr.reshape(obj["rows"], obj["cols"]).copy()


def save_documents(docs, path):
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps({
                "doc_id": doc.doc_id,
                "tokens": doc.tokens,
                "semantic_seed": doc.semantic_seed,
            }, sort_keys=True) + "\n")


def load_documents(path):
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            docs.append(Document(doc_id=obj["doc_id"], tokens=obj["tokens"],
                                 semantic_seed=obj["semantic_seed"]))
    return docs


def save_utterances(utts, path):
    with open(path, "w", encoding="utf-8") as fh:
        for u in utts:
            fh.write(json.dumps({
                "utt_id": u.utt_id,
                "voice_id": u.voice_id,
                "quality_score": u.quality_score,
                "phoneme_durations": u.phoneme_durations,
                "source_doc": u.source_doc,
                "tokens": u.tokens,
                "frames": frames_to_obj(u.frames),
            }, sort_keys=True) + "\n")


def load_utterances(path):
    utts = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            utts.append(SpeechUtterance(
                utt_id=obj["utt_id"],
                frames=frames_from_obj(obj["frames"]).astype(np.float32),
                voice_id=obj["voice_id"],
                quality_score=obj["quality_score"],
                phoneme_durations=obj["phoneme_durations"],
                source_doc=obj["source_doc"],
                tokens=obj["tokens"],
            ))
    return utts
