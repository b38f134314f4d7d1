"""Training objectives: pooled-MSE alignment, InfoNCE, cosent, label
contrastive, task dispatch, and the CTC baseline with greedy decoding.

Every loss comes in two forms: a plain function returning the scalar value,
and a ``*_grad`` companion that also returns gradients with respect to its
inputs. All probability sums run in the log domain.
"""

from enum import Enum

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    EmptySequenceError,
    InfeasibleLengthError,
    ParameterError,
    RangeError,
    VocabularyError,
)
from .tensor import cosine_sim, cosine_sim_backward, log_sum_exp, mean_pool


class TaskType(str, Enum):
    RETRIEVAL = "retrieval"
    RERANKING = "reranking"
    STS = "sts"
    PAIR_CLASSIFICATION = "pair_classification"
    CLASSIFICATION = "classification"
    CLUSTERING = "clustering"


# ---------------------------------------------------------------------------
# alignment loss: squared distance between the two pooled means


def mse_align(speech_seq, text_seq):
    loss, _, _ = mse_align_grad(speech_seq, text_seq)
    return loss


def mse_align_grad(speech_seq, text_seq):
    """Return (loss, d_speech_seq, d_text_seq).

    loss = || mean(speech rows) - mean(text rows) ||^2, gradients flow to
    every row of both sequences.
    """
    if speech_seq.shape[0] == 0 or text_seq.shape[0] == 0:
        raise EmptySequenceError("mse_align: empty sequence")
    if speech_seq.shape[1] != text_seq.shape[1]:
        raise DimensionError(
            f"mse_align: widths differ {speech_seq.shape} vs {text_seq.shape}"
        )
    mean_s = mean_pool(speech_seq)
    mean_t = mean_pool(text_seq)
    diff = mean_s - mean_t
    loss = float((diff * diff).sum())
    t_s = speech_seq.shape[0]
    t_t = text_seq.shape[0]
    d_speech = np.repeat(2.0 * diff / t_s, t_s, axis=0)
    d_text = np.repeat(-2.0 * diff / t_t, t_t, axis=0)
    return loss, d_speech, d_text


# ---------------------------------------------------------------------------
# InfoNCE over cosine similarities


def info_nce(query, key_pos, key_negs, tau):
    loss, _, _, _ = info_nce_grad(query, key_pos, key_negs, tau)
    return loss


def info_nce_grad(query, key_pos, key_negs, tau):
    """Return (loss, d_query, d_key_pos, [d_key_neg...]).

    loss = -log softmax_0([s+, s-...] / tau) with s = cosine similarity;
    computed through log_sum_exp so huge margins cannot overflow.
    """
    if tau <= 0:
        raise ParameterError(f"info_nce: tau must be > 0, got {tau}")
    if len(key_negs) == 0:
        raise ConfigError("info_nce: at least one negative key required")
    sims = [cosine_sim(query, key_pos)]
    sims.extend(cosine_sim(query, k) for k in key_negs)
    logits = np.asarray(sims, dtype=np.float64) / tau
    lse = log_sum_exp(logits)
    loss = float(lse - logits[0])
    probs = np.exp(logits - lse)
    d_sims = probs / tau
    d_sims[0] -= 1.0 / tau
    d_query = np.zeros(np.asarray(query).reshape(-1).shape, dtype=np.float64)
    dq, d_pos = cosine_sim_backward(query, key_pos, d_sims[0])
    d_query += dq
    d_negs = []
    for k, ds in zip(key_negs, d_sims[1:]):
        dq, dk = cosine_sim_backward(query, k, ds)
        d_query += dq
        d_negs.append(dk)
    return loss, d_query, d_pos, d_negs


# ---------------------------------------------------------------------------
# cosent ranking loss over graded pairs


def cosent(items, graded_pairs, tau):
    loss, _ = cosent_grad(items, graded_pairs, tau)
    return loss


def cosent_grad(items, graded_pairs, tau):
    """Return (loss, d_items) for the pairwise ranking loss.

    ``items`` is a list/array of embeddings; ``graded_pairs`` is a list of
    (i, j, label). For every ordered pair-of-pairs whose labels satisfy
    label_a > label_b the margin (cos_b - cos_a)/tau enters
    loss = log(1 + sum exp(margin)). Equal labels contribute nothing, so an
    all-equal instance scores exactly 0.
    """
    if tau <= 0:
        raise ParameterError(f"cosent: tau must be > 0, got {tau}")
    items = [np.asarray(it).reshape(-1) for it in items]
    n = len(items)
    for i, j, _ in graded_pairs:
        if not (0 <= i < n and 0 <= j < n):
            raise RangeError(f"cosent: pair index ({i},{j}) out of range for {n} items")
    cos = [cosine_sim(items[i], items[j]) for i, j, _ in graded_pairs]
    labels = [lab for _, _, lab in graded_pairs]
    p = len(graded_pairs)
    violations = [
        (a, b) for a in range(p) for b in range(p) if labels[a] > labels[b]
    ]
    margins = [(cos[b] - cos[a]) / tau for a, b in violations]
    lse = log_sum_exp([0.0] + margins)
    loss = float(lse)
    d_items = [np.zeros_like(it, dtype=np.float64) for it in items]
    if violations:
        weights = np.exp(np.asarray(margins) - lse)
        d_cos = np.zeros(p)
        for (a, b), w in zip(violations, weights):
            d_cos[b] += w / tau
            d_cos[a] -= w / tau
        for (i, j, _), dc in zip(graded_pairs, d_cos):
            if dc == 0.0:
                continue
            di, dj = cosine_sim_backward(items[i], items[j], dc)
            d_items[i] += di
            d_items[j] += dj
    return loss, d_items


# ---------------------------------------------------------------------------
# label-contrastive loss: InfoNCE against label embeddings


def cls_contrastive(item, label_pos, label_negs, tau):
    return info_nce(item, label_pos, label_negs, tau)


def cls_contrastive_grad(item, label_pos, label_negs, tau):
    return info_nce_grad(item, label_pos, label_negs, tau)


# ---------------------------------------------------------------------------
# task dispatch

_LOSS_BY_TASK = {
    TaskType.RETRIEVAL: info_nce,
    TaskType.RERANKING: info_nce,
    TaskType.STS: cosent,
    TaskType.PAIR_CLASSIFICATION: cosent,
    TaskType.CLASSIFICATION: cls_contrastive,
    TaskType.CLUSTERING: cls_contrastive,
}

# startup exhaustiveness check: dispatch must be total over TaskType
assert set(_LOSS_BY_TASK) == set(TaskType)


def select_loss(task):
    """Map a task type to its loss function (total over TaskType)."""
    try:
        task = TaskType(task)
    except ValueError:
        raise RangeError(f"select_loss: unknown task {task!r}") from None
    return _LOSS_BY_TASK[task]


# ---------------------------------------------------------------------------
# CTC loss (forward algorithm in log domain) and forward-backward gradient
#
# The blank symbol is the LAST column of the log-probability table (index V,
# one past the vocabulary), so vocabulary indices stay stable everywhere else.


def _extend_with_blanks(target, blank):
    ext = [blank]
    for t in target:
        ext.append(int(t))
        ext.append(blank)
    return np.asarray(ext, dtype=np.int64)


def ctc_required_length(target):
    """Minimum number of frames that can emit ``target``."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _validate_ctc_inputs(log_probs, target):
    t_steps, n_cols = log_probs.shape
    blank = n_cols - 1
    target = [int(t) for t in target]
    for t in target:
        if not (0 <= t < blank):
            raise VocabularyError(f"ctc: target token {t} outside [0, {blank})")
    if len(target) == 0:
        raise EmptySequenceError("ctc: empty target")
    needed = ctc_required_length(target)
    if t_steps < needed:
        raise InfeasibleLengthError(
            f"ctc: {t_steps} frames cannot emit target of extended length {needed}"
        )
    return target, blank


def _ctc_alpha(lp, ext, skip_ok):
    """Forward lattice: alpha[t, s] includes the emission at time t."""
    t_steps = lp.shape[0]
    n_states = ext.shape[0]
    alpha = np.full((t_steps, n_states), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if n_states > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_steps):
        stay = alpha[t - 1]
        step = np.full(n_states, -np.inf)
        step[1:] = alpha[t - 1, :-1]
        merged = np.logaddexp(stay, step)
        skip = np.full(n_states, -np.inf)
        skip[2:] = np.where(skip_ok[2:], alpha[t - 1, :-2], -np.inf)
        merged = np.logaddexp(merged, skip)
        alpha[t] = merged + lp[t, ext]
    return alpha


def _ctc_beta(lp, ext, skip_ok):
    """Backward lattice: beta[t, s] covers emissions strictly after t."""
    t_steps = lp.shape[0]
    n_states = ext.shape[0]
    beta = np.full((t_steps, n_states), -np.inf)
    beta[t_steps - 1, n_states - 1] = 0.0
    if n_states > 1:
        beta[t_steps - 1, n_states - 2] = 0.0
    for t in range(t_steps - 2, -1, -1):
        emit_next = lp[t + 1, ext]
        stay = beta[t + 1] + emit_next
        step = np.full(n_states, -np.inf)
        step[:-1] = beta[t + 1, 1:] + emit_next[1:]
        merged = np.logaddexp(stay, step)
        skip = np.full(n_states, -np.inf)
        skip[:-2] = np.where(skip_ok[2:], beta[t + 1, 2:] + emit_next[2:], -np.inf)
        merged = np.logaddexp(merged, skip)
        beta[t] = merged
    return beta


def ctc_loss(log_probs, target):
    """-log P(target | log_probs) marginalized over all alignments."""
    target, blank = _validate_ctc_inputs(log_probs, target)
    lp = np.asarray(log_probs, dtype=np.float64)
    ext = _extend_with_blanks(target, blank)
    skip_ok = np.zeros(ext.shape[0], dtype=bool)
    skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    alpha = _ctc_alpha(lp, ext, skip_ok)
    tail = [alpha[-1, -1]]
    if ext.shape[0] > 1:
        tail.append(alpha[-1, -2])
    return float(-log_sum_exp(tail))


def ctc_loss_grad(log_probs, target):
    """Return (loss, d_log_probs) via the forward-backward recursion.

    The gradient treats each log-probability entry as a free variable:
    dL/d(log p[t, c]) = -exp(LSE_{s: ext[s]=c}(alpha[t,s] + beta[t,s]) - log P).
    Composing with the log-softmax backward recovers the usual
    (softmax - occupancy) form with respect to logits.
    """
    target, blank = _validate_ctc_inputs(log_probs, target)
    lp = np.asarray(log_probs, dtype=np.float64)
    ext = _extend_with_blanks(target, blank)
    skip_ok = np.zeros(ext.shape[0], dtype=bool)
    skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    alpha = _ctc_alpha(lp, ext, skip_ok)
    beta = _ctc_beta(lp, ext, skip_ok)
    tail = [alpha[-1, -1]]
    if ext.shape[0] > 1:
        tail.append(alpha[-1, -2])
    log_total = log_sum_exp(tail)
    loss = float(-log_total)

    occupancy = alpha + beta  # log prob of complete paths through (t, s)
    t_steps, n_cols = lp.shape
    d_lp = np.zeros_like(lp)
    for c in np.unique(ext):
        cols = occupancy[:, ext == c]
        m = cols.max(axis=1)
        finite = m > -np.inf
        row_lse = np.full(t_steps, -np.inf)
        row_lse[finite] = m[finite] + np.log(
            np.exp(cols[finite] - m[finite, None]).sum(axis=1)
        )
        d_lp[:, c] = -np.exp(row_lse - log_total)
    return loss, d_lp.astype(log_probs.dtype, copy=False)


def ctc_greedy_decode(log_probs):
    """Per-frame argmax, collapse repeats, drop blanks.

    Ties break toward the lower token index (argmax returns the first max).
    """
    blank = log_probs.shape[1] - 1
    best = np.argmax(log_probs, axis=1)
    decoded = []
    prev = -1
    for idx in best:
        idx = int(idx)
        if idx != prev and idx != blank:
            decoded.append(idx)
        prev = idx
    return decoded
