"""The cross-modal model: toy encoders, Conv1D+MLP adapter, shared scaling
head, ASR head, and the composed embedding paths.

Every forward method returns ``(output, backward)`` where ``backward`` takes
the upstream gradient, accumulates parameter gradients, and returns the input
gradient. Paths are composed by chaining these closures; there is no tape.
"""

import copy
import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    EmptySequenceError,
    VocabularyError,
)
from .tensor import (
    ParamTensor,
    conv1d,
    conv1d_backward,
    conv_output_length,
    gelu,
    gelu_backward,
    log_softmax_rows,
    log_softmax_rows_backward,
    matmul,
    matmul_backward,
    mean_pool,
    mean_pool_backward,
)


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_s: int = 32  # speech feature width
    d_t: int = 64  # text feature width (adapter output)
    d_e: int = 128  # shared retrieval embedding width
    adapter_hidden: int = 64
    kernel: int = 5
    stride: int = 4
    seed: int = 1

    def validate(self):
        if self.d_e <= self.d_t:
            raise ConfigError(
                f"model: d_e ({self.d_e}) must exceed d_t ({self.d_t}); "
                "the scaling head widens the embedding"
            )
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError("model: kernel and stride must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("model: vocab_size must be >= 2")
        return self


def _init(rng, rows, cols, scale=None):
    if scale is None:
        scale = 1.0 / np.sqrt(rows)
    return (rng.standard_normal((rows, cols)) * scale).astype(np.float32)


def _identity_init(rng, d_in, d_out, gain=1.0, noise=0.05):
    """Identity-dominant weights: tiled identity blocks plus a little noise.

    Keeps every layer information-preserving at initialization, so the
    untrained pipelines start from sane geometry instead of a random
    projection. ``gain`` compensates for the GELU small-signal slope of 1/2
    where one follows the layer.
    """
    w = rng.standard_normal((d_in, d_out)) * (noise / np.sqrt(d_in))
    blocks = max(1, d_out // d_in)
    for b in range(blocks):
        lo = b * d_in
        if lo + d_in > d_out:
            break
        w[:, lo:lo + d_in] += gain * np.eye(d_in) / np.sqrt(blocks)
    if d_out < d_in:
        w[:d_out, :] += gain * np.eye(d_out)
    return w.astype(np.float32)


class Affine:
    """Row-wise x @ W + b with hand-written backward."""

    def __init__(self, prefix, rng, d_in, d_out, init=None):
        weights = init if init is not None else _init(rng, d_in, d_out)
        self.w = ParamTensor(f"{prefix}.w", weights)
        self.b = ParamTensor(f"{prefix}.b", np.zeros((1, d_out), dtype=np.float32))

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        out = matmul(x, self.w.value) + self.b.value

        def backward(d_out):
            dx, dw = matmul_backward(x, self.w.value, d_out)
            self.w.accumulate(dw)
            self.b.accumulate(d_out.sum(axis=0, keepdims=True))
            return dx

        return out, backward


class TextEncoder:
    """Embedding-table lookup plus one trainable affine+GELU mixing layer."""

    def __init__(self, rng, vocab_size, d_t):
        self.vocab_size = vocab_size
        self.table = ParamTensor("text_encoder.table",
                                 _init(rng, vocab_size, d_t, scale=1.0 / np.sqrt(d_t)))
        self.mix = Affine("text_encoder.mix", rng, d_t, d_t,
                          init=_identity_init(rng, d_t, d_t, gain=2.0))

    def params(self):
        return [self.table] + self.mix.params()

    def forward_tokens(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size == 0:
            raise EmptySequenceError("text_encoder: empty token sequence")
        if (tokens < 0).any() or (tokens >= self.vocab_size).any():
            bad = int(tokens[(tokens < 0) | (tokens >= self.vocab_size)][0])
            raise VocabularyError(f"text_encoder: token {bad} outside vocab {self.vocab_size}")
        emb = self.table.value[tokens]
        pre, back_mix = self.mix.forward(emb)
        out = gelu(pre)

        def backward(d_out):
            d_emb = back_mix(gelu_backward(pre, d_out))
            self.table.accumulate_rows(tokens, d_emb)
            return d_emb

        return out, backward

    def forward_features(self, frames):
        """Mixing layer applied to raw feature rows (projection-baseline path)."""
        pre, back_mix = self.mix.forward(frames)
        out = gelu(pre)

        def backward(d_out):
            return back_mix(gelu_backward(pre, d_out))

        return out, backward


class SpeechEncoder:
    """Frame-wise affine+GELU transform; preserves sequence length."""

    def __init__(self, rng, d_s):
        self.mix = Affine("speech_encoder.mix", rng, d_s, d_s,
                          init=_identity_init(rng, d_s, d_s, gain=2.0))

    def params(self):
        return self.mix.params()

    def forward(self, frames):
        if frames.shape[0] == 0:
            raise EmptySequenceError("speech_encoder: empty frame sequence")
        pre, back_mix = self.mix.forward(frames)
        out = gelu(pre)

        def backward(d_out):
            return back_mix(gelu_backward(pre, d_out))

        return out, backward


class Adapter:
    """Temporal Conv1D for length reduction followed by a two-layer GELU MLP
    projecting into the text feature width."""

    def __init__(self, rng, d_s, d_t, hidden, kernel, stride):
        self.kernel = kernel
        self.stride = stride
        # conv starts as a window average landing in the first d_s columns
        conv = rng.standard_normal((kernel * d_s, d_t)) * (0.05 / np.sqrt(kernel * d_s))
        for slot in range(kernel):
            conv[slot * d_s:(slot + 1) * d_s, :min(d_s, d_t)] += (
                np.eye(d_s)[:, :min(d_s, d_t)] / kernel
            )
        self.conv_w = ParamTensor("adapter.conv.w", conv.astype(np.float32))
        self.conv_b = ParamTensor("adapter.conv.b", np.zeros((1, d_t), dtype=np.float32))
        self.mlp1 = Affine("adapter.mlp1", rng, d_t, hidden,
                           init=_identity_init(rng, d_t, hidden))
        self.mlp2 = Affine("adapter.mlp2", rng, hidden, d_t,
                           init=_identity_init(rng, hidden, d_t, gain=2.0))

    def params(self):
        return [self.conv_w, self.conv_b] + self.mlp1.params() + self.mlp2.params()

    def output_length(self, t_in):
        return conv_output_length(t_in, self.kernel, self.stride)

    def forward(self, frames):
        conv_out = conv1d(frames, self.conv_w, self.conv_b, self.kernel, self.stride)
        pre, back1 = self.mlp1.forward(conv_out)
        hidden = gelu(pre)
        out, back2 = self.mlp2.forward(hidden)

        def backward(d_out):
            d_hidden = back2(d_out)
            d_conv = back1(gelu_backward(pre, d_hidden))
            return conv1d_backward(frames, self.conv_w, self.conv_b,
                                   self.kernel, self.stride, d_conv)

        return out, backward


class CrossModalModel:
    """All trainable components plus the composed embedding paths.

    The scaling head is one parameter instance referenced by both the speech
    path and the document path; it is widened (d_e > d_t) by construction.
    """

    def __init__(self, config):
        self.config = config.validate()
        rng = np.random.default_rng([config.seed, 0x40DE1])
        self.text_encoder = TextEncoder(rng, config.vocab_size, config.d_t)
        self.speech_encoder = SpeechEncoder(rng, config.d_s)
        self.adapter = Adapter(rng, config.d_s, config.d_t, config.adapter_hidden,
                               config.kernel, config.stride)
        self.scale_head = Affine("scale_head", rng, config.d_t, config.d_e,
                                 init=_identity_init(rng, config.d_t, config.d_e))
        self.asr_head = Affine("asr_head", rng, config.d_s, config.vocab_size + 1)
        self._params = (
            self.text_encoder.params()
            + self.speech_encoder.params()
            + self.adapter.params()
            + self.scale_head.params()
            + self.asr_head.params()
        )

    # -- parameter plumbing -------------------------------------------------

    def parameters(self):
        return list(self._params)

    def param(self, name):
        for p in self._params:
            if p.name == name:
                return p
        raise KeyError(name)

    def zero_grad(self):
        for p in self._params:
            p.zero_grad()

    def set_frozen(self, prefixes):
        """Freeze every parameter whose name starts with one of ``prefixes``;
        all others become trainable."""
        prefixes = tuple(prefixes)
        for p in self._params:
            p.trainable = not p.name.startswith(prefixes)

    def clone(self):
        return copy.deepcopy(self)

    def params_sha256(self):
        h = hashlib.sha256()
        for p in self._params:
            h.update(np.ascontiguousarray(p.value.astype("<f4")).tobytes())
        return h.hexdigest()

    # -- pooled embedding helpers -------------------------------------------

    def _pool_and_scale(self, seq, back_seq):
        pooled = mean_pool(seq)
        scaled, back_head = self.scale_head.forward(pooled)
        vec = scaled[0]

        def backward(d_vec):
            d_pooled = back_head(np.asarray(d_vec).reshape(1, -1))
            back_seq(mean_pool_backward(seq.shape[0], d_pooled))

        return vec, backward

    # -- embedding paths ------------------------------------------------------

    def adapt_speech(self, frames):
        """speech encoder -> adapter; returns adapted frames (T' x d_t)."""
        enc, back_enc = self.speech_encoder.forward(frames)
        adapted, back_ad = self.adapter.forward(enc)

        def backward(d_adapted):
            back_enc(back_ad(d_adapted))

        return adapted, backward

    def embed_speech(self, utterance):
        """Query path: pool(adapter(speech_encoder(frames))) through the head."""
        adapted, back = self.adapt_speech(utterance.frames)
        return self._pool_and_scale(adapted, back)

    def embed_text_tokens(self, tokens):
        encoded, back = self.text_encoder.forward_tokens(tokens)
        return self._pool_and_scale(encoded, back)

    def embed_doc(self, doc):
        """Key path: pool(text_encoder(tokens)) through the SAME head instance."""
        return self.embed_text_tokens(doc.tokens)

    def project_to_text(self, utterance):
        """Baseline: speech -> adapter -> text-encoder mixing layer, pooled
        and scaled. Adapter output width matches the text encoder's feature
        input width by construction."""
        adapted, back_ad = self.adapt_speech(utterance.frames)
        projected, back_txt = self.text_encoder.forward_features(adapted)

        def back_seq(d_projected):
            back_ad(back_txt(d_projected))

        return self._pool_and_scale(projected, back_seq)

    def asr_log_probs(self, frames):
        """Frame-level log-probabilities over vocab+blank, at full temporal
        resolution (the cascade decodes from encoder output, not the
        stride-compressed adapter output)."""
        enc, back_enc = self.speech_encoder.forward(frames)
        logits, back_head = self.asr_head.forward(enc)
        log_probs = log_softmax_rows(logits)

        def backward(d_lp):
            back_enc(back_head(log_softmax_rows_backward(log_probs, d_lp)))

        return log_probs, backward
