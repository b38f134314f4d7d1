"""Dense 2-D kernels with explicit forward/backward pairs.

Conventions: a sequence is a C-contiguous array with one frame per row,
float32 in production paths. Every differentiable op comes as a pair:
``op(...)`` for the forward value and ``op_backward(...)`` which takes the
upstream gradient and returns input gradients; gradients of trainable
parameters accumulate into :class:`ParamTensor.grad`. There is no tape;
layers compose these pairs by hand, which keeps the numerics auditable.
"""

import numpy as np

from .errors import (
    DegenerateVectorError,
    DimensionError,
    EmptySequenceError,
    NumericError,
    SequenceTooShortError,
)

SQRT_2_OVER_PI = 0.7978845608028654
GELU_CUBIC = 0.044715


def tensor2d(data, dtype=np.float32):
    """Coerce ``data`` to a finite, C-contiguous 2-D array."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {arr.shape}")
    _require_finite("tensor2d", arr)
    return arr


def _require_finite(op, arr):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: produced non-finite values")


class ParamTensor:
    """A named trainable 2-D value paired with a same-shape gradient buffer.

    ``accumulate`` is a no-op while ``trainable`` is False, which is what
    makes freeze masks airtight: frozen parameters never see gradients, so
    neither their values nor their optimizer moments can move.
    """

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name, value, dtype=np.float32):
        self.name = name
        self.value = tensor2d(value, dtype)
        self.grad = np.zeros_like(self.value)
        self.trainable = True

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        # np.zeros_like (not fill) so dtype promotions of .value carry over
        self.grad = np.zeros_like(self.value)

    def accumulate(self, g):
        if self.trainable:
            self.grad += g

    def accumulate_rows(self, rows, g):
        """Scatter-add ``g`` into the given rows (embedding-table backward)."""
        if self.trainable:
            np.add.at(self.grad, rows, g)

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.value.shape})"


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a @ b
    _require_finite("matmul", out)
    return out


def matmul_backward(a, b, d_out):
    """Return (dA, dB) for C = A @ B given dC."""
    return d_out @ b.T, a.T @ d_out


# ---------------------------------------------------------------------------
# GELU (tanh approximation; derivative is closed-form)


def gelu(x):
    """0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3))), elementwise."""
    inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)
    out = 0.5 * x * (1.0 + np.tanh(inner))
    _require_finite("gelu", out)
    return out


def gelu_backward(x, d_out):
    inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)
    t = np.tanh(inner)
    d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
    return d_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)


# ---------------------------------------------------------------------------
# temporal 1-D convolution over frames
#
# The kernel maps k concatenated input frames to one output frame:
# kernel.value has shape (k * d_in, d_out), bias.value (1, d_out).


def conv_output_length(t_in, k, s):
    if s < 1:
        raise DimensionError(f"conv1d: stride must be >= 1, got {s}")
    if t_in < k:
        raise SequenceTooShortError(f"conv1d: sequence length {t_in} < kernel {k}")
    return (t_in - k) // s + 1


def _conv_window_index(t_in, k, s):
    t_out = conv_output_length(t_in, k, s)
    return np.arange(t_out)[:, None] * s + np.arange(k)[None, :]


def conv1d(seq, kernel, bias, k, s):
    t_in, d_in = seq.shape
    if kernel.value.shape[0] != k * d_in:
        raise DimensionError(
            f"conv1d: kernel rows {kernel.value.shape[0]} != k*d_in {k * d_in}"
        )
    idx = _conv_window_index(t_in, k, s)
    windows = seq[idx].reshape(idx.shape[0], k * d_in)
    out = matmul(windows, kernel.value) + bias.value
    _require_finite("conv1d", out)
    return out


def conv1d_backward(seq, kernel, bias, k, s, d_out):
    """Accumulate kernel/bias gradients and return the input gradient."""
    t_in, d_in = seq.shape
    idx = _conv_window_index(t_in, k, s)
    windows = seq[idx].reshape(idx.shape[0], k * d_in)
    kernel.accumulate(windows.T @ d_out)
    bias.accumulate(d_out.sum(axis=0, keepdims=True))
    d_windows = d_out @ kernel.value.T
    d_seq = np.zeros_like(seq)
    np.add.at(d_seq, idx, d_windows.reshape(idx.shape[0], k, d_in))
    return d_seq


# ---------------------------------------------------------------------------
# mean pooling over frames


def mean_pool(seq):
    if seq.shape[0] == 0:
        raise EmptySequenceError("mean_pool: empty sequence")
    out = seq.mean(axis=0, keepdims=True)
    _require_finite("mean_pool", out)
    return out


def mean_pool_backward(n_rows, d_out):
    """Distribute the pooled gradient as 1/N to every frame."""
    return np.repeat(d_out / n_rows, n_rows, axis=0)


# ---------------------------------------------------------------------------
# cosine similarity between two vectors


def cosine_sim(u, v):
    u = np.asarray(u).reshape(-1)
    v = np.asarray(v).reshape(-1)
    if u.shape != v.shape:
        raise DimensionError(f"cosine_sim: widths differ {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine_sim: zero-norm input")
    return float(u @ v) / (nu * nv)


def cosine_sim_backward(u, v, d_s):
    """Return (du, dv) for s = cos(u, v) given upstream scalar gradient d_s."""
    u = np.asarray(u).reshape(-1)
    v = np.asarray(v).reshape(-1)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    s = (u @ v) / (nu * nv)
    du = d_s * (v / (nu * nv) - s * u / (nu * nu))
    dv = d_s * (u / (nu * nv) - s * v / (nv * nv))
    return du, dv


# ---------------------------------------------------------------------------
# numerically stable log-sum-exp


def log_sum_exp(values):
    """Max-shifted log(sum(exp(values))); exact for singleton inputs."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptySequenceError("log_sum_exp: empty input")
    m = arr.max()
    if not np.isfinite(m):
        # all -inf stays -inf (log-domain zero); +inf propagates
        return float(m)
    return float(m + np.log(np.exp(arr - m).sum()))


# ---------------------------------------------------------------------------
# row-wise log-softmax (plumbing for the CTC head)


def log_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    _require_finite("log_softmax_rows", out)
    return out


def log_softmax_rows_backward(y, d_out):
    """Backward for y = log_softmax(x) rows, given y and dY."""
    return d_out - np.exp(y) * d_out.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
#
# Production values are float32; the check promotes parameters to float64 so
# that rounding noise does not mask genuine math errors.


def check_gradients(params, run, h=1e-3, rtol=1e-4, atol=1e-6):
    """Compare analytic gradients against central finite differences.

    ``run(want_grads)`` must return the scalar loss computed from the current
    parameter values, and accumulate analytic gradients into the parameters
    when ``want_grads`` is True. Returns a list of failure tuples
    ``(name, max_abs_err, max_allowed)``; an empty list means the check
    passed. An element passes when ``|a - n| <= max(atol, rtol * max(|a|,|n|))``.
    """
    saved = [(p, p.value) for p in params]
    for p in params:
        p.value = p.value.astype(np.float64)
        p.zero_grad()
    try:
        run(True)
        analytic = {p.name: p.grad.copy() for p in params}
        failures = []
        for p in params:
            numeric = np.zeros_like(p.value)
            flat_v = p.value.reshape(-1)
            flat_n = numeric.reshape(-1)
            for i in range(flat_v.size):
                orig = flat_v[i]
                flat_v[i] = orig + h
                loss_plus = run(False)
                flat_v[i] = orig - h
                loss_minus = run(False)
                flat_v[i] = orig
                flat_n[i] = (loss_plus - loss_minus) / (2.0 * h)
            a = analytic[p.name]
            err = np.abs(a - numeric)
            allowed = np.maximum(atol, rtol * np.maximum(np.abs(a), np.abs(numeric)))
            if (err > allowed).any():
                worst = int(np.argmax(err - allowed))
                failures.append((p.name, float(err.reshape(-1)[worst]), float(allowed.reshape(-1)[worst])))
        return failures
    finally:
        for p, v in saved:
            p.value = v
            p.zero_grad()
