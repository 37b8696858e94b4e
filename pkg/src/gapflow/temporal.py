"""Timestamp machinery: date embeddings, flow-time embedding, day-difference
bucketing with learned per-head bias tables, and rotary rotations over real
acquisition dates.

Dates are integer day offsets from the dataset reference day. All lookups and
embeddings are pure given parameters, so concurrent reads are safe.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, bias_lookup, interleave_lastdim, matmul, silu

# Bucket scheme: exact buckets for |dd| <= 8, log-spaced up to 256 days, one
# overflow bucket per sign. Recorded in checkpoints so saved bias tables are
# never reinterpreted under a different scheme.
N_EXACT = 8
N_LOG = 8  # 7 log-spaced buckets + 1 overflow, per sign
MAX_DISTANCE = 256
N_BUCKETS = 2 * (N_EXACT + N_LOG) + 1  # 33
CENTER_BUCKET = N_EXACT + N_LOG  # 16
BUCKET_SCHEME_VERSION = "exact8-log256-v1"

_LOG_RANGE = np.log(MAX_DISTANCE / N_EXACT)


def bucket_day_diff(day_diff):
    """Map signed day differences to bucket ids in [0, 33).

    Total over all integers, mirror-symmetric about the center bucket, and
    nondecreasing in the day difference.
    """
    dd = np.asarray(day_diff)
    mag = np.abs(dd)
    offset = np.where(mag <= N_EXACT, mag, 0)
    with np.errstate(divide="ignore"):
        log_pos = np.floor(
            np.log(np.maximum(mag, 1) / N_EXACT) / _LOG_RANGE * (N_LOG - 1)
        ).astype(np.int64)
    log_offset = N_EXACT + 1 + np.clip(log_pos, 0, N_LOG - 2)
    offset = np.where(mag > N_EXACT, log_offset, offset)
    offset = np.where(mag > MAX_DISTANCE, N_EXACT + N_LOG, offset)
    bucket = CENTER_BUCKET + np.sign(dd) * offset
    return bucket.astype(np.int64) if bucket.ndim else int(bucket)


def bucket_matrix(dates_q, dates_k):
    """Bucket ids for all query/key date pairs; supports (L,) or batched (B, L) dates."""
    dq = np.asarray(dates_q)
    dk = np.asarray(dates_k)
    return bucket_day_diff(dq[..., :, None] - dk[..., None, :])


def relative_bias(dates_q, dates_k, table):
    """Per-head pre-softmax bias from bucketed day differences.

    ``table`` is a learned (heads, N_BUCKETS) tensor; the result has shape
    (heads, |q|, |k|), or (B, heads, |q|, |k|) for batched date lists.
    """
    return bias_lookup(table, bucket_matrix(dates_q, dates_k))


def zero_bias_table(heads, dtype=np.float64):
    """Zero-initialized table: attention starts unbiased."""
    return Tensor(np.zeros((heads, N_BUCKETS), dtype=dtype), requires_grad=True)


# -- sinusoidal date encoder ----------------------------------------------------


def date_embed(day, width, span):
    """Sinusoidal date features at width/2 geometric frequencies.

    Periods run from 2 days up to twice the date span; sin/cos interleaved so
    day 0 maps to [0, 1, 0, 1, ...]. Accepts scalar or array ``day`` and
    returns shape (..., width). Plain numpy: the encoder is not learned.
    """
    if width % 2:
        raise ValueError(f"date embedding width must be even, got {width}")
    periods = np.geomspace(2.0, 2.0 * span, width // 2)
    angle = 2.0 * np.pi * np.asarray(day, dtype=np.float64)[..., None] / periods
    out = np.empty(angle.shape[:-1] + (width,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


def combine_dates(day, query_day, lam_abs, lam_delta, width, span):
    """Absolute plus query-relative date embedding, weighted by learned scalars.

    ``day`` may be scalar or array; ``query_day`` is None outside anytime mode,
    in which case the relative path is dropped entirely (not multiplied by
    zero), so the absolute-only output is bit-identical to the ablation.
    """
    absolute = as_tensor(date_embed(day, width, span))
    out = lam_abs * absolute
    if query_day is not None:
        relative = as_tensor(date_embed(np.asarray(day) - np.asarray(query_day), width, span))
        out = out + lam_delta * relative
    return out


# -- flow-time embedding ----------------------------------------------------------


def flow_time_features(tau, width, scale=1000.0, max_period=10000.0):
    """Sinusoidal features of tau*scale; tau must lie in [0, 1]."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0.0) or np.any(tau > 1.0):
        raise ValueError(f"flow time must lie in [0, 1], got {tau}")
    half = width // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = tau[..., None] * scale * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def flow_time_embed(tau, w1, b1, w2, b2):
    """Two-layer learned map over sinusoidal flow-time features.

    Returns a Tensor of shape (..., M). Gradients flow into the four weight
    tensors; the sinusoidal featurization itself is constant.
    """
    feats = flow_time_features(np.atleast_1d(tau), w1.shape[0]).astype(w1.dtype)
    hidden = silu(matmul(as_tensor(feats), w1) + b1)
    return matmul(hidden, w2) + b2


# -- rotary rotations over real dates -----------------------------------------------


def rope_angles(dates, head_dim, base=10000.0):
    """cos/sin tables for pairwise rotations with angles theta_f * day.

    Returns arrays shaped (..., L, head_dim // 2) for dates shaped (..., L).
    """
    if head_dim % 2:
        raise ValueError(f"rotary rotation needs an even head dim, got {head_dim}")
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half) / half)
    theta = np.asarray(dates, dtype=np.float64)[..., None] * inv_freq
    return np.cos(theta), np.sin(theta)


def rope_apply(x, cos, sin):
    """Rotate interleaved feature pairs of ``x`` (..., L, head_dim) by the given angles.

    ``cos``/``sin`` must broadcast against x[..., 0::2]. Norm-preserving, and
    post-rotation dot products depend on date differences only.
    """
    even = x[..., 0::2]
    odd = x[..., 1::2]
    cos_t = as_tensor(cos)
    sin_t = as_tensor(sin)
    rot_even = even * cos_t - odd * sin_t
    rot_odd = even * sin_t + odd * cos_t
    return interleave_lastdim(rot_even, rot_odd)


def rope_rotate(q, k, dates_q, dates_k, base=10000.0):
    """Rotate query/key tensors (..., L, head_dim) using their real dates."""
    head_dim = q.shape[-1]
    if k.shape[-1] != head_dim:
        raise ValueError(f"query/key head dims differ: {head_dim} vs {k.shape[-1]}")
    cos_q, sin_q = rope_angles(dates_q, head_dim, base)
    cos_k, sin_k = rope_angles(dates_k, head_dim, base)
    return rope_apply(q, cos_q, sin_q), rope_apply(k, cos_k, sin_k)
