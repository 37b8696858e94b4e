"""Sequential denoising transformer over spatio-temporal patch tokens.

Per layer, the block order is: spatial self-attention (within each frame),
temporal self-attention (per patch, biased by bucketed day differences and
rotated by real dates), spatial cross-attention onto time-pooled SAR tokens,
temporal cross-attention onto SAR tokens (cross-sensor day-difference bias),
then an MLP. Every sublayer is a gated-AdaLN residual conditioned on the flow
time, so zero-initialized gates make each block the identity map and a
zero-initialized head makes the whole network output zero at initialization.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    layer_norm,
    load_named_tensors,
    matmul,
    save_named_tensors,
    silu,
)
from .autodiff import gelu, softmax_lastdim
from .temporal import (
    BUCKET_SCHEME_VERSION,
    N_BUCKETS,
    date_embed,
    flow_time_embed,
    relative_bias,
    rope_angles,
    rope_apply,
)

BLOCK_ORDER = "spatial_self/temporal_self/spatial_cross/temporal_cross/mlp"
CHECKPOINT_FORMAT = "gapflow-checkpoint-v1"

SUBLAYERS = ("spatial_self", "temporal_self", "spatial_cross", "temporal_cross")


@dataclass
class SdtConfig:
    """Backbone hyperparameters. Defaults follow the full-scale setting; desk
    runs shrink depth/hidden/height/width through the training config."""

    depth: int = 4
    hidden: int = 256
    patch: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    bands: int = 10
    sar_channels: int = 3
    window: int = 15
    height: int = 128
    width: int = 128
    date_span: int = 430
    spatial_only_fusion: bool = False
    no_rel_bias: bool = False
    lambda_delta_zero: bool = False

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"spatial size {self.height}x{self.width} not divisible by patch {self.patch}"
            )
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.hidden % 4:
            raise ValueError("hidden size must be divisible by 4 for the 2D spatial embedding")
        if (self.hidden // self.heads) % 2:
            raise ValueError("head dimension must be even for rotary rotations")

    @property
    def head_dim(self):
        return self.hidden // self.heads

    @property
    def tokens_per_frame(self):
        return (self.height // self.patch) * (self.width // self.patch)


# -- parameters -------------------------------------------------------------------


def _xavier(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_params(cfg, seed=0, zero_init_gates=True, dtype=np.float64):
    """Build the full named parameter dict.

    ``zero_init_gates=False`` randomizes AdaLN projections and the output head
    too, which is only useful for gradient checks (the default gives the
    identity-at-init property).
    """
    rng = np.random.default_rng(seed)
    m = cfg.hidden
    p2c = cfg.patch * cfg.patch * cfg.bands
    p2cs = cfg.patch * cfg.patch * cfg.sar_channels
    hidden_mlp = int(cfg.hidden * cfg.mlp_ratio)

    def param(value):
        return Tensor(np.asarray(value, dtype=dtype), requires_grad=True)

    def zeros(*shape):
        return param(np.zeros(shape, dtype=dtype))

    def maybe_zeros(*shape):
        if zero_init_gates:
            return zeros(*shape)
        return param(rng.normal(0.0, 0.02, size=shape).astype(dtype))

    params = {}
    params["patch_embed.optical.w"] = param(_xavier(rng, p2c, m, dtype))
    params["patch_embed.optical.b"] = zeros(m)
    params["patch_embed.sar.w"] = param(_xavier(rng, p2cs, m, dtype))
    params["patch_embed.sar.b"] = zeros(m)

    params["time_embed.w1"] = param(rng.normal(0.0, 0.02, size=(m, m)).astype(dtype))
    params["time_embed.b1"] = zeros(m)
    params["time_embed.w2"] = param(rng.normal(0.0, 0.02, size=(m, m)).astype(dtype))
    params["time_embed.b2"] = zeros(m)

    params["dates.lambda_abs"] = param(1.0)
    params["dates.lambda_delta"] = param(0.0 if cfg.lambda_delta_zero else 0.1)
    params["bias.self"] = zeros(cfg.heads, N_BUCKETS)
    params["bias.cross"] = zeros(cfg.heads, N_BUCKETS)

    for layer in range(cfg.depth):
        for sub in SUBLAYERS:
            base = f"blocks.{layer}.{sub}"
            for proj in ("wq", "wk", "wv", "wo"):
                params[f"{base}.{proj}"] = param(_xavier(rng, m, m, dtype))
            for proj in ("bq", "bk", "bv", "bo"):
                params[f"{base}.{proj}"] = zeros(m)
            params[f"{base}.ada.w"] = maybe_zeros(m, 3 * m)
            params[f"{base}.ada.b"] = maybe_zeros(3 * m)
        base = f"blocks.{layer}.mlp"
        params[f"{base}.w1"] = param(_xavier(rng, m, hidden_mlp, dtype))
        params[f"{base}.b1"] = zeros(hidden_mlp)
        params[f"{base}.w2"] = param(_xavier(rng, hidden_mlp, m, dtype))
        params[f"{base}.b2"] = zeros(m)
        params[f"{base}.ada.w"] = maybe_zeros(m, 3 * m)
        params[f"{base}.ada.b"] = maybe_zeros(3 * m)

    params["head.ada.w"] = maybe_zeros(m, 2 * m)
    params["head.ada.b"] = maybe_zeros(2 * m)
    params["head.w"] = maybe_zeros(m, p2c)
    params["head.b"] = maybe_zeros(p2c)
    return params


def parameter_count(cfg):
    """Closed-form learnable-scalar count; a pure function of the config."""
    m = cfg.hidden
    p2c = cfg.patch * cfg.patch * cfg.bands
    p2cs = cfg.patch * cfg.patch * cfg.sar_channels
    hidden_mlp = int(m * cfg.mlp_ratio)
    per_attn = 4 * m * m + 4 * m + m * 3 * m + 3 * m
    per_mlp = m * hidden_mlp + hidden_mlp + hidden_mlp * m + m + m * 3 * m + 3 * m
    total = (p2c * m + m) + (p2cs * m + m)  # patch embeddings
    total += 2 * (m * m + m)  # flow-time MLP
    total += 2  # lambda scalars
    total += 2 * cfg.heads * N_BUCKETS  # bias tables
    total += cfg.depth * (len(SUBLAYERS) * per_attn + per_mlp)
    total += m * 2 * m + 2 * m + m * p2c + p2c  # head
    return total


# -- tokenization ------------------------------------------------------------------


def patchify(x, patch):
    """(B, T, C, H, W) -> (B, T, N, patch*patch*C), row-major over the patch grid."""
    b, t, c, h, w = x.shape
    gh, gw = h // patch, w // patch
    x = x.reshape((b, t, c, gh, patch, gw, patch))
    x = x.transpose((0, 1, 3, 5, 4, 6, 2))
    return x.reshape((b, t, gh * gw, patch * patch * c))


def unpatchify(tokens, patch, channels, height, width):
    """Inverse of :func:`patchify`."""
    b, t, n, _ = tokens.shape
    gh, gw = height // patch, width // patch
    x = tokens.reshape((b, t, gh, gw, patch, patch, channels))
    x = x.transpose((0, 1, 6, 2, 4, 3, 5))
    return x.reshape((b, t, channels, height, width))


def patch_embed(frames, weight, bias, patch):
    """Linear map of each patch to a token; optical and SAR use separate weights."""
    frames = as_tensor(frames)
    if frames.shape[-1] % patch or frames.shape[-2] % patch:
        raise ValueError(f"frame size {frames.shape[-2:]} not divisible by patch {patch}")
    return matmul(patchify(frames, patch), weight) + bias


def _pos_embed_1d(positions, dim):
    omega = 1.0 / 10000 ** (np.arange(dim // 2) / (dim // 2))
    args = np.asarray(positions, dtype=np.float64)[:, None] * omega
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def spatial_pos_embed(grid_h, grid_w, width):
    """Fixed 2D sine/cosine embedding (N, width): first half rows, second half columns."""
    if width % 4:
        raise ValueError(f"embedding width must be divisible by 4, got {width}")
    rows = _pos_embed_1d(np.arange(grid_h), width // 2)
    cols = _pos_embed_1d(np.arange(grid_w), width // 2)
    out = np.empty((grid_h * grid_w, width))
    out[:, : width // 2] = np.repeat(rows, grid_w, axis=0)
    out[:, width // 2 :] = np.tile(cols, (grid_h, 1))
    return out


# -- attention -----------------------------------------------------------------------


def _linear(x, w, b):
    return matmul(x, w) + b


def _split_heads(x, heads):
    """(..., L, M) -> (..., heads, L, M // heads)"""
    *lead, length, m = x.shape
    x = x.reshape(tuple(lead) + (length, heads, m // heads))
    return x.swapaxes(-3, -2)


def _merge_heads(x):
    x = x.swapaxes(-3, -2)
    *lead, length, heads, dh = x.shape
    return x.reshape(tuple(lead) + (length, heads * dh))


def attention(params, prefix, x_q, x_kv, heads, bias=None, rope_q=None, rope_k=None):
    """Multi-head attention over the second-to-last axis, arbitrary leading dims.

    ``bias`` (a Tensor) and the rope cos/sin pairs must broadcast against the
    per-head score and query/key shapes. Rows of the attention matrix are
    stochastic by construction.
    """
    q = _split_heads(_linear(x_q, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), heads)
    k = _split_heads(_linear(x_kv, params[f"{prefix}.wk"], params[f"{prefix}.bk"]), heads)
    v = _split_heads(_linear(x_kv, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), heads)
    if rope_q is not None:
        q = rope_apply(q, *rope_q)
    if rope_k is not None:
        k = rope_apply(k, *rope_k)
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    if bias is not None:
        scores = scores + bias
    weights = softmax_lastdim(scores)
    return _linear(_merge_heads(matmul(weights, v)), params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def adaln_modulated(params, prefix, x, cond, sublayer):
    """Gated-AdaLN residual: x + g(c) * f((1 + gamma(c)) * LN(x) + beta(c)).

    ``x`` is (B, A, L, M); ``cond`` is (B, M). With zero-initialized
    projections the update vanishes and the sublayer is the identity.
    """
    m = x.shape[-1]
    mod = _linear(silu(cond), params[f"{prefix}.ada.w"], params[f"{prefix}.ada.b"])
    shape = (x.shape[0],) + (1,) * (x.ndim - 2) + (m,)
    gamma = mod[:, 0:m].reshape(shape)
    beta = mod[:, m : 2 * m].reshape(shape)
    gate = mod[:, 2 * m : 3 * m].reshape(shape)
    h = layer_norm(x) * (gamma + 1.0) + beta
    return x + gate * sublayer(h)


def _mlp(params, prefix, x):
    h = gelu(_linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return _linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


# -- date conditioning ----------------------------------------------------------------


def _as_batched(dates, batch):
    dates = np.asarray(dates)
    if dates.ndim == 1:
        dates = np.broadcast_to(dates, (batch, dates.size))
    return dates


def frame_date_embedding(params, cfg, dates, query_day):
    """Per-frame date embedding (B, T, M): learned mix of absolute and
    query-relative sinusoidal features.

    ``query_day`` is None (no query anywhere) or a (B,) float array where NaN
    marks samples without a query frame; those rows get a zero relative
    feature, i.e. the relative path is dropped for them. Under the
    query-relative ablation the relative path is skipped entirely, making the
    output bit-identical to the absolute-only embedding.
    """
    m, span = cfg.hidden, cfg.date_span
    dtype = params["dates.lambda_abs"].dtype
    embedding = params["dates.lambda_abs"] * as_tensor(date_embed(dates, m, span).astype(dtype))
    if query_day is None or cfg.lambda_delta_zero:
        return embedding
    query_day = np.asarray(query_day, dtype=np.float64)
    has_query = np.isfinite(query_day)
    offsets = dates - np.where(has_query, query_day, 0.0)[:, None]
    rel = date_embed(offsets, m, span)
    rel[~has_query] = 0.0
    return embedding + params["dates.lambda_delta"] * as_tensor(rel.astype(dtype))


# -- forward -----------------------------------------------------------------------------


def sdt_forward(params, cfg, z, tau, dates_opt, sar=None, dates_sar=None, query_day=None):
    """Predict the masked velocity field for a batch of clamped inputs.

    z: (B, T, C, H, W) clamped composite, tau: (B,) flow times in [0, 1],
    dates_opt: (T,) or (B, T) day integers, sar: optional (B, Ts, Cs, H, W)
    with dates_sar, query_day: optional (B,) with NaN for query-free samples.
    Returns a Tensor of shape (B, T, C, H, W).
    """
    dtype = params["head.w"].dtype
    z = np.asarray(z, dtype=dtype)
    if z.ndim != 5:
        raise ValueError(f"expected (B, T, C, H, W) input, got shape {z.shape}")
    b, t, c, h, w = z.shape
    if c != cfg.bands or h != cfg.height or w != cfg.width:
        raise ValueError(
            f"input {z.shape[2:]} does not match config bands/size "
            f"({cfg.bands}, {cfg.height}, {cfg.width})"
        )
    dates_opt = _as_batched(dates_opt, b)
    grid = spatial_pos_embed(h // cfg.patch, w // cfg.patch, cfg.hidden).astype(dtype)

    tokens = patch_embed(z, params["patch_embed.optical.w"], params["patch_embed.optical.b"], cfg.patch)
    tokens = tokens + as_tensor(grid)
    e_frames = frame_date_embedding(params, cfg, dates_opt, query_day)
    tokens = tokens + e_frames.reshape((b, t, 1, cfg.hidden))

    use_sar = sar is not None and np.asarray(sar).shape[1] > 0
    if use_sar:
        sar = np.asarray(sar, dtype=dtype)
        dates_sar = _as_batched(dates_sar, b)
        ts = sar.shape[1]
        sar_tokens = patch_embed(sar, params["patch_embed.sar.w"], params["patch_embed.sar.b"], cfg.patch)
        sar_tokens = sar_tokens + as_tensor(grid)
        sar_dates_emb = date_embed(dates_sar, cfg.hidden, cfg.date_span).astype(dtype)
        sar_tokens = sar_tokens + as_tensor(sar_dates_emb[:, :, None, :])
        sar_by_patch = sar_tokens.swapaxes(1, 2)  # (B, N, Ts, M)
        sar_pooled = sar_tokens.mean(axis=1).reshape((b, 1, tokens.shape[2], cfg.hidden))

    cond = flow_time_embed(
        tau,
        params["time_embed.w1"],
        params["time_embed.b1"],
        params["time_embed.w2"],
        params["time_embed.b2"],
    )

    cos_q, sin_q = rope_angles(dates_opt, cfg.head_dim)
    cos_q, sin_q = cos_q.astype(dtype), sin_q.astype(dtype)
    rope_opt = (cos_q[:, None, None], sin_q[:, None, None])  # broadcast over (N, heads)
    bias_self = None
    if not cfg.no_rel_bias:
        bias_self = relative_bias(dates_opt, dates_opt, params["bias.self"])
        bias_self = bias_self.reshape((b, 1, cfg.heads, t, t))
        if use_sar and not cfg.spatial_only_fusion:
            bias_cross = relative_bias(dates_opt, dates_sar, params["bias.cross"])
            bias_cross = bias_cross.reshape((b, 1, cfg.heads, t, ts))
    elif use_sar and not cfg.spatial_only_fusion:
        bias_cross = None

    for layer in range(cfg.depth):
        base = f"blocks.{layer}"
        tokens = adaln_modulated(
            params,
            f"{base}.spatial_self",
            tokens,
            cond,
            lambda x: attention(params, f"{base}.spatial_self", x, x, cfg.heads),
        )
        tokens = adaln_modulated(
            params,
            f"{base}.temporal_self",
            tokens.swapaxes(1, 2),
            cond,
            lambda x: attention(
                params,
                f"{base}.temporal_self",
                x,
                x,
                cfg.heads,
                bias=bias_self,
                rope_q=rope_opt,
                rope_k=rope_opt,
            ),
        ).swapaxes(1, 2)
        if use_sar:
            tokens = adaln_modulated(
                params,
                f"{base}.spatial_cross",
                tokens,
                cond,
                lambda x: attention(params, f"{base}.spatial_cross", x, sar_pooled, cfg.heads),
            )
            if not cfg.spatial_only_fusion:
                tokens = adaln_modulated(
                    params,
                    f"{base}.temporal_cross",
                    tokens.swapaxes(1, 2),
                    cond,
                    lambda x: attention(
                        params,
                        f"{base}.temporal_cross",
                        x,
                        sar_by_patch,
                        cfg.heads,
                        bias=bias_cross,
                    ),
                ).swapaxes(1, 2)
        tokens = adaln_modulated(params, f"{base}.mlp", tokens, cond, lambda x: _mlp(params, f"{base}.mlp", x))

    mod = _linear(silu(cond), params["head.ada.w"], params["head.ada.b"])
    m = cfg.hidden
    shape = (b, 1, 1, m)
    gamma = mod[:, 0:m].reshape(shape)
    beta = mod[:, m : 2 * m].reshape(shape)
    h_tok = layer_norm(tokens) * (gamma + 1.0) + beta
    out_tokens = _linear(h_tok, params["head.w"], params["head.b"])
    return unpatchify(out_tokens, cfg.patch, cfg.bands, cfg.height, cfg.width)


# -- checkpoints ---------------------------------------------------------------------------


def save_checkpoint(directory, params, cfg, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_named_tensors(directory / "params", params)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model": asdict(cfg),
        "bucket_scheme": BUCKET_SCHEME_VERSION,
        "block_order": BLOCK_ORDER,
    }
    if extra:
        meta.update(extra)
    with open(directory / "config.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_checkpoint(directory):
    directory = Path(directory)
    with open(directory / "config.json") as f:
        meta = json.load(f)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
    if meta.get("bucket_scheme") != BUCKET_SCHEME_VERSION:
        raise ValueError(
            f"checkpoint bias tables use bucket scheme {meta.get('bucket_scheme')!r}; "
            f"this build implements {BUCKET_SCHEME_VERSION!r}"
        )
    cfg = SdtConfig(**meta["model"])
    arrays = load_named_tensors(directory / "params")
    params = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
    return params, cfg, meta
