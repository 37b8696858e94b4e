"""Masked flow matching: linear noise path, constant target velocity, observed-
pixel clamping, the masked-MSE objective, and the mask-clamped ODE sampler that
integrates from noise (tau=1) to data (tau=0) while only ever updating masked
pixels. Anytime querying reuses the same machinery through full-frame masks,
inserting a virtual frame when the query date is not an observed timestamp.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor
from .backbone import sdt_forward
from .data import V_FILL, _check_binary


def sample_path(y, eps, tau):
    """Linear path between data and noise: (1 - tau) * y + tau * eps."""
    y = np.asarray(y)
    eps = np.asarray(eps)
    if y.shape != eps.shape:
        raise ValueError(f"data/noise shapes differ: {y.shape} vs {eps.shape}")
    t = np.asarray(tau)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("flow time must lie in [0, 1]")
    return (1.0 - t) * y + t * eps


def target_velocity(y, eps):
    """The path derivative, constant in tau: eps - y."""
    y = np.asarray(y)
    eps = np.asarray(eps)
    if y.shape != eps.shape:
        raise ValueError(f"data/noise shapes differ: {y.shape} vs {eps.shape}")
    return eps - y


def clamp_observed(y_tau, x, mask):
    """Replace known regions by their observed values: m*y_tau + (1-m)*x.

    Observed pixels are bit-identical to x (selection, not arithmetic).
    """
    m = _check_binary(mask)
    y_tau = np.asarray(y_tau)
    x = np.asarray(x)
    return np.where(m == 1.0, y_tau, x)


def masked_sq_sum(v_pred, v_target, mask):
    """Sum of squared residuals over masked entries, and how many there are.

    ``v_pred`` is a graph Tensor; the target and mask are constants, so the
    gradient is exactly zero at every observed entry.
    """
    m = _check_binary(mask)
    diff = v_pred - as_tensor(np.asarray(v_target, dtype=v_pred.dtype))
    masked = diff * as_tensor(m.astype(v_pred.dtype))
    count = int(round(m.sum())) * v_pred.shape[-3]  # mask broadcasts over bands
    return (masked * masked).sum(), count


def masked_fm_loss(v_pred, v_target, mask, counters=None):
    """Mean squared error over masked scalar entries only.

    A batch with zero masked pixels yields loss 0 and bumps a warning counter.
    """
    sq, count = masked_sq_sum(v_pred, v_target, mask)
    if count == 0:
        if counters is not None:
            counters["empty_mask_batches"] = counters.get("empty_mask_batches", 0) + 1
        return as_tensor(np.zeros((), dtype=v_pred.dtype))
    return sq * (1.0 / count)


def _as_batch(x, mask):
    x = np.asarray(x)
    m = np.asarray(mask)
    if x.ndim == 4:  # single sequence
        return x[None], m[None], True
    return x, m, False


def ode_sample(
    x,
    mask,
    params,
    cfg,
    dates_opt,
    sar=None,
    dates_sar=None,
    query_day=None,
    n_steps=20,
    solver="euler",
    seed=0,
    rng=None,
    velocity_fn=None,
):
    """Integrate the masked sampling ODE from tau=1 to tau=0 with uniform steps.

    ``x``/``mask`` may be a single sequence (T, C, H, W)/(T, 1, H, W) or a
    batch with a leading axis. Observed pixels have zero velocity throughout
    and are finally overwritten with x, so output == x there bit-exactly.
    ``velocity_fn(z, tau) -> array`` substitutes the learned field (teacher
    oracles in tests); it is still masked before integration.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if solver not in ("euler", "heun"):
        raise ValueError(f"unknown solver {solver!r}")
    x, m, squeeze = _as_batch(x, mask)
    _check_binary(m)
    if sar is not None and np.asarray(sar).ndim == 4:
        sar = np.asarray(sar)[None]
    if rng is None:
        rng = np.random.default_rng(seed)
    b = x.shape[0]
    dtype = params["head.w"].dtype if params else np.dtype(np.float64)

    y = rng.standard_normal(x.shape).astype(dtype)
    x = x.astype(dtype)
    m = m.astype(dtype)

    def velocity(state, tau):
        z = clamp_observed(state, x, m)
        if velocity_fn is not None:
            return m * np.asarray(velocity_fn(z, tau))
        tau_vec = np.full(b, tau)
        v = sdt_forward(params, cfg, z, tau_vec, dates_opt, sar, dates_sar, query_day)
        return m * v.numpy()

    taus = np.linspace(1.0, 0.0, n_steps + 1)
    for i in range(n_steps):
        dt = float(taus[i + 1] - taus[i])
        v1 = velocity(y, taus[i])
        if solver == "euler":
            y = y + dt * v1
        else:
            v2 = velocity(y + dt * v1, taus[i + 1])
            y = y + dt * 0.5 * (v1 + v2)

    out = np.where(m == 1.0, y, x)
    return out[0] if squeeze else out


def insert_virtual_frame(x, mask, dates, q_date, v_fill=V_FILL):
    """Place an all-masked fill frame at ``q_date`` (or fully mask an existing one).

    Returns (x', m', dates', index). The query date must lie inside the
    sequence's date span; extrapolation is unsupported.
    """
    x = np.asarray(x)
    m = _check_binary(mask)
    dates = np.asarray(dates)
    if not dates[0] <= q_date <= dates[-1]:
        raise ValueError(
            f"query date {q_date} outside the observed span [{dates[0]}, {dates[-1]}]"
        )
    existing = np.nonzero(dates == q_date)[0]
    if existing.size:
        idx = int(existing[0])
        x_out, m_out = x.copy(), m.copy()
        m_out[idx] = 1.0
        x_out[idx] = v_fill
        return x_out, m_out, dates.copy(), idx
    idx = int(np.searchsorted(dates, q_date))
    x_out = np.insert(x, idx, v_fill, axis=0)
    m_out = np.insert(m, idx, 1.0, axis=0)
    dates_out = np.insert(dates, idx, q_date)
    return x_out, m_out, dates_out, idx


def remove_virtual_frame(x, mask, dates, index):
    """Undo :func:`insert_virtual_frame` for a frame that was newly inserted."""
    return (
        np.delete(np.asarray(x), index, axis=0),
        np.delete(np.asarray(mask), index, axis=0),
        np.delete(np.asarray(dates), index),
    )


def anytime_query(
    x,
    mask,
    dates,
    q_date,
    params,
    cfg,
    sar=None,
    dates_sar=None,
    n_steps=20,
    solver="euler",
    seed=0,
    v_fill=V_FILL,
):
    """Generate the frame at an arbitrary in-span date by fully masking it.

    Returns (frame, reconstructed_sequence, index): observed frames pass
    through the sampler unchanged.
    """
    x_q, m_q, dates_q, idx = insert_virtual_frame(x, mask, dates, q_date, v_fill)
    recon = ode_sample(
        x_q,
        m_q,
        params,
        cfg,
        dates_q,
        sar=sar,
        dates_sar=dates_sar,
        query_day=np.asarray([float(q_date)]),
        n_steps=n_steps,
        solver=solver,
        seed=seed,
    )
    return recon[idx], recon, idx
