import numpy as np
import pytest

from gapflow.autodiff import GradTape, Tensor
from gapflow.backbone import SdtConfig, init_params
from gapflow.flow import (
    anytime_query,
    clamp_observed,
    insert_virtual_frame,
    masked_fm_loss,
    masked_sq_sum,
    ode_sample,
    remove_virtual_frame,
    sample_path,
    target_velocity,
)


def tiny_cfg():
    return SdtConfig(
        depth=1, hidden=16, patch=2, heads=2, bands=2, sar_channels=1,
        height=8, width=8, date_span=60,
    )


def rand_setup(seed=0, t=4, b=None):
    rng = np.random.default_rng(seed)
    shape = (t, 2, 8, 8) if b is None else (b, t, 2, 8, 8)
    mshape = (t, 1, 8, 8) if b is None else (b, t, 1, 8, 8)
    y = rng.normal(size=shape)
    m = (rng.random(mshape) < 0.4).astype(float)
    x = np.where(m == 1, 1.0, y)
    dates = np.sort(rng.choice(60, size=t, replace=False))
    return y, m, x, dates, rng


# -- path and velocity -------------------------------------------------------------


def test_sample_path_endpoints_exact():
    y, _, _, _, rng = rand_setup()
    eps = rng.normal(size=y.shape)
    np.testing.assert_array_equal(sample_path(y, eps, 0.0), y)
    np.testing.assert_array_equal(sample_path(y, eps, 1.0), eps)


def test_sample_path_midpoint():
    y, _, _, _, rng = rand_setup(1)
    eps = rng.normal(size=y.shape)
    np.testing.assert_allclose(sample_path(y, eps, 0.5), 0.5 * y + 0.5 * eps, atol=1e-15)


def test_sample_path_rejects_bad_tau():
    y, _, _, _, rng = rand_setup(2)
    with pytest.raises(ValueError):
        sample_path(y, y, 1.5)


def test_target_velocity_identities():
    y, _, _, _, rng = rand_setup(3)
    eps = rng.normal(size=y.shape)
    np.testing.assert_array_equal(target_velocity(y, y), np.zeros_like(y))
    np.testing.assert_array_equal(target_velocity(np.zeros_like(eps), eps), eps)
    # constant along the path: the target does not involve tau at all
    np.testing.assert_array_equal(target_velocity(y, eps), target_velocity(y, eps))


# -- clamping ------------------------------------------------------------------------


def test_clamp_all_masked_returns_path_state():
    y, _, _, _, rng = rand_setup(4)
    y_tau = rng.normal(size=y.shape)
    z = clamp_observed(y_tau, y, np.ones((4, 1, 8, 8)))
    np.testing.assert_array_equal(z, y_tau)


def test_clamp_all_observed_returns_x_bitwise():
    y, _, x, _, rng = rand_setup(5)
    y_tau = rng.normal(size=y.shape)
    z = clamp_observed(y_tau, x, np.zeros((4, 1, 8, 8)))
    np.testing.assert_array_equal(z, x)


def test_clamp_mixed_elementwise():
    y, m, x, _, rng = rand_setup(6)
    y_tau = rng.normal(size=y.shape)
    z = clamp_observed(y_tau, x, m)
    sel = np.broadcast_to(m == 1, y.shape)
    np.testing.assert_array_equal(z[sel], y_tau[sel])
    np.testing.assert_array_equal(z[~sel], x[~sel])


def test_clamp_rejects_non_binary_mask():
    with pytest.raises(ValueError):
        clamp_observed(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), np.full((1, 1, 2, 2), 0.5))


# -- masked loss ------------------------------------------------------------------------


def test_loss_zero_when_prediction_matches():
    y, m, _, _, rng = rand_setup(7)
    v = Tensor(y)
    assert masked_fm_loss(v, y, m).item() == 0.0


def test_loss_zero_under_empty_mask_with_counter():
    counters = {}
    v = Tensor(np.ones((2, 1, 4, 4)))
    loss = masked_fm_loss(v, np.zeros((2, 1, 4, 4)), np.zeros((2, 1, 4, 4)), counters)
    assert loss.item() == 0.0
    assert counters["empty_mask_batches"] == 1


def test_loss_single_masked_pixel_hand_value():
    # one masked pixel, one band, residual 2 -> squared residual 4
    m = np.zeros((1, 1, 2, 2))
    m[0, 0, 0, 0] = 1.0
    pred = Tensor(np.zeros((1, 1, 2, 2)))
    target = np.zeros((1, 1, 2, 2))
    target[0, 0, 0, 0] = 2.0
    assert masked_fm_loss(pred, target, m).item() == pytest.approx(4.0)


def test_loss_counts_broadcast_bands():
    m = np.zeros((1, 1, 2, 2))
    m[0, 0, 0, 0] = 1.0
    pred = Tensor(np.zeros((1, 3, 2, 2)))
    target = np.ones((1, 3, 2, 2))
    sq, count = masked_sq_sum(pred, target, m)
    assert count == 3
    assert masked_fm_loss(pred, target, m).item() == pytest.approx(1.0)


def test_loss_gradient_gated_by_mask():
    y, m, _, _, rng = rand_setup(8)
    pred = Tensor(rng.normal(size=y.shape), requires_grad=True)
    with GradTape() as tape:
        loss = masked_fm_loss(pred, y, m)
    tape.backward(loss)
    observed = np.broadcast_to(m == 0, y.shape)
    np.testing.assert_array_equal(pred.grad[observed], 0.0)
    assert np.any(pred.grad[~observed] != 0.0)


# -- sampler ---------------------------------------------------------------------------------


def test_sampler_identity_when_nothing_masked():
    cfg = tiny_cfg()
    params = init_params(cfg, seed=0, zero_init_gates=False)
    y, _, _, dates, rng = rand_setup(9)
    m = np.zeros((4, 1, 8, 8))
    for seed in [0, 7]:
        for steps in [1, 5]:
            out = ode_sample(y, m, params, cfg, dates, n_steps=steps, seed=seed)
            np.testing.assert_array_equal(out, y)


def test_sampler_teacher_oracle_single_step_exact():
    # constant velocity field: Euler is exact in one step
    y, m, x, dates, rng = rand_setup(10)
    seed = 123
    eps = np.random.default_rng(seed).standard_normal(x[None].shape)[0]
    field = eps - y

    out = ode_sample(
        x, m, {}, None, dates, n_steps=1, seed=seed, velocity_fn=lambda z, tau: field
    )
    sel = np.broadcast_to(m == 1, y.shape)
    assert np.abs(out[sel] - y[sel]).max() < 1e-10
    np.testing.assert_array_equal(out[~sel], x[~sel])


@pytest.mark.parametrize("solver,steps", [("euler", 5), ("euler", 20), ("heun", 5)])
def test_sampler_teacher_oracle_multi_step(solver, steps):
    y, m, x, dates, rng = rand_setup(11)
    seed = 55
    eps = np.random.default_rng(seed).standard_normal(x[None].shape)[0]
    out = ode_sample(
        x, m, {}, None, dates, n_steps=steps, solver=solver, seed=seed,
        velocity_fn=lambda z, tau: eps - y,
    )
    sel = np.broadcast_to(m == 1, y.shape)
    assert np.abs(out[sel] - y[sel]).max() < 1e-10


def test_sampler_seeds_differ_only_on_masked_pixels():
    cfg = tiny_cfg()
    params = init_params(cfg, seed=1, zero_init_gates=False)
    y, m, x, dates, rng = rand_setup(12)
    sar = rng.normal(size=(3, 1, 8, 8))
    sar_dates = np.sort(rng.choice(60, size=3, replace=False))
    a = ode_sample(x, m, params, cfg, dates, sar, sar_dates, n_steps=3, seed=1)
    b = ode_sample(x, m, params, cfg, dates, sar, sar_dates, n_steps=3, seed=2)
    sel = np.broadcast_to(m == 1, y.shape)
    np.testing.assert_array_equal(a[~sel], b[~sel])
    assert np.any(a[sel] != b[sel])


def test_sampler_clamping_invariant_randomized():
    cfg = tiny_cfg()
    params = init_params(cfg, seed=2, zero_init_gates=False)
    rng = np.random.default_rng(13)
    for trial in range(5):
        y, m, x, dates, _ = rand_setup(100 + trial, t=3)
        steps = int(rng.choice([1, 5, 20]))
        out = ode_sample(x, m, params, cfg, dates, n_steps=steps, seed=trial)
        sel = np.broadcast_to(m == 1, y.shape)
        np.testing.assert_array_equal(out[~sel], x[~sel])


def test_sampler_validates_arguments():
    y, m, x, dates, _ = rand_setup(14)
    with pytest.raises(ValueError):
        ode_sample(x, m, {}, None, dates, n_steps=0, velocity_fn=lambda z, t: z)
    with pytest.raises(ValueError):
        ode_sample(x, m, {}, None, dates, solver="rk4", velocity_fn=lambda z, t: z)


# -- anytime querying ----------------------------------------------------------------------------


def test_insert_then_remove_virtual_frame_round_trip():
    y, m, x, dates, _ = rand_setup(15)
    q_date = int(dates[0]) + 1 if int(dates[0]) + 1 not in dates else int(dates[0]) + 2
    x2, m2, dates2, idx = insert_virtual_frame(x, m, dates, q_date)
    assert x2.shape[0] == x.shape[0] + 1
    np.testing.assert_array_equal(x2[idx], 1.0)
    np.testing.assert_array_equal(m2[idx], 1.0)
    x3, m3, dates3 = remove_virtual_frame(x2, m2, dates2, idx)
    np.testing.assert_array_equal(x3, x)
    np.testing.assert_array_equal(m3, m)
    np.testing.assert_array_equal(dates3, dates)


def test_insert_virtual_frame_on_existing_date_masks_it():
    y, m, x, dates, _ = rand_setup(16)
    x2, m2, dates2, idx = insert_virtual_frame(x, m, dates, int(dates[2]))
    assert x2.shape == x.shape
    assert idx == 2
    np.testing.assert_array_equal(m2[2], 1.0)


def test_insert_virtual_frame_rejects_out_of_span():
    y, m, x, dates, _ = rand_setup(17)
    with pytest.raises(ValueError):
        insert_virtual_frame(x, m, dates, int(dates[-1]) + 10)


def test_anytime_query_returns_frame_and_passes_observed_through():
    cfg = tiny_cfg()
    params = init_params(cfg, seed=3, zero_init_gates=False)
    y, m0, x, dates, rng = rand_setup(18)
    m = np.zeros_like(m0)
    q_date = int((dates[0] + dates[1]) // 2)
    if q_date in dates:
        q_date += 1
    frame, recon, idx = anytime_query(y, m, dates, q_date, params, cfg, n_steps=2, seed=0)
    assert frame.shape == (2, 8, 8)
    np.testing.assert_array_equal(np.delete(recon, idx, axis=0), y)
    np.testing.assert_array_equal(recon[idx], frame)
