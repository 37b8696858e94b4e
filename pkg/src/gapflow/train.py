"""Training loop: Adam over the masked flow-matching objective with the anytime
full-frame-masking regime mixed in, multistep learning-rate decay, and
deterministic batch assembly. Sequences of equal (T, Ts) are stacked into one
batched forward; a training step combines all groups of one batch into a
single loss normalized by the total masked-entry count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import GradTape
from .backbone import sdt_forward
from .data import V_FILL, compose_observed, mask_query_frame, sample_mask
from .flow import masked_sq_sum, sample_path, target_velocity, clamp_observed


class TrainingError(RuntimeError):
    """Raised when a step produces a non-finite loss; carries reproduction state."""


@dataclass
class TrainConfig:
    """Optimization defaults: Adam at lr 2e-4 with batch size 16. The full-scale
    schedule runs 3000 epochs; the desk-scale default is 200."""

    lr: float = 2e-4
    batch_size: int = 16
    epochs: int = 200
    lr_milestones: tuple = (150, 180)
    lr_gamma: float = 0.3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    p_anytime: float = 0.5
    v_fill: float = V_FILL
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0 = final only

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported training dtype {self.dtype!r}")


def lr_at_epoch(config, epoch):
    """MultiStep decay: multiply by gamma at each milestone epoch."""
    passed = sum(1 for m in config.lr_milestones if epoch >= m)
    return config.lr * config.lr_gamma**passed


class Adam:
    """Adam with bias correction; owns the only in-place writes to parameters."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


@dataclass
class BatchGroup:
    """One same-shape slice of a training batch."""

    y: np.ndarray  # (B, T, C, H, W) clean targets
    x: np.ndarray  # observed composite with fill values
    mask: np.ndarray  # (B, T, 1, H, W)
    dates: np.ndarray  # (B, T)
    sar: np.ndarray  # (B, Ts, Cs, H, W)
    dates_sar: np.ndarray  # (B, Ts)
    tau: np.ndarray  # (B,)
    eps: np.ndarray  # noise, same shape as y
    query_day: np.ndarray  # (B,), NaN where no frame was fully masked


def assemble_batch(records, indices, pool, rng, config):
    """Build same-shape groups for one step: per-frame cloud masks from the
    pool, then with probability p_anytime a uniformly chosen frame is fully
    masked and becomes the query."""
    dtype = np.dtype(config.dtype)
    samples = []
    for i in indices:
        rec = records[i]
        y = rec.optical.values
        n_frames = y.shape[0]
        m = np.maximum(
            rec.mask.values, np.stack([sample_mask(pool, rng) for _ in range(n_frames)])
        )
        x = compose_observed(y, m, config.v_fill)
        query_day = np.nan
        if rng.random() < config.p_anytime:
            q = int(rng.integers(n_frames))
            x, m = mask_query_frame(x, m, q, config.v_fill)
            query_day = float(rec.optical.dates[q])
        tau = rng.random()
        eps = rng.standard_normal(y.shape)
        samples.append((rec, y, x, m, tau, eps, query_day))

    groups = {}
    for rec, y, x, m, tau, eps, query_day in samples:
        key = (y.shape[0], rec.sar.values.shape[0])
        groups.setdefault(key, []).append((rec, y, x, m, tau, eps, query_day))

    out = []
    for key in sorted(groups):
        items = groups[key]
        out.append(
            BatchGroup(
                y=np.stack([it[1] for it in items]).astype(dtype),
                x=np.stack([it[2] for it in items]).astype(dtype),
                mask=np.stack([it[3] for it in items]).astype(dtype),
                dates=np.stack([it[0].optical.dates for it in items]),
                sar=np.stack([it[0].sar.values for it in items]).astype(dtype),
                dates_sar=np.stack([it[0].sar.dates for it in items]),
                tau=np.array([it[4] for it in items]),
                eps=np.stack([it[5] for it in items]).astype(dtype),
                query_day=np.array([it[6] for it in items]),
            )
        )
    return out


def train_step(groups, params, model_cfg, optimizer, lr, state=""):
    """One optimizer step over the combined masked loss of all groups."""
    with GradTape() as tape:
        total_sq = None
        total_count = 0
        for g in groups:
            y_tau = sample_path(g.y, g.eps, g.tau[:, None, None, None, None])
            z = clamp_observed(y_tau, g.x, g.mask)
            v_pred = sdt_forward(
                params,
                model_cfg,
                z,
                g.tau,
                g.dates,
                sar=g.sar,
                dates_sar=g.dates_sar,
                query_day=g.query_day,
            )
            sq, count = masked_sq_sum(v_pred, target_velocity(g.y, g.eps), g.mask)
            total_sq = sq if total_sq is None else total_sq + sq
            total_count += count
        loss = total_sq * (1.0 / max(total_count, 1))
    value = float(loss.item())
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at {state}; rerun with the recorded seed to reproduce")
    tape.backward(loss, leaves=params.values())
    optimizer.step(lr)
    return value


def epoch_batches(records, rng, batch_size):
    """Shuffle, then bucket by (T, Ts) so each batch stacks into one forward;
    every sequence is visited exactly once per epoch."""
    buckets = {}
    for i in rng.permutation(len(records)):
        rec = records[i]
        key = (rec.optical.values.shape[0], rec.sar.values.shape[0])
        buckets.setdefault(key, []).append(int(i))
    batches = []
    for key in sorted(buckets):
        idxs = buckets[key]
        batches.extend(idxs[s : s + batch_size] for s in range(0, len(idxs), batch_size))
    return [batches[j] for j in rng.permutation(len(batches))]


def train(records, pool, params, model_cfg, config, out_dir=None, checkpoint_fn=None):
    """Run the full schedule; returns the loss history [(epoch, loss, lr), ...].

    Deterministic for a fixed config seed: batch order, mask draws, flow times
    and noise all come from one generator consumed in a fixed order.
    """
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    history = []
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        losses = []
        for step, indices in enumerate(epoch_batches(records, rng, config.batch_size)):
            groups = assemble_batch(records, indices, pool, rng, config)
            losses.append(
                train_step(
                    groups,
                    params,
                    model_cfg,
                    optimizer,
                    lr,
                    state=f"epoch {epoch} step {step} seed {config.seed}",
                )
            )
        history.append((epoch, float(np.mean(losses)), lr))
        if (
            checkpoint_fn is not None
            and config.checkpoint_every
            and (epoch + 1) % config.checkpoint_every == 0
        ):
            checkpoint_fn(epoch, params)
    if out_dir is not None:
        write_loss_curve(Path(out_dir) / "loss_curve.csv", history)
    return history


def write_loss_curve(path, history):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "lr"])
        for epoch, loss, lr in history:
            writer.writerow([epoch, f"{loss:.10g}", f"{lr:.10g}"])
