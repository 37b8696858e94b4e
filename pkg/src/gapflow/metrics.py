"""Reconstruction metric protocol: masked-pixel MAE / RMSE / SAM / PSNR, SSIM on
frames that contain missing regions, NDVI maps and regional trajectories with
trend agreement, and the per-pixel linear-interpolation baseline.

Pixel-wise metrics pool all bands and score only masked entries; SAM averages
per-pixel angles then takes the global mean. Values are computed in normalized
space unless a caller denormalizes first (NDVI expects physical reflectance).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

FLAT = "flat"  # sentinel for trend agreement between constant trajectories


@dataclass
class MetricReport:
    """The five reported metrics for one sequence (or an aggregate)."""

    mae: float
    rmse: float
    sam_degrees: float
    psnr_db: float
    ssim: float
    n_masked: int
    n_frames_scored: int
    seq_id: str = ""
    space: str = "normalized"


def _masked_values(pred, truth, mask):
    pred, truth, mask = np.asarray(pred), np.asarray(truth), np.asarray(mask)
    sel = np.broadcast_to(mask == 1, pred.shape)
    if not sel.any():
        raise ValueError("metric requires at least one masked pixel")
    return pred[sel], truth[sel]


def mae_rmse_masked(pred, truth, mask):
    """Mean absolute / root mean squared error over masked entries, bands pooled."""
    p, t = _masked_values(pred, truth, mask)
    err = p - t
    return float(np.abs(err).mean()), float(np.sqrt((err**2).mean()))


def sam(pred, truth, mask, counters=None):
    """Mean spectral angle (degrees) over masked pixel spectra.

    Zero-norm spectra on either side are skipped and counted; all-zero input
    is rejected.
    """
    pred, truth, mask = np.asarray(pred), np.asarray(truth), np.asarray(mask)
    pix = mask[:, 0] == 1  # (T, H, W)
    p = pred.transpose(0, 2, 3, 1)[pix]  # (K, C)
    t = truth.transpose(0, 2, 3, 1)[pix]
    if p.shape[0] == 0:
        raise ValueError("spectral angle requires at least one masked pixel")
    norm_p = np.linalg.norm(p, axis=1)
    norm_t = np.linalg.norm(t, axis=1)
    valid = (norm_p > 0) & (norm_t > 0)
    skipped = int(np.count_nonzero(~valid))
    if skipped and counters is not None:
        counters["zero_norm_spectra"] = counters.get("zero_norm_spectra", 0) + skipped
    if not valid.any():
        raise ValueError("all masked spectra have zero norm")
    cosine = (p[valid] * t[valid]).sum(axis=1) / (norm_p[valid] * norm_t[valid])
    angles = np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))
    return float(angles.mean())


PSNR_CAP = 100.0


def psnr(pred, truth, mask, peak=2.0):
    """10 log10(peak^2 / masked MSE), capped at 100 dB for identical images."""
    p, t = _masked_values(pred, truth, mask)
    mse = float(((p - t) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak**2 / mse), PSNR_CAP))


def ssim(pred_frame, truth_frame, dynamic_range=2.0, window=7, k1=0.01, k2=0.03):
    """Structural similarity with a uniform window, averaged over bands.

    Whole-frame computation: callers restrict to frames whose mask is
    non-empty. Frames smaller than the window are rejected.
    """
    pred_frame = np.asarray(pred_frame, dtype=np.float64)
    truth_frame = np.asarray(truth_frame, dtype=np.float64)
    if pred_frame.ndim == 2:
        pred_frame, truth_frame = pred_frame[None], truth_frame[None]
    _, h, w = pred_frame.shape
    if h < window or w < window:
        raise ValueError(f"frame {h}x{w} smaller than the {window}x{window} SSIM window")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    values = []
    for band_p, band_t in zip(pred_frame, truth_frame):
        wp = sliding_window_view(band_p, (window, window))
        wt = sliding_window_view(band_t, (window, window))
        mu_p = wp.mean(axis=(-1, -2))
        mu_t = wt.mean(axis=(-1, -2))
        var_p = (wp**2).mean(axis=(-1, -2)) - mu_p**2
        var_t = (wt**2).mean(axis=(-1, -2)) - mu_t**2
        cov = (wp * wt).mean(axis=(-1, -2)) - mu_p * mu_t
        num = (2 * mu_p * mu_t + c1) * (2 * cov + c2)
        den = (mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2)
        values.append((num / den).mean())
    return float(np.mean(values))


def ndvi(frame, nir_band, red_band, counters=None):
    """(NIR - Red) / (NIR + Red) on physical reflectance; zero-sum pixels give 0."""
    frame = np.asarray(frame)
    nir = frame[nir_band]
    red = frame[red_band]
    den = nir + red
    zero = den == 0
    n_zero = int(np.count_nonzero(zero))
    if n_zero and counters is not None:
        counters["ndvi_zero_denominator"] = counters.get("ndvi_zero_denominator", 0) + n_zero
    out = np.zeros_like(den, dtype=np.float64)
    np.divide(nir - red, den, out=out, where=~zero)
    return out


def ndvi_trajectory(dates, frames, region_mask, nir_band, red_band, counters=None):
    """Regional NDVI summary statistics (mean / median / IQR) per queried date."""
    if len(dates) < 2:
        raise ValueError("a trajectory needs at least two dates")
    region_mask = np.asarray(region_mask, dtype=bool)
    if not region_mask.any():
        raise ValueError("empty region mask")
    stats_out = {"dates": [int(d) for d in dates], "mean": [], "median": [], "iqr": []}
    for frame in frames:
        values = ndvi(frame, nir_band, red_band, counters)[region_mask]
        q25, q75 = np.quantile(values, [0.25, 0.75])
        stats_out["mean"].append(float(values.mean()))
        stats_out["median"].append(float(np.median(values)))
        stats_out["iqr"].append(float(q75 - q25))
    return stats_out


def trend_agreement(means, reference_means):
    """Rank correlation between two per-date trajectories; constant input is 'flat'."""
    a = np.asarray(means, dtype=np.float64)
    b = np.asarray(reference_means, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("trajectories must share a length of at least two")
    if np.std(a) == 0 or np.std(b) == 0:
        return FLAT
    return float(stats.spearmanr(a, b).statistic)


def linear_baseline(x, mask, dates, counters=None):
    """Per-pixel, per-band linear interpolation over real dates.

    Edges use nearest-value extrapolation; pixels observed nowhere fall back
    to the band mean over all observed values (and are counted).
    """
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask)
    dates = np.asarray(dates, dtype=np.float64)
    n_frames, bands, h, w = x.shape
    observed = mask[:, 0] == 0  # (T, H, W)
    out = x.copy()
    band_mean = np.array(
        [x[:, c][observed].mean() if observed.any() else 0.0 for c in range(bands)]
    )
    never = 0
    for u in range(h):
        for v in range(w):
            obs = observed[:, u, v]
            if not obs.any():
                out[:, :, u, v] = band_mean[None, :]
                never += 1
                continue
            if obs.all():
                continue
            d_obs = dates[obs]
            for c in range(bands):
                out[:, c, u, v] = np.interp(dates, d_obs, x[obs, c, u, v])
    if never and counters is not None:
        counters["pixels_never_observed"] = counters.get("pixels_never_observed", 0) + never
    return out


def compute_report(pred, truth, mask, seq_id="", space="normalized", peak=2.0, counters=None):
    """Assemble the full metric report for one sequence."""
    pred, truth, mask = np.asarray(pred), np.asarray(truth), np.asarray(mask)
    mae, rmse = mae_rmse_masked(pred, truth, mask)
    frames = [t for t in range(mask.shape[0]) if mask[t].any()]
    ssim_values = [ssim(pred[t], truth[t], dynamic_range=peak) for t in frames]
    return MetricReport(
        mae=mae,
        rmse=rmse,
        sam_degrees=sam(pred, truth, mask, counters),
        psnr_db=psnr(pred, truth, mask, peak),
        ssim=float(np.mean(ssim_values)),
        n_masked=int(mask.sum()),
        n_frames_scored=len(frames),
        seq_id=seq_id,
        space=space,
    )


def aggregate_reports(reports, seq_id="aggregate"):
    """Unweighted mean of per-sequence metrics."""
    return MetricReport(
        mae=float(np.mean([r.mae for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        sam_degrees=float(np.mean([r.sam_degrees for r in reports])),
        psnr_db=float(np.mean([r.psnr_db for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        n_masked=int(np.sum([r.n_masked for r in reports])),
        n_frames_scored=int(np.sum([r.n_frames_scored for r in reports])),
        seq_id=seq_id,
        space=reports[0].space,
    )


_CSV_FIELDS = [
    "seq_id",
    "mae",
    "rmse",
    "sam_degrees",
    "psnr_db",
    "ssim",
    "n_masked",
    "n_frames_scored",
    "space",
]


def write_reports_csv(path, reports, aggregate=None):
    """One row per sequence plus an aggregate row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(reports)
    if aggregate is None and rows:
        aggregate = aggregate_reports(rows)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for report in rows + ([aggregate] if aggregate else []):
            row = asdict(report)
            writer.writerow({k: row[k] for k in _CSV_FIELDS})
    return aggregate


def write_summary_json(path, aggregate, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(asdict(aggregate))
    if extra:
        payload.update(extra)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
