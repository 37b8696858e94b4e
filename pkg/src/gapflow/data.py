"""Sequence data model: optical / SAR sequences with real acquisition dates,
binary missingness masks, normalization, cloud-mask-pool simulation, full-frame
query masking, sliding windows, and a synthetic dataset whose clean signal is
computable in closed form at any in-span date.

All functions here are pure over immutable inputs; per-sequence generation uses
independent spawned random streams so datasets are reproducible and
parallelizable.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff import load_tensor, save_tensor

V_FILL = 1.0  # fill value for unknown pixels, in normalized space
OPTICAL_MAX = 8000.0
SAR_CLIP = 2.0
DATASET_FORMAT = "gapflow-dataset-v1"


def _check_dates(dates):
    dates = np.asarray(dates, dtype=np.int64)
    if dates.ndim != 1:
        raise ValueError(f"dates must be one-dimensional, got shape {dates.shape}")
    if dates.size > 1 and np.any(np.diff(dates) <= 0):
        raise ValueError("acquisition dates must be strictly increasing")
    return dates


@dataclass
class OpticalSequence:
    """Normalized optical values (T, C, H, W) plus per-frame dates (days since reference)."""

    values: np.ndarray
    dates: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.dates = _check_dates(self.dates)
        if self.values.ndim != 4:
            raise ValueError(f"optical values must be (T, C, H, W), got {self.values.shape}")
        if self.values.shape[0] != self.dates.size:
            raise ValueError(
                f"{self.values.shape[0]} frames but {self.dates.size} dates"
            )
        if self.values.size and (self.values.min() < -1 - 1e-9 or self.values.max() > 1 + 1e-9):
            raise ValueError("optical values must lie in the normalized range [-1, 1]")


@dataclass
class SarSequence:
    """Normalized SAR conditioning values (Ts, Cs, H, W) with its own date list."""

    values: np.ndarray
    dates: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.dates = _check_dates(self.dates)
        if self.values.ndim != 4:
            raise ValueError(f"SAR values must be (Ts, Cs, H, W), got {self.values.shape}")
        if self.values.shape[0] != self.dates.size:
            raise ValueError(f"{self.values.shape[0]} frames but {self.dates.size} dates")


@dataclass
class MaskSequence:
    """Binary missingness (T, 1, H, W); 1 marks pixels to generate, broadcast over bands."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4 or self.values.shape[1] != 1:
            raise ValueError(f"mask must be (T, 1, H, W), got {self.values.shape}")
        _check_binary(self.values)


def _check_binary(mask):
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary (0 = observed, 1 = generate)")
    return m


@dataclass
class WindowSpec:
    """Fixed temporal window length and stride for long sequences."""

    length: int = 15
    stride: int = 1

    def __post_init__(self):
        if not 1 <= self.stride <= self.length:
            raise ValueError(f"stride must lie in [1, {self.length}], got {self.stride}")


# -- normalization ---------------------------------------------------------------


def normalize_optical(raw, dates, counters=None):
    """Clip reflectance to [0, 8000] and map affinely to [-1, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    n_negative = int(np.count_nonzero(raw < 0))
    if n_negative and counters is not None:
        counters["negative_optical_input"] = counters.get("negative_optical_input", 0) + n_negative
    clipped = np.clip(raw, 0.0, OPTICAL_MAX)
    return OpticalSequence(clipped / (OPTICAL_MAX / 2.0) - 1.0, dates)


def denormalize_optical(values):
    """Inverse of the optical normalization: [-1, 1] back to [0, 8000] reflectance."""
    return (np.asarray(values) + 1.0) * (OPTICAL_MAX / 2.0)


def normalize_sar(raw, mean, std, dates):
    """Standardize per channel, clip to [-2, 2], then halve into [-1, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    if np.any(std <= 0):
        raise ValueError("per-channel std must be positive")
    z = np.clip((raw - mean) / std, -SAR_CLIP, SAR_CLIP)
    return SarSequence(z / SAR_CLIP, dates)


# -- mask composition --------------------------------------------------------------


def compose_observed(clean, mask, v_fill=V_FILL):
    """Observed tensor: measured values where mask is 0, the fill value where 1."""
    y = clean.values if isinstance(clean, OpticalSequence) else np.asarray(clean)
    m = mask.values if isinstance(mask, MaskSequence) else _check_binary(mask)
    if m.shape[0] != y.shape[0] or m.shape[2:] != y.shape[2:]:
        raise ValueError(f"mask shape {m.shape} incompatible with values {y.shape}")
    return (1.0 - m) * y + m * v_fill


def mask_query_frame(x, mask, q, v_fill=V_FILL):
    """Set frame ``q`` fully unknown: its mask becomes all ones, its values the fill.

    Returns new arrays; all other frames are untouched.
    """
    x = np.asarray(x)
    m = _check_binary(mask)
    if not 0 <= q < x.shape[0]:
        raise IndexError(f"query frame {q} outside [0, {x.shape[0]})")
    x_out = x.copy()
    m_out = m.copy()
    m_out[q] = 1.0
    x_out[q] = v_fill
    return x_out, m_out


# -- mask pool -----------------------------------------------------------------------


class MaskPool:
    """A bag of spatially coherent missingness patterns, sampled during training."""

    def __init__(self, patterns):
        patterns = _check_binary(np.asarray(patterns, dtype=np.float64))
        if patterns.ndim != 4 or patterns.shape[1] != 1:
            raise ValueError(f"pool patterns must be (K, 1, H, W), got {patterns.shape}")
        if patterns.shape[0] == 0:
            raise ValueError("mask pool must be non-empty")
        if np.any(patterns.sum(axis=(1, 2, 3)) == 0):
            raise ValueError("every pool pattern must mask at least one pixel")
        self.patterns = patterns

    def __len__(self):
        return self.patterns.shape[0]


def build_mask_pool(n_patterns, height, width, rng, coverage=(0.1, 0.7), max_full_fraction=0.05):
    """Simulate cloud-like patterns: thresholded low-frequency noise.

    Coverage per pattern is drawn uniformly from ``coverage``; the all-ones cap
    is enforced by construction since coverage stays below 1.
    """
    lo, hi = coverage
    if not 0 < lo <= hi < 1:
        raise ValueError(f"coverage bounds must satisfy 0 < lo <= hi < 1, got {coverage}")
    patterns = np.zeros((n_patterns, 1, height, width))
    for k in range(n_patterns):
        noise = rng.standard_normal((height, width))
        smooth = ndimage.gaussian_filter(noise, sigma=min(height, width) / 6.0)
        cov = rng.uniform(lo, hi)
        threshold = np.quantile(smooth, 1.0 - cov)
        patterns[k, 0] = smooth >= threshold
    pool = MaskPool(patterns)
    full = np.mean(pool.patterns.mean(axis=(1, 2, 3)) == 1.0)
    if full > max_full_fraction:
        raise ValueError(f"{full:.0%} of patterns are all-ones, above the {max_full_fraction:.0%} cap")
    return pool


def sample_mask(pool, rng):
    """Uniform draw of one (1, H, W) pattern; reproducible under a fixed seed."""
    if len(pool) == 0:
        raise ValueError("cannot sample from an empty mask pool")
    return pool.patterns[rng.integers(len(pool))]


# -- sliding windows --------------------------------------------------------------------


def sliding_windows(n_frames, spec):
    """(start, stop) pairs covering every frame; the last window is end-aligned."""
    if n_frames < spec.length:
        raise ValueError(
            f"sequence of {n_frames} frames is shorter than the window length {spec.length}"
        )
    starts = list(range(0, n_frames - spec.length + 1, spec.stride))
    if starts[-1] != n_frames - spec.length:
        starts.append(n_frames - spec.length)
    return [(s, s + spec.length) for s in starts]


def merge_windows(outputs, starts, n_frames):
    """Average overlapping per-frame predictions from multiple windows."""
    total = np.zeros((n_frames,) + outputs[0].shape[1:])
    count = np.zeros(n_frames)
    for out, start in zip(outputs, starts):
        total[start : start + out.shape[0]] += out
        count[start : start + out.shape[0]] += 1
    if np.any(count == 0):
        raise ValueError("windows do not cover every frame")
    return total / count.reshape((-1,) + (1,) * (total.ndim - 1))


# -- synthetic data with closed-form oracle ------------------------------------------------


@dataclass
class SynthConfig:
    """Desk-scale synthetic dataset: seasonal sinusoids per smooth region, with a
    SAR channel that is a fixed nonlinear function of the same latent phase."""

    n_sequences: int = 200
    height: int = 16
    width: int = 16
    bands: int = 3
    sar_channels: int = 1
    frames_min: int = 8
    frames_max: int = 12
    sar_frames: int = 16
    span_days: int = 360
    n_regions: int = 4
    period_days: float = 150.0
    amp_range: tuple = (0.25, 0.55)
    nir_band: int = 1
    red_band: int = 0
    sar_noise: float = 0.05
    texture_scale: float = 0.05
    pool_size: int = 64
    pool_coverage: tuple = (0.1, 0.7)
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.frames_min <= self.frames_max:
            raise ValueError("need 1 <= frames_min <= frames_max")
        if self.frames_max > self.span_days + 1:
            raise ValueError(
                f"cannot place {self.frames_max} frames on {self.span_days + 1} distinct days"
            )
        if self.sar_frames > self.span_days + 1:
            raise ValueError("more SAR frames than available days")
        if not (0 <= self.nir_band < self.bands and 0 <= self.red_band < self.bands):
            raise ValueError("NIR/red band indices outside the band range")


def _band_profile(config):
    """Per-band (base, gain) of the seasonal latent: NIR in phase, red anti-phase."""
    base = np.full(config.bands, 0.05)
    gain = np.full(config.bands, 0.5)
    base[config.nir_band], gain[config.nir_band] = 0.15, 1.0
    base[config.red_band], gain[config.red_band] = -0.05, -0.8
    return base, gain


@dataclass
class SequenceOracle:
    """Everything needed to evaluate the clean signal at an arbitrary in-span date."""

    region_map: np.ndarray  # (H, W) region labels
    phases: np.ndarray  # (R,) per-region phase offset, days
    amplitudes: np.ndarray  # (R,) per-region seasonal amplitude
    texture: np.ndarray  # (C, H, W) static per-pixel offsets
    band_base: np.ndarray  # (C,)
    band_gain: np.ndarray  # (C,)
    period: float
    span_days: int
    nir_band: int
    red_band: int

    def latent(self, day):
        """Per-pixel seasonal latent in [-1, 1] at the given day."""
        phase = self.phases[self.region_map]
        amp = self.amplitudes[self.region_map]
        return amp * np.sin(2.0 * np.pi * (day - phase) / self.period)

    def clean_frame(self, day):
        """Closed-form clean optical frame (C, H, W), normalized space."""
        lat = self.latent(day)
        return (
            self.band_base[:, None, None]
            + self.band_gain[:, None, None] * lat[None]
            + self.texture
        )


@dataclass
class SequenceRecord:
    """One synthetic sequence: clean optical, SAR conditioning, base mask, oracle."""

    seq_id: str
    optical: OpticalSequence
    sar: SarSequence
    mask: MaskSequence
    oracle: SequenceOracle


def _sar_clean(latent, sar_channels):
    """Fixed smooth nonlinear map from the seasonal latent to SAR-like channels."""
    gains = [1.5, 0.8, 2.5]
    chans = []
    for c in range(sar_channels):
        g = gains[c % len(gains)]
        chans.append(0.7 * np.tanh(g * latent))
    return np.stack(chans)


def _generate_sequence(config, seq_id, rng):
    h, w, c = config.height, config.width, config.bands
    n_frames = int(rng.integers(config.frames_min, config.frames_max + 1))
    dates = np.sort(rng.choice(config.span_days + 1, size=n_frames, replace=False))
    sar_dates = np.sort(rng.choice(config.span_days + 1, size=config.sar_frames, replace=False))

    smooth = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=h / 8.0)
    edges = np.quantile(smooth, np.linspace(0, 1, config.n_regions + 1)[1:-1])
    region_map = np.searchsorted(edges, smooth).astype(np.int64)

    phases = rng.uniform(0.0, config.period_days, size=config.n_regions)
    amplitudes = rng.uniform(*config.amp_range, size=config.n_regions)
    s = config.texture_scale
    texture = np.clip(rng.normal(0.0, s, size=(c, h, w)), -3 * s, 3 * s)
    band_base, band_gain = _band_profile(config)

    oracle = SequenceOracle(
        region_map=region_map,
        phases=phases,
        amplitudes=amplitudes,
        texture=texture,
        band_base=band_base,
        band_gain=band_gain,
        period=config.period_days,
        span_days=config.span_days,
        nir_band=config.nir_band,
        red_band=config.red_band,
    )

    optical = np.stack([oracle.clean_frame(d) for d in dates])
    sar = np.stack(
        [
            np.clip(
                _sar_clean(oracle.latent(d), config.sar_channels)
                + rng.normal(0.0, config.sar_noise, size=(config.sar_channels, h, w)),
                -1.0,
                1.0,
            )
            for d in sar_dates
        ]
    )
    base_mask = np.zeros((n_frames, 1, h, w))

    return SequenceRecord(
        seq_id=seq_id,
        optical=OpticalSequence(optical, dates),
        sar=SarSequence(sar, sar_dates),
        mask=MaskSequence(base_mask),
        oracle=oracle,
    )


def generate_dataset(config):
    """Synthesize the full dataset plus its cloud-mask pool, reproducibly."""
    root_seq = np.random.SeedSequence(config.seed)
    pool_seed, *seq_seeds = root_seq.spawn(config.n_sequences + 1)
    pool = build_mask_pool(
        config.pool_size,
        config.height,
        config.width,
        np.random.default_rng(pool_seed),
        coverage=config.pool_coverage,
    )
    records = [
        _generate_sequence(config, f"seq_{i:04d}", np.random.default_rng(seq_seed))
        for i, seq_seed in enumerate(seq_seeds)
    ]
    return records, pool


# -- on-disk dataset format -------------------------------------------------------------------


def save_dataset(directory, records, pool, config):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in records:
        seq_dir = directory / rec.seq_id
        seq_dir.mkdir(exist_ok=True)
        save_tensor(seq_dir / "optical.bin", rec.optical.values)
        save_tensor(seq_dir / "sar.bin", rec.sar.values)
        save_tensor(seq_dir / "masks.bin", rec.mask.values)
        save_tensor(seq_dir / "region_map.bin", rec.oracle.region_map.astype(np.float64))
        save_tensor(seq_dir / "texture.bin", rec.oracle.texture)
        with open(seq_dir / "dates.json", "w") as f:
            json.dump(
                {"optical": rec.optical.dates.tolist(), "sar": rec.sar.dates.tolist()},
                f,
                sort_keys=True,
            )
        with open(seq_dir / "meta.json", "w") as f:
            json.dump(
                {
                    "phases": rec.oracle.phases.tolist(),
                    "amplitudes": rec.oracle.amplitudes.tolist(),
                    "band_base": rec.oracle.band_base.tolist(),
                    "band_gain": rec.oracle.band_gain.tolist(),
                    "period": rec.oracle.period,
                    "span_days": rec.oracle.span_days,
                    "nir_band": rec.oracle.nir_band,
                    "red_band": rec.oracle.red_band,
                },
                f,
                indent=2,
                sort_keys=True,
            )
    save_tensor(directory / "mask_pool.bin", pool.patterns)
    with open(directory / "dataset.json", "w") as f:
        json.dump(
            {
                "format": DATASET_FORMAT,
                "config": asdict(config),
                "sequences": [rec.seq_id for rec in records],
            },
            f,
            indent=2,
            sort_keys=True,
        )


def load_dataset(directory):
    directory = Path(directory)
    with open(directory / "dataset.json") as f:
        manifest = json.load(f)
    if manifest["format"] != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest['format']!r}")
    cfg_dict = dict(manifest["config"])
    for key in ("amp_range", "pool_coverage"):
        cfg_dict[key] = tuple(cfg_dict[key])
    config = SynthConfig(**cfg_dict)
    records = []
    for seq_id in manifest["sequences"]:
        seq_dir = directory / seq_id
        with open(seq_dir / "dates.json") as f:
            dates = json.load(f)
        with open(seq_dir / "meta.json") as f:
            meta = json.load(f)
        oracle = SequenceOracle(
            region_map=load_tensor(seq_dir / "region_map.bin").astype(np.int64),
            phases=np.asarray(meta["phases"]),
            amplitudes=np.asarray(meta["amplitudes"]),
            texture=load_tensor(seq_dir / "texture.bin"),
            band_base=np.asarray(meta["band_base"]),
            band_gain=np.asarray(meta["band_gain"]),
            period=meta["period"],
            span_days=meta["span_days"],
            nir_band=meta["nir_band"],
            red_band=meta["red_band"],
        )
        records.append(
            SequenceRecord(
                seq_id=seq_id,
                optical=OpticalSequence(load_tensor(seq_dir / "optical.bin"), dates["optical"]),
                sar=SarSequence(load_tensor(seq_dir / "sar.bin"), dates["sar"]),
                mask=MaskSequence(load_tensor(seq_dir / "masks.bin")),
                oracle=oracle,
            )
        )
    pool = MaskPool(load_tensor(directory / "mask_pool.bin"))
    return records, pool, config
