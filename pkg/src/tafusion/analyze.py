"""Temporal-alignment diagnostics: magnitude trajectories and sign agreement.

A stream's trajectory is its per-frame feature L2 norm, min-max normalized
to [0, 1] (constant series map to zeros).  Sign agreement between two
trajectories resamples the finer one onto the coarser timeline by nearest
timestamp, takes first differences of both, and reports the fraction of
steps whose difference signs match (an exact zero agrees only with zero).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, Sample
from .encoder import FusionModel, load_checkpoint
from .tensor import no_grad

ANALYSIS_TAPS = ("ctm", "shared")


@dataclass
class Trajectory:
    timestamps: np.ndarray
    values: np.ndarray          # min-max normalized to [0, 1]


@dataclass
class AgreementDistribution:
    fractions: np.ndarray       # one agreement fraction per sample
    bin_edges: np.ndarray
    masses: np.ndarray          # histogram, sums to 1
    mean: float
    median: float


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def magnitude_trajectory(frames: np.ndarray, fps: float) -> Trajectory:
    """Per-frame L2 norms on the stream's own timeline, min-max normalized."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"expected a nonempty T x d matrix, got {frames.shape}")
    norms = np.sqrt((frames * frames).sum(axis=1))
    t = np.arange(frames.shape[0], dtype=np.float64) / fps
    return Trajectory(timestamps=t, values=minmax_normalize(norms))


def resample_nearest(values: np.ndarray, timestamps: np.ndarray,
                     target_timestamps: np.ndarray) -> np.ndarray:
    """Pick, for each target time, the sample with the nearest timestamp.

    Ties break toward the earlier sample; no value is interpolated, so every
    output is an existing sample.
    """
    values = np.asarray(values, dtype=np.float64)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    out = np.empty(len(target_timestamps))
    for i, t in enumerate(target_timestamps):
        out[i] = values[np.argmin(np.abs(timestamps - t))]
    return out


def sign_agreement(a_values, a_times, v_values, v_times) -> float:
    """Fraction of aligned first-difference steps with matching signs."""
    a_values = np.asarray(a_values, dtype=np.float64)
    v_values = np.asarray(v_values, dtype=np.float64)
    a_times = np.asarray(a_times, dtype=np.float64)
    v_times = np.asarray(v_times, dtype=np.float64)
    if len(a_values) < 2 or len(v_values) < 2:
        raise ValueError("sign agreement needs at least two samples per series")
    if len(a_values) >= len(v_values):
        fine_v, fine_t = a_values, a_times
        coarse_v, coarse_t = v_values, v_times
    else:
        fine_v, fine_t = v_values, v_times
        coarse_v, coarse_t = a_values, a_times
    resampled = resample_nearest(fine_v, fine_t, coarse_t)
    da = np.sign(np.diff(resampled))
    dv = np.sign(np.diff(coarse_v))
    return float(np.mean(da == dv))


def _tap_features(model: FusionModel, sample: Sample, tap: str):
    with no_grad():
        out = model.forward(sample.audio, sample.video, train=False)
    if tap == "ctm":
        return out.ctm_pre_audio.data, out.ctm_pre_video.data
    if tap == "shared":
        return out.shared_audio.data, out.shared_video.data
    raise ValueError(f"unknown tap {tap!r}; expected one of {ANALYSIS_TAPS}")


def sample_agreement(model: FusionModel, sample: Sample, tap: str = "ctm") -> float:
    """Derivative-sign agreement between one sample's two magnitude trajectories."""
    feats_a, feats_v = _tap_features(model, sample, tap)
    traj_a = magnitude_trajectory(feats_a, sample.audio.fps)
    traj_v = magnitude_trajectory(feats_v, sample.video.fps)
    return sign_agreement(traj_a.values, traj_a.timestamps,
                          traj_v.values, traj_v.timestamps)


def agreement_distribution(model: FusionModel, samples: list[Sample],
                           tap: str = "ctm", n_bins: int = 20) -> AgreementDistribution:
    fractions = np.array([sample_agreement(model, s, tap) for s in samples])
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    counts, _ = np.histogram(fractions, bins=edges)
    masses = counts / counts.sum()
    return AgreementDistribution(fractions=fractions, bin_edges=edges, masses=masses,
                                 mean=float(fractions.mean()),
                                 median=float(np.median(fractions)))


def write_trajectory_csv(path, model: FusionModel, sample: Sample, tap: str = "ctm") -> None:
    """Rows of (t, audio_mag, video_mag) on the coarser stream's timeline."""
    feats_a, feats_v = _tap_features(model, sample, tap)
    traj_a = magnitude_trajectory(feats_a, sample.audio.fps)
    traj_v = magnitude_trajectory(feats_v, sample.video.fps)
    if len(traj_a.values) >= len(traj_v.values):
        t = traj_v.timestamps
        a = resample_nearest(traj_a.values, traj_a.timestamps, t)
        v = traj_v.values
    else:
        t = traj_a.timestamps
        a = traj_a.values
        v = resample_nearest(traj_v.values, traj_v.timestamps, t)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "audio_mag", "video_mag"])
        for row in zip(t, a, v):
            writer.writerow([f"{x:.12g}" for x in row])


def _write_histogram_csv(path, dist: AgreementDistribution) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "mass"])
        for lo, hi, m in zip(dist.bin_edges[:-1], dist.bin_edges[1:], dist.masses):
            writer.writerow([f"{lo:.12g}", f"{hi:.12g}", f"{m:.12g}"])


def dataset_agreement_report(ckpt_a, ckpt_b, dataset: Dataset, out_dir,
                             split: str = "test", tap: str = "ctm",
                             labels: tuple[str, str] = ("model_a", "model_b"),
                             ) -> tuple[AgreementDistribution, AgreementDistribution]:
    """Compare two checkpoints' agreement distributions over one split.

    Writes one histogram CSV per model, a per-sample agreement CSV, and a
    summary CSV (model, mean, median, n) under ``out_dir``.
    """
    samples = dataset.split(split)
    if not samples:
        raise ValueError(f"dataset has no samples in split {split!r}")
    model_a = load_checkpoint(ckpt_a)
    model_b = load_checkpoint(ckpt_b)
    dist_a = agreement_distribution(model_a, samples, tap)
    dist_b = agreement_distribution(model_b, samples, tap)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_histogram_csv(out_dir / f"hist_{labels[0]}.csv", dist_a)
    _write_histogram_csv(out_dir / f"hist_{labels[1]}.csv", dist_b)
    with (out_dir / "agreements.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", labels[0], labels[1]])
        for s, fa, fb in zip(samples, dist_a.fractions, dist_b.fractions):
            writer.writerow([s.sample_id, f"{fa:.12g}", f"{fb:.12g}"])
    with (out_dir / "summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "mean", "median", "n"])
        for label, dist in ((labels[0], dist_a), (labels[1], dist_b)):
            writer.writerow([label, f"{dist.mean:.12g}", f"{dist.median:.12g}",
                             len(dist.fractions)])
    return dist_a, dist_b
