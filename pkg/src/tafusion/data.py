"""Feature sequences, their on-disk format, and the synthetic benchmark.

File format (little-endian throughout):

    bytes 0..3   magic ``FSQ1``
    uint32       format version (currently 1)
    uint8        modality tag: 0 = audio, 1 = video
    float64      frames per second
    uint32       T, number of frames
    uint32       d, features per frame
    float32[T*d] frame data, row major

A dataset directory holds ``features/<id>_{audio,video}.fsq`` plus
``manifest.tsv``: a ``# n_classes=<C>`` comment, a header line, then one
``id<TAB>audio<TAB>video<TAB>label<TAB>split`` record per sample.  Relative
manifest paths are resolved against the manifest's directory (or an explicit
``data_dir``).

The synthetic task is built so the label is decodable only from cross-modal
timing: every class plants bumps in both streams (two audio, one video), but
only the target class has an audio bump at the same physical time as its
video bump.  Bump presence therefore carries no information, and same-channel
matching alone stays ambiguous; coincidence decides.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FSQ1"
FORMAT_VERSION = 1
_MODALITY_CODE = {"audio": 0, "video": 1}
_MODALITY_NAME = {0: "audio", 1: "video"}

# temporal width (seconds) of the Gaussian event bumps
BUMP_SIGMA = 0.06
# shared clock tracks: sin/cos pairs at these periods (seconds); a dot
# product of two frames' clock features is cos(w * dt), a relative-time kernel
CLOCK_PERIODS = (0.4, 1.6)
CLOCK_AMPLITUDE = 0.5


class FeatureFileError(ValueError):
    """Malformed or inconsistent feature file / manifest."""


@dataclass
class FeatureSequence:
    """Frame-major features with a frame rate; frame i sits at i/fps seconds."""

    frames: np.ndarray
    fps: float
    modality: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise FeatureFileError(f"frames must be a nonempty T x d matrix, got {self.frames.shape}")
        if self.fps <= 0:
            raise FeatureFileError(f"fps must be positive, got {self.fps}")
        if self.modality not in _MODALITY_CODE:
            raise FeatureFileError(f"unknown modality {self.modality!r}")
        if not np.isfinite(self.frames).all():
            raise FeatureFileError("non-finite value in frames")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps

    def timestamps(self) -> np.ndarray:
        return np.arange(self.n_frames, dtype=np.float64) / self.fps


def save_features(path, seq: FeatureSequence) -> None:
    path = Path(path)
    t, d = seq.frames.shape
    header = MAGIC + struct.pack("<IBdII", FORMAT_VERSION, _MODALITY_CODE[seq.modality],
                                 float(seq.fps), t, d)
    body = seq.frames.astype("<f4").tobytes(order="C")
    path.write_bytes(header + body)


def load_features(path) -> FeatureSequence:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FeatureFileError(f"{path}: cannot read ({exc})") from exc
    header_size = 4 + struct.calcsize("<IBdII")
    if len(raw) < header_size or raw[:4] != MAGIC:
        raise FeatureFileError(f"{path}: not a feature file (bad magic)")
    version, mod_code, fps, t, d = struct.unpack("<IBdII", raw[4:header_size])
    if version != FORMAT_VERSION:
        raise FeatureFileError(f"{path}: unsupported format version {version}")
    if mod_code not in _MODALITY_NAME:
        raise FeatureFileError(f"{path}: unknown modality code {mod_code}")
    expected = header_size + 4 * t * d
    if len(raw) != expected:
        raise FeatureFileError(f"{path}: size {len(raw)} != expected {expected}")
    frames = np.frombuffer(raw[header_size:], dtype="<f4").reshape(t, d)
    if not np.isfinite(frames).all():
        raise FeatureFileError(f"{path}: non-finite value in frame data")
    return FeatureSequence(frames=frames.astype(np.float64), fps=fps,
                           modality=_MODALITY_NAME[mod_code])


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass(frozen=True)
class SyntheticSpec:
    """Controls the alignment-sensitive synthetic generator.

    Feature widths default to the full-scale regime (1024 audio / 35 video
    channels at 50 / 30 FPS); tests shrink them.  Audio content is
    axis-aligned: one bump channel per class plus ``2 * len(CLOCK_PERIODS)``
    clock channels, the rest pure noise.  Video carries the same kinds of
    tracks but, when ``entangle_video`` is set (the default), they sit on a
    fixed random orthonormal basis of the video feature space instead of
    private channels, so reading the video stream requires learning the
    cross-modal correspondence rather than copying channel indices.
    """

    n_classes: int = 6
    n_train: int = 600
    n_test: int = 200
    duration_range: tuple[float, float] = (1.2, 2.0)
    eta_a: float = 50.0
    eta_v: float = 30.0
    d_in_audio: int = 1024
    d_in_video: int = 35
    noise_std: float = 0.05
    coincidence_window: float = 0.35
    seed: int = 0
    entangle_video: bool = True

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        lo, hi = self.duration_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad duration range {self.duration_range}")
        if self.coincidence_window >= lo:
            raise ValueError("coincidence_window must be shorter than the clip duration")
        n_clock = 2 * len(CLOCK_PERIODS)
        if min(self.d_in_audio, self.d_in_video) < self.n_classes + n_clock:
            raise ValueError(
                f"need one channel per class plus {n_clock} clock channels")
        if self.eta_a <= 0 or self.eta_v <= 0:
            raise ValueError("frame rates must be positive")


@dataclass
class Sample:
    sample_id: str
    audio: FeatureSequence
    video: FeatureSequence
    label: int
    split: str
    # class -> (audio event time, video event time), generator metadata only
    events: dict[int, tuple[float, float]] | None = None
    # class -> extra audio-only bump time (non-coincident by construction)
    echoes: dict[int, float] | None = None


@dataclass
class Dataset:
    samples: list[Sample]
    n_classes: int
    # orthonormal d_in_video x (n_classes + n_clock) basis carrying the video
    # content tracks; generator metadata (None for datasets loaded from disk)
    video_basis: np.ndarray | None = None

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def __len__(self) -> int:
        return len(self.samples)


def _bump_track(times: np.ndarray, center: float) -> np.ndarray:
    return np.exp(-0.5 * ((times - center) / BUMP_SIGMA) ** 2)


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    return labels


def _make_sample(sample_id: str, label: int, split: str, spec: SyntheticSpec,
                 rng: np.random.Generator, video_basis: np.ndarray | None) -> Sample:
    lo, hi = spec.duration_range
    duration = rng.uniform(lo, hi)
    t_a = max(2, int(round(duration * spec.eta_a)))
    t_v = max(2, int(round(duration * spec.eta_v)))
    times_a = np.arange(t_a) / spec.eta_a
    times_v = np.arange(t_v) / spec.eta_v

    margin = 3.0 * BUMP_SIGMA
    window = spec.coincidence_window
    events: dict[int, tuple[float, float]] = {}
    echoes: dict[int, float] = {}
    for c in range(spec.n_classes):
        if c == label:
            t_star = rng.uniform(margin, duration - margin)
            events[c] = (t_star, t_star)
        else:
            # distractor pair: same signature in both streams, never coincident
            for _ in range(1000):
                ta = rng.uniform(margin, duration - margin)
                tv = rng.uniform(margin, duration - margin)
                if abs(ta - tv) >= window:
                    break
            else:
                raise RuntimeError("could not place a non-coincident distractor pair")
            events[c] = (ta, tv)
        # every class also gets an audio-only echo bump, never coincident with
        # the class's video bump: same-channel matching alone stays ambiguous
        tv_c = events[c][1]
        for _ in range(1000):
            echo = rng.uniform(margin, duration - margin)
            if abs(echo - tv_c) >= window:
                echoes[c] = echo
                break
        else:
            raise RuntimeError("could not place an echo bump")

    def content_tracks(times: np.ndarray, bump_times) -> np.ndarray:
        tracks = np.zeros((len(times), spec.n_classes + 2 * len(CLOCK_PERIODS)))
        for c, centers in bump_times.items():
            for center in centers:
                tracks[:, c] += _bump_track(times, center)
        # shared clock: same physical phase in both streams regardless of rate
        for k, period in enumerate(CLOCK_PERIODS):
            w = 2.0 * np.pi / period
            tracks[:, spec.n_classes + 2 * k] = CLOCK_AMPLITUDE * np.sin(w * times)
            tracks[:, spec.n_classes + 2 * k + 1] = CLOCK_AMPLITUDE * np.cos(w * times)
        return tracks

    tracks_a = content_tracks(times_a, {c: (events[c][0], echoes[c])
                                        for c in range(spec.n_classes)})
    tracks_v = content_tracks(times_v, {c: (events[c][1],) for c in range(spec.n_classes)})

    audio = rng.normal(0.0, spec.noise_std, size=(t_a, spec.d_in_audio))
    audio[:, :tracks_a.shape[1]] += tracks_a
    video = rng.normal(0.0, spec.noise_std, size=(t_v, spec.d_in_video))
    if video_basis is not None:
        video += tracks_v @ video_basis.T
    else:
        video[:, :tracks_v.shape[1]] += tracks_v

    return Sample(
        sample_id=sample_id,
        audio=FeatureSequence(audio, spec.eta_a, "audio"),
        video=FeatureSequence(video, spec.eta_v, "video"),
        label=int(label),
        split=split,
        events=events,
        echoes=echoes,
    )


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministically generate the train and test splits for ``spec``."""
    video_basis = None
    if spec.entangle_video:
        n_tracks = spec.n_classes + 2 * len(CLOCK_PERIODS)
        gauss = np.random.default_rng((spec.seed, 99)).normal(
            size=(spec.d_in_video, n_tracks))
        video_basis, _ = np.linalg.qr(gauss)      # shared across both splits
    samples: list[Sample] = []
    for split, n, sub in (("train", spec.n_train, 0), ("test", spec.n_test, 1)):
        rng = np.random.default_rng((spec.seed, sub))
        labels = _balanced_labels(n, spec.n_classes, rng)
        for i, label in enumerate(labels):
            samples.append(_make_sample(f"{split}{i:05d}", int(label), split, spec,
                                        rng, video_basis))
    return Dataset(samples=samples, n_classes=spec.n_classes, video_basis=video_basis)


# ---------------------------------------------------------------------------
# manifests


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write features plus manifest.tsv under ``out_dir``; returns manifest path."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# n_classes={dataset.n_classes}", "id\taudio\tvideo\tlabel\tsplit"]
    for s in dataset.samples:
        a_rel = f"features/{s.sample_id}_audio.fsq"
        v_rel = f"features/{s.sample_id}_video.fsq"
        save_features(out_dir / a_rel, s.audio)
        save_features(out_dir / v_rel, s.video)
        lines.append(f"{s.sample_id}\t{a_rel}\t{v_rel}\t{s.label}\t{s.split}")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(manifest_path, data_dir=None) -> Dataset:
    """Load a dataset from its manifest; paths resolve against ``data_dir``."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.tsv"
    root = Path(data_dir) if data_dir is not None else manifest_path.parent
    try:
        text = manifest_path.read_text()
    except OSError as exc:
        raise FeatureFileError(f"{manifest_path}: cannot read manifest ({exc})") from exc

    n_classes = None
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line.lstrip("# ").partition("=")
            if key.strip() == "n_classes":
                n_classes = int(value)
            continue
        if line.startswith("id\t"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FeatureFileError(f"{manifest_path}:{lineno}: expected 5 fields, got {len(parts)}")
        rows.append(parts)
    if n_classes is None:
        n_classes = max(int(r[3]) for r in rows) + 1 if rows else 0

    samples = []
    for sid, a_rel, v_rel, label, split in rows:
        label = int(label)
        if not (0 <= label < n_classes):
            raise FeatureFileError(f"{manifest_path}: label {label} outside [0, {n_classes})")
        audio = load_features(root / a_rel)
        video = load_features(root / v_rel)
        if audio.modality != "audio" or video.modality != "video":
            raise FeatureFileError(f"{manifest_path}: modality tags do not match columns for {sid}")
        samples.append(Sample(sid, audio, video, label, split))
    return Dataset(samples=samples, n_classes=n_classes)
