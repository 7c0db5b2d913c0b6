"""Positional encodings: sinusoidal, learnable, rotary, and time-aligned rotary.

Rotary encodings rotate query/key coordinate pairs by position-dependent
angles, so attention logits depend only on position differences.  The
time-aligned variant rescales one modality's positions by the ratio of frame
rates (video index m becomes m * eta_a / eta_v), which makes cross-modal
logits a function of physical time difference instead of token-index
difference.  With equal rates it degenerates to plain rotary encoding.

Sinusoidal and learnable encodings act earlier, added to token embeddings;
at attention time they are no-ops here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, rope_pairs

AUDIO = "audio"
VIDEO = "video"

POSENC_VARIANTS = ("sinusoidal", "learnable", "rope", "tarope")
# variants applied by rotating q/k at attention time
ROTARY_VARIANTS = ("rope", "tarope")
# variants applied by adding a table row to token embeddings
ADDITIVE_VARIANTS = ("sinusoidal", "learnable")


class PosEncConfigError(ValueError):
    """Invalid positional-encoding configuration."""


def normalize_posenc(tag: str) -> str:
    t = tag.strip().lower()
    if t not in POSENC_VARIANTS:
        raise PosEncConfigError(
            f"unknown positional encoding {tag!r}; expected one of {POSENC_VARIANTS}")
    return t


@dataclass(frozen=True)
class RateSpec:
    """Frame rates (frames/second) of the two streams."""

    eta_a: float
    eta_v: float

    def __post_init__(self):
        if self.eta_a <= 0 or self.eta_v <= 0:
            raise PosEncConfigError(f"frame rates must be positive, got {self}")

    @property
    def ratio(self) -> float:
        """Video-to-audio-timeline rescaling factor eta_a / eta_v."""
        return self.eta_a / self.eta_v


@dataclass(frozen=True)
class RotaryBank:
    """Per-pair rotation frequencies for one attention head.

    Pair k of an even head_dim rotates at frequency theta_base^(-2k/head_dim),
    the standard geometric bank, strictly decreasing in k.
    """

    head_dim: int
    theta_base: float = 10000.0
    freqs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.head_dim % 2 != 0 or self.head_dim <= 0:
            raise PosEncConfigError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if self.theta_base <= 1.0:
            raise PosEncConfigError("theta_base must exceed 1")
        k = np.arange(self.head_dim // 2, dtype=np.float64)
        object.__setattr__(self, "freqs", self.theta_base ** (-2.0 * k / self.head_dim))


def rope_rotate(x: Tensor, positions, bank: RotaryBank) -> Tensor:
    """Rotate each row's coordinate pairs by positions[t] * freqs.

    ``x`` is T x head_dim; pair (x_2k, x_2k+1) of row t turns through the
    angle positions[t] * bank.freqs[k].  Rotation preserves pair norms.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 1 or pos.shape[0] != x.shape[0]:
        raise PosEncConfigError(
            f"positions length {pos.shape} does not match sequence length {x.shape[0]}")
    if x.shape[1] != bank.head_dim:
        raise PosEncConfigError(f"x width {x.shape[1]} != bank head_dim {bank.head_dim}")
    angles = pos[:, None] * bank.freqs[None, :]
    return rope_pairs(x, np.cos(angles), np.sin(angles))


def tarope_positions(modality: str, indices, rates: RateSpec) -> list[float]:
    """Map frame indices onto the audio timeline.

    Audio index n stays n; video index m becomes m * eta_a / eta_v, i.e. the
    video rotation rate is scaled by the frame-rate ratio.
    """
    idx = [float(i) for i in indices]
    if any(i < 0 for i in idx):
        raise PosEncConfigError("indices must be nonnegative")
    if modality == AUDIO:
        return idx
    if modality == VIDEO:
        r = rates.ratio
        return [i * r for i in idx]
    raise PosEncConfigError(f"unknown modality {modality!r}")


def positions_for(variant: str, modality_per_token, indices_per_token,
                  rates: RateSpec | None) -> np.ndarray:
    """Per-token rotation positions for a (possibly mixed-modality) sequence."""
    variant = normalize_posenc(variant)
    idx = np.asarray(indices_per_token, dtype=np.float64)
    if variant == "rope":
        return idx
    if variant == "tarope":
        if rates is None:
            raise PosEncConfigError("tarope needs a RateSpec")
        is_video = np.fromiter((m == VIDEO for m in modality_per_token), dtype=bool,
                               count=len(idx))
        return np.where(is_video, idx * rates.ratio, idx)
    raise PosEncConfigError(f"{variant} has no rotation positions")


def rotate_tokens(variant: str, x: Tensor, modality_per_token, indices_per_token,
                  rates: RateSpec | None, bank: RotaryBank) -> Tensor:
    """Rotate one projected tensor (T x n_heads*head_dim) by its token positions.

    Every head's columns rotate with the same bank.  Rotary variants use raw
    sequence indices ("rope") or rate-aligned positions ("tarope"); additive
    variants pass through untouched.
    """
    variant = normalize_posenc(variant)
    t = x.shape[0]
    if len(modality_per_token) != t or len(indices_per_token) != t:
        raise PosEncConfigError("token metadata length does not match sequence length")
    if variant in ADDITIVE_VARIANTS:
        return x
    if x.shape[1] % bank.head_dim != 0:
        raise PosEncConfigError(
            f"width {x.shape[1]} is not a multiple of head_dim {bank.head_dim}")
    n_heads = x.shape[1] // bank.head_dim
    pos = positions_for(variant, modality_per_token, indices_per_token, rates)
    angles = pos[:, None] * bank.freqs[None, :]          # T x head_dim/2
    angles = np.tile(angles, (1, n_heads))               # same bank per head
    return rope_pairs(x, np.cos(angles), np.sin(angles))


def apply_posenc(variant: str, q: Tensor, k: Tensor, modality_per_token,
                 indices_per_token, rates: RateSpec | None,
                 bank: RotaryBank) -> tuple[Tensor, Tensor]:
    """Apply a positional-encoding variant to projected queries and keys.

    Queries and keys share the token metadata (self-attention layout); the
    sinusoidal/learnable variants were already added to the token embeddings,
    so q and k pass through untouched here.
    """
    if q.shape != k.shape:
        raise PosEncConfigError(f"q/k shapes differ: {q.shape} vs {k.shape}")
    q2 = rotate_tokens(variant, q, modality_per_token, indices_per_token, rates, bank)
    k2 = rotate_tokens(variant, k, modality_per_token, indices_per_token, rates, bank)
    return q2, k2


def sinusoidal_table(n_positions: int, width: int) -> np.ndarray:
    """Classic fixed sin/cos table: even columns sine, odd columns cosine."""
    if width % 2 != 0:
        raise PosEncConfigError("sinusoidal table width must be even")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    k = np.arange(width // 2, dtype=np.float64)[None, :]
    angle = pos * (10000.0 ** (-2.0 * k / width))
    table = np.empty((n_positions, width), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table
