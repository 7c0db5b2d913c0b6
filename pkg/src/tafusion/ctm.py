"""Cross-temporal matching: align embedding similarities with temporal proximity.

Both streams are projected into a unit-norm embedding space.  Temporal
proximity of audio frame i (at t_i seconds) and video frame j (at t_j)
is scored by a Gaussian affinity g_ij = exp(-(t_i - t_j)^2 / (2 sigma^2));
row-normalizing g gives per-audio-frame target distributions over video
frames, column-normalizing gives the reverse.  Cosine similarities pass
through a temperature softmax the same two ways, and the loss is the mean of
both cross-entropies, so temporally close pairs are pushed together from
either side.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import Tensor


@dataclass(frozen=True)
class CtmConfig:
    """Bandwidth, temperature, loss weight and embedding width."""

    sigma: float = 0.5
    tau: float = 0.07
    lambda_ctm: float = 0.5
    d_emb: int = 128

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lambda_ctm < 0:
            raise ValueError(f"lambda_ctm must be nonnegative, got {self.lambda_ctm}")
        if self.d_emb < 1:
            raise ValueError(f"d_emb must be at least 1, got {self.d_emb}")


@dataclass
class AffinityMatrix:
    """Gaussian affinities plus their row/column-normalized target distributions."""

    g: np.ndarray        # T_a x T_v, entries in (0, 1]
    q_a2v: np.ndarray    # rows sum to 1
    q_v2a: np.ndarray    # columns sum to 1


def gaussian_affinity(t_a, t_v, sigma: float) -> AffinityMatrix:
    """Affinity g_ij = exp(-(t_a[i] - t_v[j])^2 / (2 sigma^2)) and its targets."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    t_a = np.asarray(t_a, dtype=np.float64).reshape(-1)
    t_v = np.asarray(t_v, dtype=np.float64).reshape(-1)
    diff = t_a[:, None] - t_v[None, :]
    g = np.exp(-(diff * diff) / (2.0 * sigma * sigma))
    q_a2v = g / g.sum(axis=1, keepdims=True)
    q_v2a = g / g.sum(axis=0, keepdims=True)
    return AffinityMatrix(g=g, q_a2v=q_a2v, q_v2a=q_v2a)


@dataclass
class CtmProjection:
    """Per-modality linear maps into the matching space."""

    w_audio: Tensor
    b_audio: Tensor
    w_video: Tensor
    b_video: Tensor


def embed_for_ctm(f_a: Tensor, f_v: Tensor, proj: CtmProjection) -> tuple[Tensor, Tensor]:
    """Project both streams and scale every row to unit norm."""
    e_a = tz.l2norm_rows(tz.add(tz.matmul(f_a, proj.w_audio), proj.b_audio))
    e_v = tz.l2norm_rows(tz.add(tz.matmul(f_v, proj.w_video), proj.b_video))
    return e_a, e_v


def ctm_loss(e_a: Tensor, e_v: Tensor, affinity: AffinityMatrix, tau: float) -> Tensor:
    """Bidirectional cross-entropy between similarity and affinity distributions.

    With S = E_a @ E_v^T, the audio-to-video direction softmaxes S/tau over
    rows and averages CrossEntropy(q_row, p_row) over the T_a rows; the
    video-to-audio direction does the same over columns.  The loss is the
    mean of the two directions.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    t_a, t_v = e_a.shape[0], e_v.shape[0]
    if t_a == 0 or t_v == 0:
        warnings.warn("empty stream: cross-temporal matching contributes 0", stacklevel=2)
        return Tensor(0.0)
    if affinity.g.shape != (t_a, t_v):
        raise ValueError(f"affinity shape {affinity.g.shape} != similarities ({t_a}, {t_v})")

    s = tz.scale(tz.matmul(e_a, tz.transpose(e_v)), 1.0 / tau)
    log_p_a2v = tz.log_softmax(s, axis=1)
    log_p_v2a = tz.log_softmax(s, axis=0)
    loss_a2v = tz.scale(tz.sum_all(tz.mul_const(log_p_a2v, affinity.q_a2v)), -1.0 / t_a)
    loss_v2a = tz.scale(tz.sum_all(tz.mul_const(log_p_v2a, affinity.q_v2a)), -1.0 / t_v)
    return tz.scale(tz.add(loss_a2v, loss_v2a), 0.5)


def total_loss(cls_loss: Tensor, ctm: Tensor, lambda_ctm: float) -> Tensor:
    """Combined objective: classification plus weighted matching term."""
    if lambda_ctm == 0.0:
        return cls_loss
    return tz.add(cls_loss, tz.scale(ctm, lambda_ctm))


def entropy_floor(affinity: AffinityMatrix) -> float:
    """Analytic minimum of the matching loss: mean target-distribution entropy.

    CrossEntropy(q, p) >= H(q) with equality iff p == q, so the loss is
    bounded below by the average of the row-entropy mean and the
    column-entropy mean of the targets.
    """
    row_h = -(affinity.q_a2v * np.log(affinity.q_a2v)).sum(axis=1).mean()
    col_h = -(affinity.q_v2a * np.log(affinity.q_v2a)).sum(axis=0).mean()
    return 0.5 * (row_h + col_h)
