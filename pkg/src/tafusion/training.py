"""Training and evaluation loops: AdamW, linear decay, metrics, checkpoints.

Batches accumulate per-sample losses into one mean-loss graph (sequences
have different lengths, so samples run through the encoder one at a time);
the mathematics is identical to padded batching with masks but needs no
padding machinery.  Everything is deterministic given the config seed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz
from .ctm import CtmConfig, ctm_loss, gaussian_affinity, total_loss
from .data import Dataset, Sample
from .encoder import FusionModel, save_checkpoint
from .tensor import NonFiniteError, Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr_init: float = 5e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    run_dir: str | None = None      # checkpoint/metrics root; None keeps all in memory
    eval_every: int = 1             # epochs between evaluations

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr_init < 0:
            raise ValueError("lr_init must be nonnegative")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")


@dataclass
class AdamWState:
    """First/second gradient moments plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float,
               weight_decay: float = 0.01, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam update over all params with gradients.

    Decay multiplies parameters by (1 - lr * weight_decay) directly; it never
    enters the gradient moments.  Moments use the usual bias correction.
    """
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay != 0.0:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def linear_decay_lr(lr_init: float, step: int, total_steps: int) -> float:
    """Learning rate for 1-indexed ``step`` of ``total_steps``: linear to zero."""
    if not (1 <= step <= total_steps):
        raise ValueError(f"step {step} outside 1..{total_steps}")
    return lr_init * (1.0 - step / total_steps)


def classification_loss(logits: Tensor, label: int) -> Tensor:
    """Categorical cross-entropy of a 1 x C logit row against an integer label."""
    n = logits.shape[1]
    if not (0 <= label < n):
        raise ValueError(f"label {label} outside [0, {n})")
    onehot = np.zeros((1, n))
    onehot[0, label] = 1.0
    return tz.neg(tz.sum_all(tz.mul_const(tz.log_softmax(logits, axis=1), onehot)))


@dataclass
class StepRecord:
    step: int
    lr: float
    cls: float
    ctm: float
    total: float


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    cls: float
    ctm: float
    total: float
    accuracy: float | None


@dataclass
class TrainRun:
    seed: int
    steps: list[StepRecord]
    epochs: list[EpochRecord]
    best_epoch: int
    best_accuracy: float
    final_accuracy: float
    best_checkpoint: str | None
    final_checkpoint: str | None


class TrainingAbort(RuntimeError):
    """Raised when a non-finite loss appears; carries step diagnostics."""

    def __init__(self, step: int, sample_ids: list[str], detail: str):
        super().__init__(f"non-finite loss at step {step} (batch {sample_ids}): {detail}")
        self.step = step
        self.sample_ids = sample_ids


def _sample_losses(model: FusionModel, sample: Sample, ctm_cfg: CtmConfig | None,
                   train: bool, rng) -> tuple[Tensor, Tensor, float]:
    """Per-sample (total loss, cls loss, ctm value); ctm skipped when weight is 0."""
    out = model.forward(sample.audio, sample.video, train=train, rng=rng)
    cls = classification_loss(out.logits, sample.label)
    use_ctm = ctm_cfg is not None and ctm_cfg.lambda_ctm != 0.0
    if not use_ctm:
        return cls, cls, 0.0
    affinity = gaussian_affinity(out.t_audio, out.t_video, ctm_cfg.sigma)
    ctm = ctm_loss(out.e_audio, out.e_video, affinity, ctm_cfg.tau)
    return total_loss(cls, ctm, ctm_cfg.lambda_ctm), cls, ctm.item()


def train(model: FusionModel, dataset: Dataset, cfg: TrainConfig,
          ctm_cfg: CtmConfig | None = None, eval_split: str = "test") -> TrainRun:
    """Run the full training loop; returns metric records and checkpoint paths."""
    train_samples = dataset.split("train")
    eval_samples = dataset.split(eval_split)
    if not train_samples:
        raise ValueError("dataset has no train split")

    n_batches = math.ceil(len(train_samples) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    shuffle_rng = np.random.default_rng((cfg.seed, 17))
    dropout_rng = np.random.default_rng((cfg.seed, 23))
    lam = ctm_cfg.lambda_ctm if ctm_cfg is not None else 0.0

    state = AdamWState()
    steps: list[StepRecord] = []
    epochs: list[EpochRecord] = []
    best_acc = -1.0
    best_epoch = -1
    best_state: dict[str, np.ndarray] | None = None
    step = 0

    run_dir = Path(cfg.run_dir) if cfg.run_dir else None
    log_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_fh = (run_dir / "log.jsonl").open("w")

    try:
        for epoch in range(1, cfg.epochs + 1):
            order = shuffle_rng.permutation(len(train_samples))
            ep_cls = ep_ctm = ep_total = 0.0
            lr = 0.0
            for b in range(n_batches):
                step += 1
                lr = linear_decay_lr(cfg.lr_init, step, total_steps)
                batch = [train_samples[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                model.zero_grad()
                losses, cls_vals, ctm_vals = [], [], []
                try:
                    for sample in batch:
                        loss, cls, ctm_val = _sample_losses(model, sample, ctm_cfg,
                                                            True, dropout_rng)
                        losses.append(loss)
                        cls_vals.append(cls.item())
                        ctm_vals.append(ctm_val)
                    mean_loss = losses[0]
                    for extra in losses[1:]:
                        mean_loss = tz.add(mean_loss, extra)
                    mean_loss = tz.scale(mean_loss, 1.0 / len(losses))
                    tz.backward(mean_loss)
                except NonFiniteError as exc:
                    raise TrainingAbort(step, [s.sample_id for s in batch], str(exc)) from exc
                adamw_step(model.params, state, lr, cfg.weight_decay, cfg.betas, cfg.eps)

                cls_mean = float(np.mean(cls_vals))
                ctm_mean = float(np.mean(ctm_vals))
                total_mean = cls_mean + lam * ctm_mean
                rec = StepRecord(step, lr, cls_mean, ctm_mean, total_mean)
                steps.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps({"step": step, "lr": lr, "cls": cls_mean,
                                             "ctm": ctm_mean, "total": total_mean}) + "\n")
                ep_cls += cls_mean
                ep_ctm += ctm_mean
                ep_total += total_mean

            accuracy = None
            if eval_samples and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                accuracy, _ = evaluate(model, eval_samples)
                if accuracy > best_acc:
                    best_acc = accuracy
                    best_epoch = epoch
                    best_state = model.state_arrays()
            epochs.append(EpochRecord(epoch, lr, ep_cls / n_batches, ep_ctm / n_batches,
                                      ep_total / n_batches, accuracy))
    finally:
        if log_fh is not None:
            log_fh.close()

    final_acc, _ = evaluate(model, eval_samples) if eval_samples else (float("nan"), None)
    best_path = final_path = None
    if run_dir is not None:
        final_path = str(run_dir / "final.ckpt")
        save_checkpoint(model, final_path)
        if best_state is not None:
            live = model.state_arrays()
            model.load_state_arrays(best_state)
            best_path = str(run_dir / "best.ckpt")
            save_checkpoint(model, best_path)
            model.load_state_arrays(live)
        _write_metrics_csv(run_dir / "metrics.csv", epochs)

    return TrainRun(seed=cfg.seed, steps=steps, epochs=epochs, best_epoch=best_epoch,
                    best_accuracy=best_acc, final_accuracy=final_acc,
                    best_checkpoint=best_path, final_checkpoint=final_path)


def _write_metrics_csv(path: Path, epochs: list[EpochRecord]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "cls_loss", "ctm_loss", "total", "accuracy"])
        for r in epochs:
            writer.writerow([r.epoch, f"{r.lr:.12g}", f"{r.cls:.12g}", f"{r.ctm:.12g}",
                             f"{r.total:.12g}", "" if r.accuracy is None else f"{r.accuracy:.12g}"])


def evaluate(model: FusionModel, samples: list[Sample],
             batch_size: int = 4) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix (rows = true class) with dropout off.

    ``batch_size`` only controls grouping; each sequence runs alone, so the
    partition cannot change the result.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    n_classes = model.cfg.n_classes
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    with tz.no_grad():
        for lo in range(0, len(samples), batch_size):
            for sample in samples[lo:lo + batch_size]:
                out = model.forward(sample.audio, sample.video, train=False)
                pred = int(np.argmax(out.logits.data[0]))
                confusion[sample.label, pred] += 1
    accuracy = float(np.trace(confusion)) / len(samples)
    return accuracy, confusion
