"""Multimodal sequence fusion with time-aligned rotary attention.

The package trains and probes a two-stream Transformer classifier whose
attention is aligned across frame-rate-mismatched streams, optionally
regularized by a cross-temporal matching loss.
"""

from .analyze import (AgreementDistribution, Trajectory, agreement_distribution,
                      dataset_agreement_report, magnitude_trajectory, sign_agreement)
from .ctm import (AffinityMatrix, CtmConfig, CtmProjection, ctm_loss, embed_for_ctm,
                  entropy_floor, gaussian_affinity, total_loss)
from .data import (Dataset, FeatureSequence, Sample, SyntheticSpec, generate_synthetic,
                   load_dataset, load_features, save_dataset, save_features)
from .encoder import (EncoderConfig, ForwardResult, FusionModel, concat_fusion,
                      count_parameters, load_checkpoint, pool_and_classify,
                      save_checkpoint, FUSION_VARIANTS)
from .posenc import (POSENC_VARIANTS, RateSpec, RotaryBank, apply_posenc, rope_rotate,
                     sinusoidal_table, tarope_positions)
from .tensor import Tensor, backward
from .training import (AdamWState, TrainConfig, TrainRun, TrainingAbort, adamw_step,
                       classification_loss, evaluate, linear_decay_lr, train)

__version__ = "0.1.0"
