"""Multi-task vision pre-training objectives on a from-scratch autodiff core.

Asymmetric multi-label classification, swapped-prediction prototype
clustering with truncated Sinkhorn-Knopp, masked-patch reconstruction and
EMA momentum distillation, wired into a tiny patch transformer.
"""

from .config import DataConfig, OptimConfig, PrototypeSettings, TrainConfig
from .data import (MaskSpec, SyntheticSpec, augment_views, generate_shapes_dataset,
                   load_manifest_dataset, mask_patches)
from .errors import ConfigError, DomainError, ManifestError, NumericalAbort
from .evaluate import average_precision, probe_eval
from .experiments import ablate, gradcheck_cmd
from .gradcheck import grad_check
from .model import EncoderConfig, Model, TeacherState, ema_update, patchify, unpatchify
from .objectives import (AsymmetricLossParams, LossWeights, asymmetric_multilabel_loss,
                         cosine_similarity_vector, mim_loss, momentum_distillation_loss,
                         total_loss)
from .tensor import Tensor, no_grad
from .train import TrainState, fit, train_step
from .transport import PrototypeBank, prototype_scores, sinkhorn_codes, swapped_prediction_loss

__version__ = "0.1.0"
