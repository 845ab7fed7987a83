"""Multi-label, reconstruction and distillation losses and their weighted sum.

All losses reduce by the mean so the weights do not depend on batch size.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError
from .tensor import Tensor

PROB_CLAMP = 1e-8


@dataclass
class AsymmetricLossParams:
    eta: float = 10.0
    gamma_pos: float = 4.0
    gamma_neg: float = 1.0

    def validate(self):
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ConfigError("focusing parameters must be non-negative")
        return self


TASKS = {
    "mcls": ("alpha1", "w/o Multi-label classification"),
    "cl": ("alpha2", "w/o Contrastive learning"),
    "mim": ("alpha3", "w/o MIM"),
    "mom": ("alpha4", "w/o Momentum distillation"),
}


@dataclass
class LossWeights:
    """Weights for (multi-label, contrastive, reconstruction, distillation)."""

    alpha1: float = 0.001
    alpha2: float = 0.02
    alpha3: float = 1.0
    alpha4: float = 10.0

    def validate(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"{name} must be non-negative")
        return self

    def of(self, task):
        return getattr(self, TASKS[task][0])


def asymmetric_multilabel_loss(logits, targets, params=None):
    """Weighted asymmetric loss averaged over all B x C entries.

    Positives contribute ``-eta (1-p)^gamma_pos log p``, negatives
    ``-p^gamma_neg log(1-p)``, with ``p = sigmoid(logits)`` clamped to
    [1e-8, 1 - 1e-8].
    """
    params = params or AsymmetricLossParams()
    y = np.asarray(targets, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("multi-label targets must be exactly 0 or 1")
    if y.shape != tuple(logits.shape):
        raise ConfigError(f"targets {y.shape} do not match logits {logits.shape}")
    p = T.clamp(T.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    q = 1.0 - p
    pos = params.eta * (q ** params.gamma_pos) * T.log(p)
    neg = (p ** params.gamma_neg) * T.log(q)
    return -(y * pos + (1.0 - y) * neg).mean()


def mim_loss(y, x, mask, patch_size):
    """Mean absolute error over masked pixels only.

    ``mask`` is a ``B x gh x gw`` boolean patch grid; the normalizer counts
    masked pixel scalars (masked patches x p^2 x 3).
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if tuple(y.shape) != x.shape:
        raise ConfigError(f"reconstruction {y.shape} does not match input {x.shape}")
    mask = np.asarray(mask, dtype=bool)
    pixels = np.kron(mask, np.ones((1, patch_size, patch_size), dtype=bool))
    pixels = np.broadcast_to(pixels[..., None], x.shape)
    omega = int(pixels.sum())
    if omega == 0:
        raise DomainError("reconstruction loss is undefined for an empty mask")
    return T.absolute(y[pixels] - x[pixels]).sum() * (1.0 / omega)


def cosine_similarity_vector(g, q0):
    """``B x C`` cosines between each embedding row and each label embedding."""
    return T.l2_normalize(g, axis=-1) @ T.l2_normalize(q0, axis=-1).T


def momentum_distillation_loss(g, g_prime, q0, q0_teacher=None, tau=0.1):
    """Symmetric KL between softmax(cosines / tau) of student and teacher.

    ``g_prime`` and ``q0_teacher`` are treated as constants.  When
    ``q0_teacher`` is omitted the student's label embeddings are used (as
    values) for the teacher side as well.
    """
    g_prime = as_constant(g_prime)
    q0_t = as_constant(q0 if q0_teacher is None else q0_teacher)
    log_p = T.log_softmax(cosine_similarity_vector(g, q0), tau=tau, axis=-1)
    log_pt = T.log_softmax(cosine_similarity_vector(g_prime, q0_t), tau=tau, axis=-1)
    p = T.exp(log_p)
    pt = T.exp(log_pt)
    kl_fwd = (p * (log_p - log_pt)).sum(axis=-1)
    kl_bwd = (pt * (log_pt - log_p)).sum(axis=-1)
    return ((kl_fwd + kl_bwd) * 0.5).mean()


def as_constant(t):
    return Tensor(t.data if isinstance(t, Tensor) else t)


def total_loss(l_mcls, l_cl, l_mim, l_mom, w=None):
    """Weighted sum of the four task losses; ``None`` terms are skipped."""
    w = w or LossWeights()
    total = None
    for term, alpha in ((l_mcls, w.alpha1), (l_cl, w.alpha2), (l_mim, w.alpha3), (l_mom, w.alpha4)):
        if term is None:
            continue
        weighted = T.as_tensor(term) * alpha
        total = weighted if total is None else total + weighted
    return total if total is not None else Tensor(0.0)
