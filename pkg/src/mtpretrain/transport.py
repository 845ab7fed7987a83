"""Prototype assignment with truncated Sinkhorn-Knopp and the swapped-prediction loss."""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError
from .tensor import Tensor


@dataclass
class PrototypeBank:
    """K unit-norm prototype rows plus the assignment hyper-parameters."""

    prototypes: Tensor
    tau: float = 0.1
    epsilon: float = 0.05
    n_iters: int = 3
    t_max: float = 10.0

    def __post_init__(self):
        if self.num_prototypes < 2:
            raise ConfigError("need at least two prototypes")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.n_iters < 1:
            raise ConfigError("n_iters must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")

    @classmethod
    def create(cls, num_prototypes, dim, rng, **settings):
        c = rng.normal(size=(num_prototypes, dim))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        return cls(Tensor(c, requires_grad=True, name="prototypes"), **settings)

    @property
    def num_prototypes(self):
        return self.prototypes.shape[0]

    def normalize_(self):
        """Project prototype rows back onto the unit sphere."""
        c = self.prototypes.data
        c /= np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)


def prototype_scores(f, bank):
    """Dot products ``f_i . c_k`` as a ``B x K`` tensor."""
    c = bank.prototypes
    if f.shape[-1] != c.shape[-1]:
        raise ConfigError(f"feature width {f.shape[-1]} != prototype width {c.shape[-1]}")
    return f @ c.T


def _logsumexp(x, axis):
    peak = x.max(axis=axis, keepdims=True)
    return (peak + np.log(np.exp(x - peak).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn_codes(scores, epsilon=0.05, n_iters=3, t_max=10.0):
    """Equal-partition soft assignment of B samples to K prototypes.

    The kernel is ``exp(min(scores / epsilon, t_max))``; columns are scaled to
    sum to 1/K and rows to 1/B, alternating ``n_iters`` times (rows last).
    The scalings are carried in log space so an all-underflowing row cannot
    produce 0/0.  Returns a plain array: the codes carry no gradient.
    """
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise DomainError("sinkhorn_codes received non-finite scores")
    b, k = s.shape
    logits = np.minimum(s / epsilon, t_max)
    u = np.zeros(b)
    v = np.zeros(k)
    for _ in range(n_iters):
        v = -math.log(k) - _logsumexp(logits + u[:, None], axis=0)
        u = -math.log(b) - _logsumexp(logits + v[None, :], axis=1)
    return np.exp(logits + u[:, None] + v[None, :])


def swapped_prediction_loss(f_t, f_s, bank, codes=None):
    """Batch mean of ``l(f_t, q_s) + l(f_s, q_t)`` with cross-entropy ``l``.

    ``codes`` optionally supplies precomputed ``(Q_t, Q_s)`` code matrices
    (each ``B x K``, rows summing to 1/B), e.g. to hold them fixed while
    finite-differencing.
    """
    if f_t.shape != f_s.shape:
        raise ConfigError(f"view features misaligned: {f_t.shape} vs {f_s.shape}")
    b = f_t.shape[0]
    scores_t = prototype_scores(f_t, bank)
    scores_s = prototype_scores(f_s, bank)
    if codes is None:
        codes = (sinkhorn_codes(scores_t, bank.epsilon, bank.n_iters, bank.t_max),
                 sinkhorn_codes(scores_s, bank.epsilon, bank.n_iters, bank.t_max))
    q_t, q_s = (Tensor(b * np.asarray(q)) for q in codes)
    log_p_t = T.log_softmax(scores_t, tau=bank.tau, axis=-1)
    log_p_s = T.log_softmax(scores_s, tau=bank.tau, axis=-1)
    per_sample = -((q_s * log_p_t).sum(axis=-1) + (q_t * log_p_s).sum(axis=-1))
    return per_sample.mean()
