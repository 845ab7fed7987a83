"""Tiny patch transformer, its three heads and the EMA teacher.

Parameters live in a flat ``{name: Tensor}`` dict and every forward function
takes that dict explicitly, so the student and the momentum teacher share
one code path.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .rng import stream
from .tensor import Tensor


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 32
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    decoder_dim: int = 64
    num_classes: int = 8
    proto_dim: int = 32
    mlp_ratio: int = 4

    def validate(self):
        for name, value in asdict(self).items():
            if name == "depth":
                if value < 0:
                    raise ConfigError("depth must be >= 0")
            elif value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads or self.decoder_dim % self.heads:
            raise ConfigError("embed_dim and decoder_dim must be divisible by heads")
        return self

    @property
    def grid(self):
        n = self.image_size // self.patch_size
        return n, n

    @property
    def num_patches(self):
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * 3

    def to_dict(self):
        return asdict(self)


# -- patches ----------------------------------------------------------------

def patchify(images, patch_size):
    """``B x H x W x 3`` -> ``B x N x (p*p*3)``, patches in row-major grid order.

    Works on numpy arrays and on Tensors (differentiably).
    """
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"image {h}x{w} is not divisible into {patch_size}px patches")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape((b, gh, patch_size, gw, patch_size, c))
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((b, gh * gw, patch_size * patch_size * c))


def unpatchify(patches, patch_size, grid):
    b = patches.shape[0]
    gh, gw = grid
    x = patches.reshape((b, gh, gw, patch_size, patch_size, 3))
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((b, gh * patch_size, gw * patch_size, 3))


# -- parameters ---------------------------------------------------------------

STUDENT_ONLY_PREFIXES = ("proj.", "mim.")


def init_params(cfg, seed=0):
    """Deterministic initial parameters for ``cfg`` drawn from the ``init`` stream."""
    cfg.validate()
    rng = stream(seed, "init")
    d0, d, hidden = cfg.embed_dim, cfg.decoder_dim, cfg.embed_dim * cfg.mlp_ratio
    params = {}

    def linear(prefix, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[prefix + ".weight"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[prefix + ".bias"] = np.zeros(fan_out)

    def norm(prefix, dim):
        params[prefix + ".weight"] = np.ones(dim)
        params[prefix + ".bias"] = np.zeros(dim)

    linear("patch_embed", cfg.patch_dim, d0)
    params["pos_embed"] = rng.normal(0.0, 0.02, size=(cfg.num_patches, d0))
    params["mask_token"] = rng.normal(0.0, 0.02, size=(d0,))
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        norm(p + ".norm1", d0)
        for proj in ("q", "k", "v", "out"):
            linear(f"{p}.attn.{proj}", d0, d0)
        norm(p + ".norm2", d0)
        linear(p + ".mlp.fc1", d0, hidden)
        linear(p + ".mlp.fc2", hidden, d0)

    linear("decoder.input_proj", d0, d)
    params["label_embed"] = rng.normal(0.0, 0.02, size=(cfg.num_classes, d))
    norm("decoder.norm_q", d)
    norm("decoder.norm_kv", d)
    for proj in ("q", "k", "v", "out"):
        linear(f"decoder.attn.{proj}", d, d)
    norm("decoder.norm2", d)
    linear("decoder.mlp.fc1", d, d * cfg.mlp_ratio)
    linear("decoder.mlp.fc2", d * cfg.mlp_ratio, d)
    params["decoder.classifier.weight"] = rng.normal(0.0, 0.02, size=(cfg.num_classes, d))
    params["decoder.classifier.bias"] = np.zeros(cfg.num_classes)

    linear("proj.fc1", d0, d0)
    linear("proj.fc2", d0, cfg.proto_dim)
    linear("mim.head", d0, cfg.patch_dim)
    return {name: Tensor(value, requires_grad=True, name=name) for name, value in params.items()}


# -- layers --------------------------------------------------------------------

def linear(x, params, prefix):
    return x @ params[prefix + ".weight"] + params[prefix + ".bias"]


def layer_norm(x, params, prefix, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / T.sqrt(var + eps) * params[prefix + ".weight"] + params[prefix + ".bias"]


def _split_heads(x, heads):
    if x.ndim == 2:
        x = x.reshape((1,) + x.shape)
    b, n, dim = x.shape
    return x.reshape((b, n, heads, dim // heads)).transpose((0, 2, 1, 3))


def attention(q, k, v, heads):
    """Multi-head scaled dot-product attention; ``q`` may lack the batch axis."""
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[-1])
    weights = T.softmax((qh @ kh.transpose((0, 1, 3, 2))) * scale, axis=-1)
    out = (weights @ vh).transpose((0, 2, 1, 3))
    b, n = out.shape[0], out.shape[1]
    return out.reshape((b, n, out.shape[2] * out.shape[3]))


def attend(queries, keys, params, prefix, heads):
    q = linear(queries, params, prefix + ".q")
    k = linear(keys, params, prefix + ".k")
    v = linear(keys, params, prefix + ".v")
    return linear(attention(q, k, v, heads), params, prefix + ".out")


def mlp(x, params, prefix):
    return linear(T.gelu(linear(x, params, prefix + ".fc1")), params, prefix + ".fc2")


# -- forward passes -------------------------------------------------------------

def encode(params, cfg, images, mask=None):
    """Feature map ``B x N x d0`` for ``images`` (numpy ``B x H x W x 3``).

    ``mask`` is an optional ``B x gh x gw`` boolean array; masked patch
    embeddings are replaced by the shared mask token before the blocks.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ConfigError(
            f"expected images of shape B x {cfg.image_size} x {cfg.image_size} x 3, "
            f"got {images.shape}")
    b = images.shape[0]
    x = linear(Tensor(patchify(images, cfg.patch_size)), params, "patch_embed")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(b, cfg.num_patches, 1)
        x = T.where(mask, params["mask_token"], x)
    x = x + params["pos_embed"]
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        h = layer_norm(x, params, p + ".norm1")
        x = x + attend(h, h, params, p + ".attn", cfg.heads)
        x = x + mlp(layer_norm(x, params, p + ".norm2"), params, p + ".mlp")
    return x


def decode_labels(params, cfg, features):
    """Label-query cross-attention decoder -> (logits ``B x C``, g ``B x d``)."""
    q0 = params["label_embed"]
    if q0.shape != (cfg.num_classes, cfg.decoder_dim):
        raise ConfigError(
            f"label embeddings have shape {q0.shape}, config expects "
            f"{(cfg.num_classes, cfg.decoder_dim)}")
    mem = linear(features, params, "decoder.input_proj")
    q = layer_norm(q0, params, "decoder.norm_q")
    kv = layer_norm(mem, params, "decoder.norm_kv")
    h = q0 + attend(q, kv, params, "decoder.attn", cfg.heads)
    h = h + mlp(layer_norm(h, params, "decoder.norm2"), params, "decoder.mlp")
    logits = (h * params["decoder.classifier.weight"]).sum(axis=-1) + params["decoder.classifier.bias"]
    return logits, h.mean(axis=1)


def project_embed(params, cfg, features):
    """Mean-pool, two-layer MLP, unit-normalize -> ``B x proto_dim``."""
    z = mlp(features.mean(axis=1), params, "proj")
    return T.l2_normalize(z, axis=-1)


def reconstruct(params, cfg, features):
    """Single linear layer per patch, reassembled into ``B x H x W x 3``."""
    patches = linear(features, params, "mim.head")
    return unpatchify(patches, cfg.patch_size, cfg.grid)


class Model:
    """Student network: config plus its parameter dict."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg, seed=0):
        return cls(cfg, init_params(cfg, seed))

    def encode(self, images, mask=None):
        return encode(self.params, self.cfg, images, mask)

    def decode_labels(self, features):
        return decode_labels(self.params, self.cfg, features)

    def project_embed(self, features):
        return project_embed(self.params, self.cfg, features)

    def reconstruct(self, features):
        return reconstruct(self.params, self.cfg, features)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# -- momentum teacher ---------------------------------------------------------------

def teacher_names(params):
    return [n for n in params if not n.startswith(STUDENT_ONLY_PREFIXES)]


class TeacherState:
    """EMA shadow of the encoder, label decoder and label embeddings.

    Teacher tensors own (always-zero) gradient accumulators but are only
    ever evaluated under ``no_grad``, which is the stop-gradient.
    """

    def __init__(self, params, momentum=0.995):
        self.params = params
        self.momentum = momentum

    @classmethod
    def from_student(cls, student_params, momentum=0.995):
        params = {n: Tensor(student_params[n].data.copy(), requires_grad=True, name="teacher." + n)
                  for n in teacher_names(student_params)}
        return cls(params, momentum)

    def decode(self, cfg, images):
        with T.no_grad():
            logits, g = decode_labels(self.params, cfg, encode(self.params, cfg, images))
        return logits, g


def ema_update(teacher, student_params, m=None):
    """theta_teacher <- m * theta_teacher + (1 - m) * theta_student, in place."""
    m = teacher.momentum if m is None else m
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"momentum must lie in [0, 1], got {m}")
    names = teacher_names(student_params)
    if sorted(names) != sorted(teacher.params):
        raise ConfigError("teacher and student parameter sets do not correspond")
    for n in names:
        t, s = teacher.params[n], student_params[n]
        if t.shape != s.shape:
            raise ConfigError(f"shape mismatch for {n}: {t.shape} vs {s.shape}")
        if m == 0.0:
            t.data[...] = s.data
        else:
            # lerp form keeps teacher == student an exact fixed point
            t.data[...] = t.data + (1.0 - m) * (s.data - t.data)
    return teacher
