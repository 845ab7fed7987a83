"""Training configuration: nested dataclasses that round-trip through JSON."""

import dataclasses
import json
import warnings
from dataclasses import dataclass, field

from .data import SyntheticSpec, masked_count
from .errors import ConfigError
from .model import EncoderConfig
from .objectives import AsymmetricLossParams, LossWeights


@dataclass
class PrototypeSettings:
    num_prototypes: int = 32
    tau: float = 0.1
    epsilon: float = 0.05
    n_iters: int = 3
    t_max: float = 10.0


@dataclass
class OptimConfig:
    """AdamW with linear warmup then cosine decay to ``lr_floor``."""

    lr: float = 1e-4
    lr_floor: float = 1e-7
    weight_decay: float = 0.05
    # 5 of 30 epochs, scaled to the 20-epoch default
    warmup_epochs: float = 20 / 6
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class DataConfig:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    manifest: str = ""
    root: str = ""
    eval_images: int = 500
    eval_seed: int = 1


@dataclass
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    asl: AsymmetricLossParams = field(default_factory=AsymmetricLossParams)
    weights: LossWeights = field(default_factory=LossWeights)
    prototypes: PrototypeSettings = field(default_factory=PrototypeSettings)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    mask_ratio: float = 0.6
    momentum: float = 0.995
    distill_tau: float = 0.1
    batch_size: int = 32
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 0
    num_workers: int = 0
    log_wall_time: bool = True

    def validate(self):
        self.encoder.validate()
        self.asl.validate()
        self.weights.validate()
        syn = self.data.synthetic
        if not self.data.manifest:
            syn.validate()
            if syn.image_size != self.encoder.image_size or syn.num_classes != self.encoder.num_classes:
                raise ConfigError(
                    "data.synthetic image_size/num_classes must match the encoder config")
        pr = self.prototypes
        if pr.num_prototypes < 2 or not pr.epsilon > 0 or pr.n_iters < 1 or not pr.tau > 0:
            raise ConfigError("prototype settings need K >= 2, epsilon > 0, n_iters >= 1, tau > 0")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]")
        if self.weights.alpha3 > 0 and masked_count(self.mask_ratio, self.encoder.num_patches) == 0:
            raise ConfigError("mask_ratio masks no patch but the reconstruction loss is enabled")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must lie in [0, 1]")
        if not self.distill_tau > 0:
            raise ConfigError("distill_tau must be positive")
        if self.batch_size < 1 or self.optim.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        o = self.optim
        if not (o.lr > 0 and 0 <= o.lr_floor <= o.lr and o.weight_decay >= 0 and o.warmup_epochs >= 0):
            raise ConfigError("need lr > 0, 0 <= lr_floor <= lr, weight_decay >= 0, warmup_epochs >= 0")
        if self.batch_size < pr.num_prototypes / 4:
            warnings.warn(
                f"batch_size {self.batch_size} < K/4 = {pr.num_prototypes / 4}; "
                "equal-partition codes will be poorly conditioned", stacklevel=2)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw):
        return _build(cls, raw or {}, "config")

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        try:
            raw = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(raw)


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in raw.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)
