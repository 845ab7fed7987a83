"""Small training configurations shared by the trainer and CLI tests."""

from mtpretrain.config import TrainConfig
from mtpretrain.data import SyntheticSpec
from mtpretrain.model import EncoderConfig


def toy_config(out_dir, num_images=8, epochs=2, batch_size=4, seed=0, **overrides):
    cfg = TrainConfig()
    cfg.encoder = EncoderConfig(image_size=64, patch_size=32, embed_dim=16, depth=1, heads=2,
                                decoder_dim=16, num_classes=4, proto_dim=8)
    cfg.prototypes.num_prototypes = 4
    cfg.data.synthetic = SyntheticSpec(num_images=num_images, image_size=64, num_classes=4, seed=seed)
    cfg.data.eval_images = 16
    cfg.optim.epochs = epochs
    cfg.optim.warmup_epochs = 1
    cfg.optim.lr = 1e-3
    cfg.batch_size = batch_size
    cfg.seed = seed
    cfg.out_dir = str(out_dir)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg
