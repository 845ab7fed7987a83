"""Probe metrics: per-class average precision, mAP and held-out MIM error."""

import warnings

import numpy as np

from .data import mask_patches
from .objectives import mim_loss
from .rng import stream
from .tensor import no_grad


def average_precision(scores, labels):
    """Rank-based AP: mean precision at the rank of each positive.

    Ties are broken by input order (stable sort).  Returns ``None`` when
    there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) > 0.5
    npos = int(labels.sum())
    if npos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / npos)


def mean_average_precision(scores, labels):
    """Per-class AP list (``None`` for classes without positives) and their mean."""
    per_class = [average_precision(scores[:, c], labels[:, c]) for c in range(labels.shape[1])]
    valid = [ap for ap in per_class if ap is not None]
    skipped = [c for c, ap in enumerate(per_class) if ap is None]
    if skipped:
        warnings.warn(f"classes {skipped} have no positives and are excluded from mAP",
                      stacklevel=2)
    return per_class, (float(np.mean(valid)) if valid else float("nan"))


def probe_eval(state, dataset, batch_size=64, seed=None):
    """Evaluate the student of ``state`` (a TrainState or checkpoint path) on ``dataset``.

    Returns ``{"per_class_ap", "mAP", "mim_mae"}``.  Reconstruction error is
    measured on masks from the ``probe`` stream, which training never uses.
    """
    if isinstance(state, str):
        from .train import TrainState
        state = TrainState.load(state)
    cfg = state.cfg
    enc = cfg.encoder
    seed = cfg.seed if seed is None else seed
    model = state.model
    n = len(dataset)
    logits = np.zeros((n, enc.num_classes))
    abs_err = 0.0
    omega = 0
    with no_grad():
        for lo in range(0, n, batch_size):
            idx = range(lo, min(lo + batch_size, n))
            images = np.stack([dataset.image(i) for i in idx])
            feats = model.encode(images)
            logits[lo:lo + len(idx)] = model.decode_labels(feats)[0].data
            masks = np.stack([mask_patches(cfg.mask_ratio, enc.grid, stream(seed, "probe", i)).grid
                              for i in idx])
            if masks.any():
                y = model.reconstruct(model.encode(images, mask=masks))
                count = int(masks.sum()) * enc.patch_size ** 2 * 3
                abs_err += mim_loss(y, images, masks, enc.patch_size).item() * count
                omega += count
    per_class, mAP = mean_average_precision(logits, dataset.labels)
    return {
        "per_class_ap": per_class,
        "mAP": mAP,
        "mim_mae": abs_err / omega if omega else None,
    }
