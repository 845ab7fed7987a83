"""Multi-task training loop: state, optimizer, schedule, step and fit."""

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .config import TrainConfig
from .data import (Dataset, SyntheticSpec, generate_shapes_dataset,
                   load_manifest_dataset, make_batch, worker_pool)
from .errors import ConfigError, DomainError, NumericalAbort
from .model import Model, TeacherState, ema_update, init_params
from .objectives import (asymmetric_multilabel_loss, mim_loss,
                         momentum_distillation_loss, total_loss)
from .rng import stream
from .transport import PrototypeBank, prototype_scores, sinkhorn_codes, swapped_prediction_loss

TERMS = ("mcls", "cl", "mim", "mom")


# -- schedule ---------------------------------------------------------------------

def lr_at(step, total_steps, warmup_steps, peak, floor):
    """Linear warmup to ``peak`` over ``warmup_steps``, then cosine to ``floor``.

    Step 0 gets ``peak / warmup_steps``, step ``warmup_steps - 1`` gets
    ``peak`` and the last step (``total_steps - 1``) gets ``floor``.
    """
    if warmup_steps > 0 and step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    anchor = max(warmup_steps - 1, 0)
    span = total_steps - 1 - anchor
    if span <= 0:
        return floor
    t = min((step - anchor) / span, 1.0)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


def schedule_lengths(cfg, num_images):
    steps_per_epoch = math.ceil(num_images / cfg.batch_size)
    total = cfg.optim.epochs * steps_per_epoch
    warmup = min(int(round(cfg.optim.warmup_epochs * steps_per_epoch)), total)
    return steps_per_epoch, total, warmup


# -- optimizer ---------------------------------------------------------------------

def decays(name, value):
    return value.ndim >= 2 and name not in ("pos_embed", "prototypes")


class AdamW:
    """Adam with decoupled weight decay.

    Only parameters listed in ``active`` move on a given step, so a head
    whose loss is disabled is left exactly as it was (no decay drift).
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr, active=None):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if active is not None and name not in active:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            if self.weight_decay and decays(name, p.data):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


# -- state -----------------------------------------------------------------------------

@dataclass
class TrainState:
    cfg: TrainConfig
    model: Model
    teacher: TeacherState
    bank: PrototypeBank
    optimizer: AdamW
    step: int = 0
    epoch: int = 0

    @classmethod
    def create(cls, cfg):
        cfg.validate()
        model = Model(cfg.encoder, init_params(cfg.encoder, cfg.seed))
        teacher = TeacherState.from_student(model.params, cfg.momentum)
        pr = cfg.prototypes
        bank = PrototypeBank.create(pr.num_prototypes, cfg.encoder.proto_dim,
                                    stream(cfg.seed, "init", 1), tau=pr.tau,
                                    epsilon=pr.epsilon, n_iters=pr.n_iters, t_max=pr.t_max)
        state = cls(cfg, model, teacher, bank, None)
        o = cfg.optim
        state.optimizer = AdamW(state.parameters(), o.beta1, o.beta2, o.eps, o.weight_decay)
        return state

    def parameters(self):
        params = dict(self.model.params)
        params["prototypes"] = self.bank.prototypes
        return params

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    # checkpoint container ---------------------------------------------------------
    def save(self, path):
        tensors = {}
        for n, p in self.model.params.items():
            tensors["model." + n] = p.data
        for n, p in self.teacher.params.items():
            tensors["teacher." + n] = p.data
        tensors["bank.prototypes"] = self.bank.prototypes.data
        for n in self.optimizer.m:
            tensors["optim.m." + n] = self.optimizer.m[n]
            tensors["optim.v." + n] = self.optimizer.v[n]
        meta = {"step": self.step, "epoch": self.epoch, "optim_t": self.optimizer.t}
        ckpt.save_tensors(path, tensors, self.cfg.to_dict(), meta)

    @classmethod
    def load(cls, path):
        tensors, raw_cfg, meta = ckpt.load_tensors(path)
        cfg = TrainConfig.from_dict(raw_cfg)
        state = cls.create(cfg)
        for group, params in (("model.", state.model.params), ("teacher.", state.teacher.params)):
            for n, p in params.items():
                key = group + n
                if key not in tensors or tensors[key].shape != p.shape:
                    raise ConfigError(f"checkpoint {path} lacks a matching tensor {key}")
                p.data[...] = tensors[key]
        state.bank.prototypes.data[...] = tensors["bank.prototypes"]
        for n in state.optimizer.m:
            state.optimizer.m[n] = tensors.get("optim.m." + n, state.optimizer.m[n]).copy()
            state.optimizer.v[n] = tensors.get("optim.v." + n, state.optimizer.v[n]).copy()
        state.optimizer.t = int(meta.get("optim_t", 0))
        state.step = int(meta.get("step", 0))
        state.epoch = int(meta.get("epoch", 0))
        return state


# -- one step ---------------------------------------------------------------------------

def frozen_codes(state, batch):
    """Sinkhorn codes for the batch at the current parameters."""
    m = state.model
    f_t = m.project_embed(m.encode(batch.view_t)).detach()
    f_s = m.project_embed(m.encode(batch.view_s)).detach()
    b = state.bank
    return (sinkhorn_codes(prototype_scores(f_t, b), b.epsilon, b.n_iters, b.t_max),
            sinkhorn_codes(prototype_scores(f_s, b), b.epsilon, b.n_iters, b.t_max))


def compute_losses(state, batch, weights=None, codes=None):
    """Evaluate the enabled task losses; disabled heads are never run.

    Returns ``(terms, total)`` where ``terms`` maps each of
    ``mcls, cl, mim, mom`` to a scalar Tensor or ``None``.
    """
    cfg = state.cfg
    w = weights or cfg.weights
    model, enc = state.model, cfg.encoder
    on = {task: w.of(task) > 0 for task in TERMS}
    terms = dict.fromkeys(TERMS)

    if on["mim"]:
        y = model.reconstruct(model.encode(batch.view_t, mask=batch.masks))
        terms["mim"] = mim_loss(y, batch.view_t, batch.masks, enc.patch_size)
    if on["cl"] or on["mcls"] or on["mom"]:
        feats_t = model.encode(batch.view_t)
    if on["cl"]:
        f_t = model.project_embed(feats_t)
        f_s = model.project_embed(model.encode(batch.view_s))
        terms["cl"] = swapped_prediction_loss(f_t, f_s, state.bank, codes)
    if on["mcls"] or on["mom"]:
        logits, g = model.decode_labels(feats_t)
        if on["mcls"]:
            terms["mcls"] = asymmetric_multilabel_loss(logits, batch.targets, cfg.asl)
        if on["mom"]:
            _, g_prime = state.teacher.decode(enc, batch.view_t)
            terms["mom"] = momentum_distillation_loss(
                g, g_prime, model.params["label_embed"],
                state.teacher.params["label_embed"], tau=cfg.distill_tau)
    total = total_loss(terms["mcls"], terms["cl"], terms["mim"], terms["mom"], w)
    return terms, total


def dump_diagnostics(state, batch, out_dir, reason):
    dump = os.path.join(out_dir, f"abort_step{state.step}")
    os.makedirs(dump, exist_ok=True)
    np.savez(os.path.join(dump, "batch.npz"), view_t=batch.view_t, view_s=batch.view_s,
             targets=batch.targets, masks=batch.masks, indices=batch.indices)
    norms = {n: float(np.linalg.norm(p.data)) for n, p in state.parameters().items()}
    with open(os.path.join(dump, "diagnostics.json"), "w", encoding="utf-8") as fh:
        json.dump({"step": state.step, "reason": reason, "param_norms": norms}, fh, indent=2)
    return dump


def train_step(state, batch, lr, out_dir=None):
    """Forward all enabled heads, backprop, AdamW, EMA and prototype re-projection.

    Returns the unweighted loss terms and the weighted total as floats.
    Raises :class:`NumericalAbort` on a non-finite loss.
    """
    state.zero_grad()
    reason = None
    try:
        terms, total = compute_losses(state, batch)
        if not np.isfinite(total.item()):
            reason = "non-finite total loss"
    except DomainError as exc:
        reason = str(exc)
    if reason is not None:
        dump = dump_diagnostics(state, batch, out_dir, reason) if out_dir else None
        raise NumericalAbort(f"step {state.step}: {reason}", dump)

    reached = {id(t) for t in total.backward()}
    active = {n for n, p in state.parameters().items() if id(p) in reached}
    state.optimizer.step(lr, active)
    ema_update(state.teacher, state.model.params, state.cfg.momentum)
    if "prototypes" in active:
        state.bank.normalize_()
    state.step += 1
    record = {k: (None if v is None else v.item()) for k, v in terms.items()}
    record["total"] = total.item()
    return record


# -- run log ----------------------------------------------------------------------------

RUNLOG_HEADER = ("step", "epoch", "l_mcls", "l_cl", "l_mim", "l_mom", "total", "lr", "wall_time")


def _fmt(value):
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, float) else str(value)


class RunLog:
    """Append-only CSV with one row per optimizer step."""

    def __init__(self, path):
        self.path = path
        self.rows = []
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(RUNLOG_HEADER)
        self._fh.flush()

    def append(self, row):
        self.rows.append(row)
        self._writer.writerow([_fmt(row.get(k)) for k in RUNLOG_HEADER])
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_runlog(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {}
            for k, v in raw.items():
                if v == "":
                    row[k] = None
                elif k in ("step", "epoch"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows


def epoch_means(rows, key="total"):
    by_epoch = {}
    for row in rows:
        if row.get(key) is not None:
            by_epoch.setdefault(row["epoch"], []).append(row[key])
    return {e: float(np.mean(v)) for e, v in sorted(by_epoch.items())}


# -- fit ----------------------------------------------------------------------------------

def load_dataset(cfg):
    if cfg.data.manifest:
        root = cfg.data.root or os.path.dirname(os.path.abspath(cfg.data.manifest))
        return load_manifest_dataset(root, cfg.data.manifest, cfg.encoder.num_classes,
                                     cfg.encoder.image_size)
    return generate_shapes_dataset(cfg.data.synthetic)


def eval_dataset(cfg):
    syn = cfg.data.synthetic
    return generate_shapes_dataset(SyntheticSpec(
        num_images=cfg.data.eval_images, image_size=cfg.encoder.image_size,
        num_classes=cfg.encoder.num_classes, min_shapes=syn.min_shapes,
        max_shapes=syn.max_shapes, seed=cfg.data.eval_seed))


def prepare_out_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write_test")
        with open(probe, "w") as fh:
            fh.write("ok")
        os.remove(probe)
    except OSError as exc:
        raise ConfigError(f"output directory {path!r} is not writable: {exc}") from None


@dataclass
class FitResult:
    checkpoint: str
    runlog: str
    rows: list = field(default_factory=list)
    state: TrainState = None

    def epoch_means(self, key="total"):
        return epoch_means(self.rows, key)


def fit(cfg, dataset=None, state=None, progress=None):
    """Train for ``cfg.optim.epochs`` epochs and write checkpoints plus the run log."""
    cfg.validate()
    out = cfg.out_dir
    prepare_out_dir(out)
    dataset = dataset if dataset is not None else load_dataset(cfg)
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    state = state if state is not None else TrainState.create(cfg)
    cfg.save(os.path.join(out, "config.json"))

    spe, total_steps, warmup = schedule_lengths(cfg, len(dataset))
    log = RunLog(os.path.join(out, "runlog.csv"))
    pool = worker_pool(cfg.num_workers)
    start = time.perf_counter()
    try:
        for epoch in range(state.epoch, cfg.optim.epochs):
            order = stream(cfg.seed, "shuffle", epoch).permutation(len(dataset))
            for b in range(spe):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = make_batch(dataset, idx, cfg.seed, epoch, cfg.mask_ratio,
                                   cfg.encoder.patch_size, pool)
                lr = lr_at(state.step, total_steps, warmup, cfg.optim.lr, cfg.optim.lr_floor)
                step = state.step
                rec = train_step(state, batch, lr, out)
                log.append({
                    "step": step, "epoch": epoch,
                    "l_mcls": rec["mcls"], "l_cl": rec["cl"], "l_mim": rec["mim"],
                    "l_mom": rec["mom"], "total": rec["total"], "lr": lr,
                    "wall_time": time.perf_counter() - start if cfg.log_wall_time else None,
                })
            state.epoch = epoch + 1
            if progress:
                progress(epoch, log.rows)
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                state.save(os.path.join(out, f"epoch{state.epoch:03d}.ckpt"))
    finally:
        log.close()
        if pool is not None:
            pool.shutdown()
    final = os.path.join(out, "final.ckpt")
    state.save(final)
    return FitResult(final, log.path, log.rows, state)


def dataset_from_arrays(images, labels):
    """Wrap float images in [0, 1] (``n x H x W x 3``) and label rows as a Dataset."""
    images = np.round(np.clip(np.asarray(images), 0, 1) * 255).astype(np.uint8)
    labels = np.asarray(labels, dtype=np.float64)
    return Dataset(images, labels, labels.shape[1])

