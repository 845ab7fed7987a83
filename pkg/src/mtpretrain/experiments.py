"""Ablation harness and the whole-pipeline gradient check."""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .data import SyntheticSpec, generate_shapes_dataset, make_batch
from .errors import ConfigError
from .evaluate import probe_eval
from .gradcheck import grad_check
from .model import EncoderConfig
from .objectives import TASKS, LossWeights
from .rng import stream
from .train import TERMS, TrainState, compute_losses, eval_dataset, fit, frozen_codes, load_dataset

BASELINE_LABEL = "Full model"


def copy_config(cfg):
    return TrainConfig.from_dict(cfg.to_dict())


def parse_tasks(drop):
    if isinstance(drop, str):
        drop = [t for t in drop.split(",") if t.strip()]
    drop = [t.strip() for t in drop]
    unknown = [t for t in drop if t not in TASKS]
    if unknown:
        raise ConfigError(
            f"unknown task(s) {', '.join(unknown)}; valid names are {', '.join(TASKS)}")
    return drop


def ablation_configs(cfg, drop):
    """``[(label, task or None, config)]``: the baseline then one run per dropped task."""
    runs = [(BASELINE_LABEL, None, copy_config(cfg))]
    for task in parse_tasks(drop):
        c = copy_config(cfg)
        alpha, label = TASKS[task]
        setattr(c.weights, alpha, 0.0)
        runs.append((label, task, c))
    return runs


@dataclass
class AblationReport:
    rows: list = field(default_factory=list)

    COLUMNS = ("method", "mAP", "mim_mae", "l_mcls", "l_cl", "l_mim", "l_mom", "total")

    def to_text(self):
        def cell(v):
            if v is None:
                return "-"
            return f"{v:.4f}" if isinstance(v, float) else str(v)

        width = max(len(r["method"]) for r in self.rows) + 2
        head = "method".ljust(width) + "".join(c.rjust(10) for c in self.COLUMNS[1:])
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(r["method"].ljust(width)
                         + "".join(cell(r[c]).rjust(10) for c in self.COLUMNS[1:]))
        return "\n".join(lines)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow(["" if r[c] is None else r[c] for c in self.COLUMNS])


def ablate(cfg, drop, out_dir=None, dataset=None, probe_data=None):
    """Train the full config and each single-task-removed variant under one seed.

    Loss columns hold the raw (unweighted) final-epoch means; ``mAP`` and
    ``mim_mae`` come from :func:`probe_eval` on the held-out probe set.
    """
    runs = ablation_configs(cfg, drop)
    root = out_dir or os.path.join(cfg.out_dir, "ablation")
    dataset = dataset if dataset is not None else load_dataset(cfg)
    if probe_data is None:
        probe_data = dataset if cfg.data.manifest else eval_dataset(cfg)
    report = AblationReport()
    for label, task, c in runs:
        c.out_dir = os.path.join(root, task or "full")
        result = fit(c, dataset=dataset)
        metrics = probe_eval(result.state, probe_data)
        last = c.optim.epochs - 1
        row = {"method": label, "dropped": task, "checkpoint": result.checkpoint,
               "mAP": metrics["mAP"], "mim_mae": metrics["mim_mae"]}
        for term in TERMS:
            means = result.epoch_means("l_" + term)
            row["l_" + term] = means.get(last)
        row["total"] = result.epoch_means("total").get(last)
        report.rows.append(row)
    os.makedirs(root, exist_ok=True)
    report.write_csv(os.path.join(root, "ablation.csv"))
    with open(os.path.join(root, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text() + "\n")
    return report


# -- gradient check of the full pipeline -------------------------------------------------

TINY_ENCODER = dict(image_size=64, patch_size=32, embed_dim=16, depth=1, heads=2,
                    decoder_dim=16, num_classes=4, proto_dim=8)


def tiny_config(cfg=None, seed=0):
    """Shrink ``cfg`` to gradient-check size (image 64, d0=16, C=4, K=4, B=2)."""
    c = copy_config(cfg) if cfg is not None else TrainConfig()
    c.encoder = EncoderConfig(**TINY_ENCODER)
    c.prototypes.num_prototypes = 4
    c.batch_size = 2
    c.seed = seed
    c.data.manifest = ""
    c.data.synthetic = SyntheticSpec(num_images=2, image_size=64, num_classes=4, seed=seed)
    return c


@dataclass
class GradcheckSummary:
    tol: float
    reports: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(r.passed for r in self.reports.values())

    def max_errors(self):
        return {name: r.max_error for name, r in self.reports.items()}

    def to_text(self):
        lines = []
        for name, r in self.reports.items():
            status = "PASS" if r.passed else "FAIL"
            lines.append(f"{name:6s} max_rel_err={r.max_error:.3e} tol={self.tol:g} {status}")
        return "\n".join(lines)


def gradcheck_cmd(cfg=None, tol=1e-4, seed=0, h=1e-5, max_entries=6):
    """Finite-difference check of every enabled loss and of the weighted total.

    Codes are computed once at the base point and held fixed, matching the
    stop-gradient on the assignment.  The teacher is nudged away from the
    student so the distillation term has a non-zero gradient.
    """
    c = tiny_config(cfg, seed)
    state = TrainState.create(c)
    rng = stream(seed, "gradcheck", 0)
    for p in state.teacher.params.values():
        p.data += rng.normal(0.0, 0.05, size=p.shape)
    # move the biases and norm gains off their symmetric init values
    for p in state.model.params.values():
        p.data += rng.normal(0.0, 0.02, size=p.shape)
    dataset = generate_shapes_dataset(c.data.synthetic)
    batch = make_batch(dataset, np.arange(2), seed, 0, c.mask_ratio, c.encoder.patch_size)
    codes = frozen_codes(state, batch)
    params = state.parameters()

    checks = []
    for task in TERMS:
        if c.weights.of(task) > 0:
            w = LossWeights(0.0, 0.0, 0.0, 0.0)
            setattr(w, TASKS[task][0], 1.0)
            checks.append((task, w))
    if checks:
        checks.append(("total", c.weights))

    summary = GradcheckSummary(tol)
    for name, w in checks:
        def f(w=w):
            return compute_losses(state, batch, w, codes)[1]

        state.zero_grad()
        reached = {id(t) for t in f().backward()}
        subset = {n: p for n, p in params.items() if id(p) in reached}
        summary.reports[name] = grad_check(f, subset, h=h, tol=tol, max_entries=max_entries,
                                           rng=stream(seed, "gradcheck", 1 + len(summary.reports)))
    state.zero_grad()
    return summary
