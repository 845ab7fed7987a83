"""The eight acceptance criteria, one test each, at their stated tolerances.

Every test records a PASS/FAIL line that is printed in the terminal
summary.  Criterion 6 trains the default configuration for 20 epochs and
takes several minutes on one core.
"""

import time

import numpy as np
import pytest

import test_objectives as tobj
import test_transport as ttr
from acceptance_log import record
from mtpretrain.checkpoint import load_tensors
from mtpretrain.cli import main
from mtpretrain.config import TrainConfig
from mtpretrain.data import SyntheticSpec
from mtpretrain.evaluate import probe_eval
from mtpretrain.experiments import gradcheck_cmd
from mtpretrain.model import TeacherState, ema_update
from mtpretrain.tensor import Tensor
from mtpretrain.train import TrainState, eval_dataset, fit, read_runlog
from mtpretrain.transport import sinkhorn_codes

import oracles

pytestmark = pytest.mark.slow

# measured once from the default configuration (seed 0); asserted at +-5%
PINNED = {
    "epoch1_mean_total": 0.6286767506883163,
    "epoch20_mean_total": 0.21419280143599903,
    "untrained_mAP": 0.28924360577162045,
    "trained_mAP": 0.43671459679685964,
}


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_1_gradient_fidelity():
    start = time.perf_counter()
    summary = gradcheck_cmd(tol=1e-4, seed=0)
    elapsed = time.perf_counter() - start
    errs = ", ".join(f"{k}={v:.1e}" for k, v in summary.max_errors().items())
    ok = summary.passed and set(summary.reports) == {"mcls", "cl", "mim", "mom", "total"} \
        and elapsed < 120
    record(1, "gradient fidelity", ok, f"{errs}; {elapsed:.1f}s")
    assert ok, summary.to_text()


def test_2_sinkhorn_marginals():
    rng = np.random.default_rng(2024)
    worst, bad = 0.0, 0
    for _ in range(100):
        b, k = int(rng.integers(1, 65)), int(rng.integers(2, 65))
        scores = unit_rows(rng, b, 32) @ unit_rows(rng, k, 32).T
        q = sinkhorn_codes(scores, epsilon=0.05, n_iters=50, t_max=10.0)
        dev = max(np.abs(q.sum(1) - 1 / b).max(), np.abs(q.sum(0) - 1 / k).max())
        worst = max(worst, dev)
        bad += dev > 1e-6

    q = sinkhorn_codes(np.array([[10.0, 0.0], [0.0, 10.0]]), 0.05, 50, t_max=10.0)
    ref = oracles.sinkhorn([[10, 0], [0, 10]], oracles.mp.mpf("0.05"), 50, 10)
    diag_err = float(np.abs(q - np.array([[float(v) for v in r] for r in ref], dtype=float)).max())

    ok = bad == 0 and diag_err <= 1e-6
    record(2, "Sinkhorn marginals", ok,
           f"{bad}/100 matrices above 1e-6 (worst {worst:.1e}); 2x2 oracle error {diag_err:.1e}")
    assert diag_err <= 1e-6
    assert bad == 0, f"{bad} of 100 matrices exceed 1e-6; worst deviation {worst:.3e}"


def test_3_truncation_stability():
    rng = np.random.default_rng(3)
    nonfinite = 0
    for _ in range(1000):
        b, k = rng.integers(1, 65, size=2)
        mag = 10 ** rng.uniform(0, 8)
        eps = 10 ** rng.uniform(-3, -1)
        q = sinkhorn_codes(rng.uniform(-mag, mag, size=(b, k)), eps, 50, t_max=10.0)
        nonfinite += int(np.count_nonzero(~np.isfinite(q)))
    record(3, "truncation stability", nonfinite == 0, f"{nonfinite} non-finite entries in 1000 trials")
    assert nonfinite == 0


EXAMPLES = [
    ttr.test_scores_unit_and_orthogonal,
    ttr.test_scores_match_scalar_loop,
    lambda: ttr.test_uniform_scores_give_uniform_codes(0.05),
    ttr.test_diagonal_2x2_matches_truncated_oracle,
    ttr.test_diagonal_2x2_without_truncation_is_half_identity,
    ttr.test_huge_scores_stay_finite_with_marginals,
    ttr.test_swapped_loss_symmetric,
    ttr.test_swapped_loss_opposite_prototypes_scalar_oracle,
    ttr.test_uniform_codes_and_predictions_give_two_log_k,
    tobj.test_asl_saturated_terms_vanish,
    tobj.test_asl_half_probability_positive,
    tobj.test_mim_identity_is_zero,
    tobj.test_mim_constant_offset,
    tobj.test_mim_matches_pixel_loop,
    tobj.test_cosine_matching_and_orthogonal_rows,
    tobj.test_cosine_matches_per_pair_loop,
    tobj.test_distillation_zero_for_identical_inputs,
    tobj.test_distillation_symmetric_in_values,
    tobj.test_distillation_hand_set_similarities,
    tobj.test_total_zero_terms,
    tobj.test_total_default_weights_on_unit_terms,
    tobj.test_total_linear_in_mim,
]


def test_4_analytic_loss_values():
    failures = []
    for example in EXAMPLES:
        try:
            example()
        except AssertionError as exc:
            failures.append(f"{getattr(example, '__name__', example)}: {exc}")
    record(4, "analytic loss values", not failures,
           f"{len(EXAMPLES) - len(failures)}/{len(EXAMPLES)} examples")
    assert not failures, "\n".join(failures)


def test_5_ema_contraction():
    rng = np.random.default_rng(5)
    student = {"w": Tensor(rng.normal(size=(8, 4))), "label_embed": Tensor(rng.normal(size=(3, 4)))}
    teacher = TeacherState({n: Tensor(p.data + rng.normal(size=p.shape)) for n, p in student.items()})

    def dist():
        return np.sqrt(sum(((teacher.params[n].data - student[n].data) ** 2).sum() for n in student))

    d0, worst = dist(), 0.0
    for k in range(1, 101):
        ema_update(teacher, student, 0.995)
        worst = max(worst, abs(dist() / (d0 * 0.995 ** k) - 1.0))
    record(5, "EMA contraction", worst <= 1e-12, f"max relative deviation {worst:.1e}")
    assert worst <= 1e-12


def test_6_toy_training_regression(tmp_path):
    cfg = TrainConfig()
    cfg.out_dir = str(tmp_path / "default")
    probe = eval_dataset(cfg)
    untrained = probe_eval(TrainState.create(cfg), probe)["mAP"]
    start = time.perf_counter()
    result = fit(cfg)
    minutes = (time.perf_counter() - start) / 60
    trained = probe_eval(result.state, probe)["mAP"]
    means = result.epoch_means("total")
    measured = {"epoch1_mean_total": means[0], "epoch20_mean_total": means[19],
                "untrained_mAP": untrained, "trained_mAP": trained}
    drift = {k: abs(measured[k] / v - 1) for k, v in PINNED.items()}
    ok = (minutes < 30 and means[19] < means[0] and trained > untrained
          and all(d <= 0.05 for d in drift.values()))
    record(6, "toy training regression", ok,
           f"{minutes:.1f} min; epoch mean total {means[0]:.4f} -> {means[19]:.4f}; "
           f"mAP {untrained:.4f} -> {trained:.4f}; max pin drift {max(drift.values()):.2%}")
    assert minutes < 30
    assert means[19] < means[0]
    assert trained > untrained
    for key, value in PINNED.items():
        assert measured[key] == pytest.approx(value, rel=0.05), key


def _reduced_config(path, out_dir):
    # default model at a shortened schedule: the criterion is structural
    cfg = TrainConfig()
    cfg.data.synthetic = SyntheticSpec(num_images=128, seed=0)
    cfg.data.eval_images = 64
    cfg.optim.epochs = 2
    cfg.out_dir = str(out_dir)
    cfg.save(str(path))
    return cfg


def test_7_ablation_harness(tmp_path, capsys):
    cfg_path = tmp_path / "reduced.json"
    _reduced_config(cfg_path, tmp_path / "plain")
    assert main(["train", "--config", str(cfg_path)]) == 0
    code = main(["ablate", "--config", str(cfg_path), "--drop", "mcls,cl,mim,mom",
                 "--out", str(tmp_path / "abl")])
    capsys.readouterr()
    csv_rows = (tmp_path / "abl" / "ablation" / "ablation.csv").read_text().splitlines()
    methods = [r.split(",")[0] for r in csv_rows[1:]]
    expected = ["Full model", "w/o Multi-label classification", "w/o Contrastive learning",
                "w/o MIM", "w/o Momentum distillation"]
    plain, _, meta_p = load_tensors(str(tmp_path / "plain" / "final.ckpt"))
    base, _, meta_b = load_tensors(str(tmp_path / "abl" / "ablation" / "full" / "final.ckpt"))
    bitwise = (plain.keys() == base.keys() and meta_p == meta_b
               and all(plain[k].tobytes() == base[k].tobytes() for k in plain))
    ok = code == 0 and methods == expected and bitwise
    record(7, "ablation harness", ok,
           f"{len(methods)} rows; baseline bitwise equal to plain run: {bitwise}")
    assert code == 0 and methods == expected and bitwise


def test_8_determinism_and_round_trip(tmp_path, capsys):
    cfg_path = tmp_path / "reduced.json"
    _reduced_config(cfg_path, tmp_path / "run")
    runs = []
    for _ in range(2):
        assert main(["train", "--config", str(cfg_path)]) == 0
        rows = [{k: v for k, v in r.items() if k != "wall_time"}
                for r in read_runlog(str(tmp_path / "run" / "runlog.csv"))]
        runs.append((rows, (tmp_path / "run" / "final.ckpt").read_bytes()))
    capsys.readouterr()
    identical = runs[0] == runs[1]

    state = TrainState.load(str(tmp_path / "run" / "final.ckpt"))
    images = np.stack([eval_dataset(state.cfg).image(i) for i in range(4)])
    before = state.model.decode_labels(state.model.encode(images))[0].data
    state.save(str(tmp_path / "again.ckpt"))
    reloaded = TrainState.load(str(tmp_path / "again.ckpt"))
    after = reloaded.model.decode_labels(reloaded.model.encode(images))[0].data
    round_trip = before.tobytes() == after.tobytes()

    ok = identical and round_trip
    record(8, "determinism and round-trip", ok,
           f"repeated runs identical: {identical}; forward after reload bitwise: {round_trip}")
    assert identical and round_trip
