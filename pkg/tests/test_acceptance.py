"""Acceptance criteria, one test each.

Every test appends a ``[ACCEPT n] PASS|FAIL`` line that the terminal summary
prints, then asserts at the stated tolerance.
"""

import math
import time

import numpy as np
import pytest
from oracles import brute_aupr, brute_auroc, random_instances

from retclip import tensor as T
from retclip.data import AugmentConfig, SyntheticCohortConfig, eye_label_matrix, generate_cohort, preprocess
from retclip.evaluate import AdaptConfig, LabeledImageDataset, SplitSpec, aupr, auroc, fine_tune, linear_probe
from retclip.gradcheck import THRESHOLD, run_gradcheck, tiny_config
from retclip.model import (
    BatchFeatures,
    RetClipConfig,
    encode_batch,
    forward_batch,
    init_params,
    logit_scale_of,
    retrieval_top1,
    tripartite_loss,
)
from retclip.tensor import Tensor
from retclip.train import Checkpoint, TrainConfig, load_checkpoint, lr_at_step, pretrain, save_checkpoint


def record(log, n, ok, what):
    log.append(f"[ACCEPT {n:>2}] {'PASS' if ok else 'FAIL'}  {what}")
    return ok


def test_01_gradient_correctness(acceptance_log):
    start = time.perf_counter()
    report = run_gradcheck(eps=1e-6, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(report, key=report.get)
    ok = all(v <= THRESHOLD for v in report.values()) and elapsed < 30
    record(acceptance_log, 1, ok, f"gradcheck over {len(report)} components, worst {worst} "
           f"{report[worst]:.2e} (<= 1e-4), {elapsed:.1f}s (< 30s)")
    assert ok


def test_02_loss_calibration(acceptance_log):
    same = Tensor(np.ones((4, 5)))
    feats = BatchFeatures(*([same] * 7))
    out = tripartite_loss(feats, math.log(1 / 0.07))
    errs = [abs(out.values()[k] - math.log(4)) for k in ("loss_left", "loss_right", "loss_patient")]
    total_err = abs(out.total.item() - 3 * math.log(4))
    ok = max(errs) <= 1e-9 and total_err <= 1e-9
    record(acceptance_log, 2, ok, f"equal similarities, N=4: max |L - ln 4| {max(errs):.1e}, "
           f"|total - 3 ln 4| {total_err:.1e} (<= 1e-9)")
    assert ok


@pytest.fixture(scope="module")
def overfit_run():
    # distinct left label sets, right label sets and reports for all 8 patients
    cohort = generate_cohort(SyntheticCohortConfig(n_patients=8, n_conditions=6, condition_prior=0.4, seed=4))
    for attr in ("left_labels", "right_labels", "report_text"):
        assert len({getattr(p, attr) for p in cohort}) == 8
    ident = AugmentConfig.identity(32, (0.5,) * 3, (0.5,) * 3)
    start = time.perf_counter()
    result = pretrain(cohort, RetClipConfig(), TrainConfig(max_steps=200, augment=ident))
    elapsed = time.perf_counter() - start
    left = np.stack([preprocess(p.left_image, ident) for p in cohort])
    right = np.stack([preprocess(p.right_image, ident) for p in cohort])
    with T.no_grad():
        feats, losses = forward_batch(result.model, cohort, left_images=left, right_images=right)
    return result, feats, losses, elapsed


def test_03_overfit_retrieval(acceptance_log, overfit_run):
    result, feats, losses, elapsed = overfit_run
    acc = retrieval_top1(feats)
    total = losses.total.item()
    perfect = all(a == (1.0, 1.0) for a in acc.values())
    ok = total < 0.1 and perfect and elapsed < 60
    shown = ", ".join(f"{lv} {a[0]:.2f}/{a[1]:.2f}" for lv, a in acc.items())
    record(acceptance_log, 3, ok, f"8 patients x 200 steps: total loss {total:.4f} (< 0.1), "
           f"top-1 i2t/t2i {shown}, {elapsed:.1f}s (< 60s)")
    assert ok


def test_overfit_loss_trends_down(overfit_run):
    losses = np.array([r["loss_total"] for r in overfit_run[0].log])
    smooth = losses.reshape(-1, 20).mean(axis=1)
    assert np.all(np.diff(smooth) <= 0), smooth


def test_04_additivity_and_permutation(acceptance_log):
    model = init_params(tiny_config(), 0)
    rng = np.random.default_rng(0)
    add_err = perm_err = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        left, right = rng.random((n, 8, 8, 3)), rng.random((n, 8, 8, 3))
        tokens = [[0] + list(rng.integers(3, 16, int(rng.integers(0, 5)))) for _ in range(n)]
        perm = rng.permutation(n)
        with T.no_grad():
            a = tripartite_loss(encode_batch(model, left, right, tokens), logit_scale_of(model))
            b = tripartite_loss(encode_batch(model, left[perm], right[perm], [tokens[i] for i in perm]),
                                logit_scale_of(model))
        v = a.values()
        add_err = max(add_err, abs(v["loss_total"] - (v["loss_left"] + v["loss_right"] + v["loss_patient"])))
        perm_err = max(perm_err, abs(v["loss_total"] - b.total.item()))
    ok = add_err <= 1e-12 and perm_err <= 1e-9
    record(acceptance_log, 4, ok, f"100 batches: additivity err {add_err:.1e} (<= 1e-12), "
           f"permutation err {perm_err:.1e} (<= 1e-9)")
    assert ok


def test_05_freezing_contract(acceptance_log):
    cohort = generate_cohort(SyntheticCohortConfig(n_patients=40, seed=8))
    x, y = eye_label_matrix(cohort, 4)
    ds = LabeledImageDataset(x, y, "multilabel", 4)
    model = init_params(RetClipConfig(), 0)
    before = {n: t.data.tobytes() for n, t in model.params.items()}
    cfg = AdaptConfig(epochs=2, seed=0)
    linear_probe(model, ds, SplitSpec(seed=0), cfg)
    frozen = {n: t.data.tobytes() for n, t in model.params.items()} == before
    _, tuned = fine_tune(model, ds, SplitSpec(seed=0), cfg, return_model=True)
    changed = [n for n, t in tuned.params.subset("img_enc.") if t.data.tobytes() != before[n]]
    n_enc = len(tuned.params.subset("img_enc."))
    ok = frozen and len(changed) > 0
    record(acceptance_log, 5, ok, f"probe leaves encoder byte-identical: {frozen}; "
           f"fine-tune changed {len(changed)}/{n_enc} encoder tensors")
    assert ok


def test_06_metric_oracles(acceptance_log):
    mismatches = non_invariant = 0
    for scores, labels in random_instances(200, seed=6):
        if auroc(scores, labels) != float(brute_auroc(scores.tolist(), labels.tolist())):
            mismatches += 1
        if aupr(scores, labels) != brute_aupr(scores.tolist(), labels.tolist()):
            mismatches += 1
        if auroc(np.exp(2 * scores) + 3, labels) != auroc(scores, labels):
            non_invariant += 1
    ok = mismatches == 0 and non_invariant == 0
    record(acceptance_log, 6, ok, f"200 instances (n <= 50, with ties): {mismatches} oracle mismatches, "
           f"{non_invariant} monotone-transform violations")
    assert ok


@pytest.mark.slow
def test_07_ablation_direction(acceptance_log):
    k, n_seeds = 4, 5
    start = time.perf_counter()
    scores = {"all": [], "patient": [], "monocular": []}
    for seed in range(n_seeds):
        cohort = generate_cohort(SyntheticCohortConfig(n_patients=500, n_conditions=k, seed=seed))
        x, y = eye_label_matrix(cohort, k)
        ds = LabeledImageDataset(x, y, "multilabel", k, name="per-eye")
        for loss in scores:
            model = pretrain(cohort, RetClipConfig(), TrainConfig(epochs=10, loss=loss, seed=seed)).model
            scores[loss].append(linear_probe(model, ds, SplitSpec(seed=seed), AdaptConfig(seed=seed))["auroc"])
    elapsed = time.perf_counter() - start
    mean = {name: float(np.mean(v)) for name, v in scores.items()}
    m_pat = mean["all"] - mean["patient"]
    m_mono = mean["all"] - mean["monocular"]
    ok = m_pat >= -0.01 and m_mono >= -0.01 and elapsed < 600
    record(acceptance_log, 7, ok, f"probe macro AUROC over {n_seeds} seeds: all {mean['all']:.4f}, "
           f"patient {mean['patient']:.4f}, monocular {mean['monocular']:.4f}; margins "
           f"{m_pat:+.4f} / {m_mono:+.4f} (>= -0.01), {elapsed:.0f}s (< 600s)")
    assert ok


def test_08_warmup(acceptance_log):
    cfg = TrainConfig(peak_lr=3e-5, warmup_steps=50)
    ramp = [lr_at_step(s, cfg) for s in range(51)]
    monotone = all(a <= b for a, b in zip(ramp, ramp[1:]))
    ok = ramp[0] == 0.0 and abs(ramp[50] - 3e-5) <= 1e-18 and monotone
    record(acceptance_log, 8, ok, f"lr(0) = {ramp[0]:g}, lr(50) = {ramp[50]:g}, monotone ramp: {monotone}")
    assert ok


def test_09_determinism(acceptance_log, tmp_path):
    cohort = generate_cohort(SyntheticCohortConfig(n_patients=20, seed=9))
    cfg = TrainConfig(epochs=2, warmup_steps=2, seed=9)
    blobs = []
    for run in ("a", "b"):
        pretrain(cohort, RetClipConfig(), cfg, tmp_path / f"{run}.ckpt", tmp_path / f"{run}.csv")
        blobs.append(((tmp_path / f"{run}.ckpt").read_bytes(), (tmp_path / f"{run}.csv").read_bytes()))
    same_ckpt, same_log = blobs[0][0] == blobs[1][0], blobs[0][1] == blobs[1][1]
    ok = same_ckpt and same_log
    record(acceptance_log, 9, ok, f"two runs: checkpoints identical {same_ckpt}, metric logs identical {same_log}")
    assert ok


def test_10_checkpoint_round_trip(acceptance_log, tmp_path):
    cohort = generate_cohort(SyntheticCohortConfig(n_patients=6, seed=10))
    model = pretrain(cohort, RetClipConfig(), TrainConfig(max_steps=5, warmup_steps=1, seed=10)).model
    save_checkpoint(Checkpoint.from_model(model), tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt").to_model()
    with T.no_grad():
        fa, la = forward_batch(model, cohort)
        fb, lb = forward_batch(loaded, cohort)
    worst = 0.0
    for name in ("v_l", "v_r", "v_p", "t0", "t_l", "t_r", "t_p"):
        a, b = getattr(fa, name).data, getattr(fb, name).data
        worst = max(worst, np.abs(a - b).max() / np.abs(a).max())
    loss_rel = abs(la.total.item() - lb.total.item()) / abs(la.total.item())
    ok = worst <= 1e-6 and loss_rel <= 1e-6
    record(acceptance_log, 10, ok, f"reloaded forward: feature rel err {worst:.1e}, loss rel err "
           f"{loss_rel:.1e} (<= 1e-6)")
    assert ok
