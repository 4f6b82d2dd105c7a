"""Acceptance checks at the contracted tolerances, one summary line each.

The ablation and robustness fixtures train on the default corpus and take
several minutes; every other check runs in seconds.
"""

import hashlib
import math
import os
import time

import numpy as np
import pytest

from conftest import record
from rgbt_decouple import kernels, verify
from rgbt_decouple.ablation import VARIANTS, ablation_run, robustness_run, summarize
from rgbt_decouple.cli import EXIT_OK, main
from rgbt_decouple.data import CorpusSpec, generate, stack
from rgbt_decouple.metrics import confusion_matrix, scores
from rgbt_decouple.model import NetworkConfig
from rgbt_decouple.train import TrainConfig, total_loss
from rgbt_decouple import tensor as T

SEEDS = (0, 1, 2)
ABLATION_BUDGET_S = 600.0
JOBS = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def _suite(name):
    return verify.SUITES[name]()


def _failures(res):
    return "; ".join(res.failures[:3])


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    ops = _suite("op-gradients")
    e2e = _suite("e2e-gradient")
    seconds = time.perf_counter() - t0
    ok = ops.passed and e2e.passed and ops.worst < 1e-6 and e2e.worst < 1e-4 and e2e.checks == 10 and seconds < 60
    record(1, ok, f"op worst rel-err {ops.worst:.2e} (< 1e-6, {ops.checks} checks), "
                  f"e2e worst {e2e.worst:.2e} (< 1e-4, {e2e.checks} params), {seconds:.1f}s (< 60s)")
    assert ok, _failures(ops) + _failures(e2e)


def test_criterion_2_stop_gradient():
    res = _suite("stop-gradient")
    record(2, res.passed, f"{res.checks} checks: fused path exactly zero, encoders untouched via fused path, unimodal decoders nonzero")
    assert res.passed, _failures(res)


def test_criterion_3_gates():
    res = _suite("gate-oracles")
    ok = res.passed and res.worst <= 1e-12
    record(3, ok, f"exchange gate max |err| {res.worst:.1e} (<= 1e-12); sign gate vs brute force on 1000 pairs with zeros")
    assert ok, _failures(res)


def test_criterion_4_rdr_mask():
    res = _suite("rdr-mask")
    record(4, res.passed, f"100 maps: mask == argmax with smallest-index ties, <= 1 nonzero per pixel ({res.checks} checks)")
    assert res.passed, _failures(res)


def test_criterion_5_metrics():
    res = _suite("metric-oracle")
    iou, _, miou, _ = scores(confusion_matrix(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2))
    hand = iou[0] == 0.5 and iou[1] == 2 / 3 and miou == 7 / 12
    ok = res.passed and hand
    record(5, ok, f"20 random pairs exact vs tally oracle; hand case IoU ({iou[0]:.4f}, {iou[1]:.4f}) mIoU {miou:.6f}")
    assert ok, _failures(res)


def test_criterion_6_separability():
    res = _suite("separability")
    record(6, res.passed, "unimodal output bit-identical to full-forward branch and invariant to other groups")
    assert res.passed, _failures(res)


# -- trained comparisons -------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus():
    return generate(CorpusSpec())


@pytest.fixture(scope="module")
def ablation(corpus):
    nets = {}
    t0 = time.perf_counter()
    rows = ablation_run(corpus, list(VARIANTS), SEEDS, TrainConfig(), NetworkConfig(), nets=nets, jobs=JOBS)
    return rows, nets, time.perf_counter() - t0


@pytest.mark.slow
def test_training_reaches_below_chance(corpus, ablation):
    _, nets, _ = ablation
    rgb, th, label = stack(corpus.train)
    with T.no_grad():
        _, bd = total_loss(nets["full", 0].forward_full(rgb, th), label)
    assert bd.l_ce_fuse < math.log(4)


@pytest.mark.slow
def test_criterion_7_ablation(ablation):
    rows, _, seconds = ablation
    mean = {r["variant"]: r for r in summarize(rows)}
    base, full = mean["baseline-add"], mean["full"]
    d_rgb = 100 * (full["rgb_miou"] - base["rgb_miou"])
    d_t = 100 * (full["thermal_miou"] - base["thermal_miou"])
    hard = d_rgb > 0 and d_t > 0
    soft = d_rgb >= 3 and d_t >= 3
    fast = seconds < ABLATION_BUDGET_S
    table = ", ".join(f"{k} {100 * v['rgb_miou']:.2f}/{100 * v['thermal_miou']:.2f}" for k, v in mean.items())
    record(7, hard and fast,
           f"full - baseline-add: rgb {d_rgb:+.2f}, thermal {d_t:+.2f} mIoU pts (hard gate > 0: {'met' if hard else 'not met'}; "
           f"soft goal >= 3: {'met' if soft else 'not met'}); 15 runs in {seconds:.0f}s on {JOBS} core(s) (< {ABLATION_BUDGET_S:.0f}s); "
           f"3-seed rgb/thermal: {table}")
    assert hard, f"full does not beat baseline-add on both unimodal conditions: rgb {d_rgb:+.2f}, thermal {d_t:+.2f}"
    assert fast, f"ablation took {seconds:.0f}s"


@pytest.mark.slow
def test_criterion_8_robustness(corpus, ablation):
    _, nets, _ = ablation
    full_nets = {s: nets["full", s] for s in SEEDS}
    rows = robustness_run(corpus, SEEDS, TrainConfig(), NetworkConfig(), full_nets=full_nets)
    full_gap = float(np.mean([r["full_gap"] for r in rows]))
    fo_gap = float(np.mean([r["fusion_only_gap"] for r in rows]))
    ok = full_gap < fo_gap
    record(8, ok, f"fused - worst unimodal gap: full {100 * full_gap:.2f} vs fusion-only zero-fill {100 * fo_gap:.2f} mIoU pts")
    assert ok


# -- reproducibility -----------------------------------------------------------------

def _digests(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.suffix in (".csv", ".rtfd", ".rtfc")}


def _pipeline(root):
    tiny = ["--n-train", "12", "--n-test", "6", "--height", "16", "--width", "16"]
    data = str(root / "data" / "corpus.rtfc")
    bundle = str(root / "train" / "bundle.rtfd")
    steps = [
        ["gen-data", "--out-dir", str(root), *tiny],
        ["train", "--out-dir", str(root), "--data", data, "--epochs", "3"],
        *[["eval", "--out-dir", str(root), "--run-id", f"eval-{c}", "--data", data, "--bundle", bundle, "--condition", c]
          for c in ("rgbt", "rgb", "t")],
        ["ablate", "--out-dir", str(root), "--data", data, "--epochs", "1", "--variants", "baseline-add,full",
         "--seeds", "0,1", "--robustness"],
    ]
    for argv in steps:
        assert main(argv) == EXIT_OK, argv
    return _digests(root)


def test_criterion_9_byte_identical(tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    same = a == b
    cross = True
    if kernels.compiled_available():
        prev = kernels.use_backend("python" if kernels.BACKEND == "compiled" else "compiled")
        try:
            c = _pipeline(tmp_path / "c")
        finally:
            kernels.use_backend(prev)
        cross = c == a
    csvs = sum(k.endswith(".csv") for k in a)
    ok = same and cross
    record(9, ok, f"{len(a)} output files ({csvs} CSVs) identical across reruns"
                  f"{' and across compiled/python backends' if kernels.compiled_available() else ''}")
    assert same, sorted(k for k in a if a[k] != b.get(k))
    assert cross
