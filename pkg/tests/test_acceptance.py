"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected by the ``report`` fixture and printed in the
"acceptance criteria" section of the pytest summary.
"""

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from dmasum import cli
from dmasum import evaluation as ev
from dmasum.attention import bottleneck_trial
from dmasum.autodiff import finite_diff_check
from dmasum.data import load_dataset, synth_video
from dmasum.meta import AdamState, MetaConfig, VideoTask, adam_step, meta_train, meta_update, \
    learner_inner_loop, read_log
from dmasum.model import DmaSumModel, ModelConfig, load_checkpoint
from dmasum.tensor import SeededRng

sys.path.insert(0, str(Path(__file__).parent))
from oracles import (brute_knapsack, brute_kts, f1_oracle, kendall_pairs,  # noqa: E402
                     piecewise_constant, spearman_oracle)

DESK = ModelConfig(input_dim=16, attn_dim=8, lstm_hidden=8, head_hidden=16, dropout=0.0)


def test_c01_gradient_correctness(report):
    t0 = time.perf_counter()
    model = DmaSumModel(DESK, seed=0)
    r = np.random.default_rng(0)
    x, y = r.normal(size=(12, 16)), r.uniform(size=12)
    err = finite_diff_check(model.loss_fn(x, y), model.params, h=1e-5, batch=512,
                            extended=True)
    dt = time.perf_counter() - t0
    report(1, err < 1e-4 and dt < 60,
           f"max rel err {err:.2e} over {model.params.size} params (< 1e-4), {dt:.1f}s (< 60s)")


def test_c02_softmax_bottleneck(report):
    t0 = time.perf_counter()
    ranks = [bottleneck_trial(seed, d_attn=2, T=8, rel_tol=1e-6) for seed in range(100)]
    dt = time.perf_counter() - t0
    low = sum(a <= 3 for a, _ in ranks)
    high = sum(b >= 4 for _, b in ranks)
    report(2, low == 100 and high >= 30 and dt < 10,
           f"rank(log A)<=3 in {low}/100, rank(log A_moa)>=4 in {high}/100 (>=30), {dt:.2f}s")


def _ref_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(theta.copy())
    return out


def test_c03_meta_update_exactness(report):
    theta = DmaSumModel(DESK, seed=1).params
    theta_m = DmaSumModel(DESK, seed=2).params
    exact = True
    for beta in (6e-5, 0.1, 0.37, 0.999):
        new = meta_update(theta, theta_m, MetaConfig(meta_rate=beta, optimizer="sgd"))
        exact &= all(np.array_equal(new[k], theta[k] + beta * (theta_m[k] - theta[k]))
                     for k in theta)

    def objective(p, key):
        return 1.0, p.map(np.ones_like)

    same, _ = learner_inner_loop(objective, theta, MetaConfig(inner_steps=0))
    ident_m0 = same.equals(theta)
    ident_sgd = meta_update(theta, theta.copy(), MetaConfig(meta_rate=0.5, optimizer="sgd")).equals(theta)
    ident_adam = meta_update(theta, theta.copy(), MetaConfig(), AdamState(theta)).equals(theta)

    r = np.random.default_rng(3)
    grads = [theta.map(lambda a: r.normal(size=a.shape)) for _ in range(10)]
    state, p, traj = AdamState(theta), theta, []
    for g in grads:
        p = adam_step(state, p, g, 1e-3)
        traj.append(p.flatten())
    ref = _ref_adam(theta.flatten(), [g.flatten() for g in grads], 1e-3)
    adam_err = float(np.max(np.abs(np.array(traj) - np.array(ref))))
    ok = exact and ident_m0 and ident_sgd and ident_adam and adam_err <= 1e-12
    report(3, ok, f"sgd step bit-exact={exact}, m=0 identity={ident_m0}, "
                  f"theta_m=theta identity={ident_sgd and ident_adam}, "
                  f"Adam max dev {adam_err:.1e} (<= 1e-12)")


def test_c04_overfit_sanity(report):
    t0 = time.perf_counter()
    video = synth_video(SeededRng(4), "overfit", T=32, D=16, U=5)
    task = VideoTask(video.video_id, video.features, video.scores)
    model = DmaSumModel(DESK, seed=0)
    cfg = MetaConfig(learner_rate=1e-2, meta_rate=1e-2, inner_steps=3, epochs=200, seed=0)
    meta_train(model, [task], cfg)
    mse = float(np.mean((model.predict(task.features) - task.target) ** 2))
    dt = time.perf_counter() - t0
    report(4, mse < 1e-2 and dt < 120,
           f"final MSE {mse:.2e} after 200 epochs (< 1e-2), {dt:.1f}s (< 120s)")


def test_c05_knapsack_oracle(report):
    r = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        n = int(r.integers(1, 13))
        T = int(r.integers(n, 4 * n + 8))
        cps = sorted(r.choice(np.arange(1, T), size=n - 1, replace=False).tolist())
        segs = ev.SegmentList.from_change_points(cps, T)
        scores = r.random(T)
        budget = float(r.uniform(0.05, 1.0))
        picked = ev.knapsack_select(scores, segs, budget)
        values = [scores[a:b].mean() for a, b in segs.segments()]
        _, best = brute_knapsack(values, segs.lengths(), ev.budget_frames(T, budget))
        mismatches += picked.segments != best
    report(5, mismatches == 0, f"{1000 - mismatches}/1000 instances match exhaustive search")


def test_c06_kts_oracle(report):
    r = np.random.default_rng(6)
    recovered = 0
    for _ in range(100):
        T = int(r.integers(30, 121))
        n_seg = int(r.integers(1, math.ceil(T / 15) + 1))
        X, cps = piecewise_constant(r, T, n_seg)
        recovered += ev.kts_segment(X).change_points == cps
    worst = 0.0
    for _ in range(30):
        T = int(r.integers(4, 21))
        X = r.normal(size=(T, 3))
        for m in range(0, min(3, T - 1) + 1):
            _, cost = ev.kts_dp(X, m)
            ref, _ = brute_kts(X, m)
            worst = max(worst, abs(cost - ref) / max(1.0, abs(ref)))
    report(6, recovered == 100 and worst < 1e-9,
           f"{recovered}/100 change-point sets recovered; DP vs enumeration max rel gap {worst:.1e}")


def test_c07_rank_correlation_oracles(report):
    r = np.random.default_rng(7)
    worst_tau = worst_rho = 0.0
    done = 0
    while done < 200:
        n = int(r.integers(2, 201))
        a = r.integers(0, max(2, n // 3), size=n).astype(float)
        b = np.round(r.random(n), 1)
        if len(set(a)) < 2 or len(set(b)) < 2:
            continue
        worst_tau = max(worst_tau, abs(ev.kendall_tau(a, b) - kendall_pairs(a, b)))
        worst_rho = max(worst_rho, abs(ev.spearman_rho(a, b) - spearman_oracle(a, b)))
        done += 1
    x = r.random(50)
    ends = (ev.kendall_tau(x, x), ev.kendall_tau(x, -x), ev.spearman_rho(x, x),
            ev.spearman_rho(x, -x))
    ends_ok = np.allclose(ends, (1, -1, 1, -1), atol=1e-12)
    report(7, worst_tau <= 1e-12 and worst_rho <= 1e-12 and ends_ok,
           f"200 pairs: tau dev {worst_tau:.1e}, rho dev {worst_rho:.1e} (<= 1e-12); "
           f"identical/reversed -> {tuple(round(e, 12) for e in ends)}")


def test_c08_f1_protocol(tmp_path, report):
    u = np.zeros(20, bool)
    u[:10] = True
    shifted = np.zeros(20, bool)
    shifted[5:15] = True
    hand = (ev.f1_keyshot(u, [u]), ev.f1_keyshot(~u, [u]), ev.f1_keyshot(shifted, [u]))
    hand_ok = hand == (100.0, 0.0, 50.0)

    assert cli.main(["synth", "--out", str(tmp_path), "--videos", "6", "--t", "40:60",
                     "--d", "8", "--u", "5", "--seed", "8"]) == 0
    ds = load_dataset(tmp_path / "manifest.json")
    results, recomputed = [], []
    r = np.random.default_rng(8)
    for v in ds.videos:
        pred = np.clip(v.scores + r.normal(0, 0.1, v.T), 0, 1)
        summ = ev.knapsack_select(pred, ev.kts_segment(v.features))
        corr = ev.rank_correlation_protocol(pred, v.user_scores)
        results.append(ev.VideoResult(v.video_id, ev.f1_keyshot(summ, v.user_summaries),
                                      corr.tau, corr.rho))
        recomputed.append(f1_oracle(summ.selection, v.user_summaries, "mean"))
    rep = ev.build_report(results, {})
    agg_ok = math.isclose(rep["aggregate"]["f1"], float(np.mean(recomputed)), abs_tol=1e-12)
    report(8, hand_ok and agg_ok,
           f"hand cases {hand} (expect 100/0/50); aggregate F1 {rep['aggregate']['f1']:.6f} "
           f"vs recomputed {np.mean(recomputed):.6f}")


SMALL = ["--attn-dim", "4", "--lstm-hidden", "4", "--head-hidden", "8", "--k", "3",
         "--epochs", "2", "--learner-rate", "1e-2", "--meta-rate", "1e-2"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_corpus")
    assert cli.main(["synth", "--out", str(root), "--videos", "6", "--t", "30:45",
                     "--d", "6", "--u", "5", "--seed", "9"]) == 0
    return root / "manifest.json"


def _train_eval(corpus, out, *flags):
    rc = cli.main(["train", "--dataset", str(corpus), "--out", str(out), *SMALL, *flags])
    if rc == 0:
        rc = cli.main(["eval", "--run", str(out)])
    return rc


def test_c09_determinism(corpus, tmp_path, report):
    a, b = tmp_path / "a", tmp_path / "b"
    rcs = (_train_eval(corpus, a), _train_eval(corpus, b))
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    same = [f for f in files if (a / f).read_bytes() == (b / f).read_bytes()]
    kinds = {"ckpt": 0, "csv": 0, "json": 0}
    for f in same:
        for k in kinds:
            kinds[k] += f.suffix == "." + k
    other = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    ok = rcs == (0, 0) and files == other and len(same) == len(files) and all(kinds.values())
    report(9, ok, f"{len(same)}/{len(files)} artifacts byte-identical "
                  f"({kinds['ckpt']} checkpoints, {kinds['csv']} CSVs, {kinds['json']} JSON)")


def test_c10_ablations(corpus, tmp_path, report):
    variants = {
        "no-meta": (["--no-meta"], {"trainer": "plain"}),
        "plain-softmax": (["--plain-softmax"], {"plain_softmax": True}),
        "visual": (["--channel", "visual"], {"channel": "visual"}),
        "sequential": (["--channel", "sequential"], {"channel": "sequential"}),
        "batch-meta-3": (["--batch-meta", "3"], {"trainer": "batch-meta", "batch": 3}),
    }
    status = {}
    for name, (flags, expect) in variants.items():
        out = tmp_path / name
        rc = _train_eval(corpus, out, *flags)
        ok = rc == 0
        if ok:
            rep = json.loads((out / "report.json").read_text())
            ok = all(rep["variant"][k] == v for k, v in expect.items())
        status[name] = ok

    base, b1 = tmp_path / "default", tmp_path / "batch-meta-1"
    same = _train_eval(corpus, base) == 0 and _train_eval(corpus, b1, "--batch-meta", "1") == 0
    for i in range(3):
        ma, _ = load_checkpoint(base / f"fold{i}" / "model.ckpt")
        mb, _ = load_checkpoint(b1 / f"fold{i}" / "model.ckpt")
        same &= ma.params.equals(mb.params)
        same &= read_log(base / f"fold{i}" / "train_log.csv")[1] == \
            read_log(b1 / f"fold{i}" / "train_log.csv")[1]
    ok = all(status.values()) and same
    report(10, ok, ", ".join(f"{k}={'ok' if v else 'FAILED'}" for k, v in status.items())
           + f"; --batch-meta 1 reproduces default trajectory: {same}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
