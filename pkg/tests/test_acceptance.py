"""Acceptance suite: one printed PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance
criteria" section of the terminal summary, or run this file directly.
"""

import itertools
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from gradcases import CASES

from fcidtoc.codebook import (
    Codebook,
    average_similarity,
    default_q,
    l2_normalize,
    masked_dot_similarity,
    per_dim_similarity,
    select_dims,
    toc_scores,
)
from fcidtoc.evaluation import (
    ActivationStats,
    VQAutoencoder,
    average_cross_accuracy,
    categorize,
    cmg_all,
    cmg_run,
    loss_drop,
    masked_recon_sweep,
    probe_disentanglement,
    retrieval_eval,
)
from fcidtoc.losses import ClubEstimator, club_estimate, club_fit_step, infonce_loss
from fcidtoc.model import FcidModel, TrainConfig, train
from fcidtoc.numerics import finite_diff_check, seeded_rng
from fcidtoc.synth import SynthConfig, generate, split

CHANCE = 1.0 / 8


# --------------------------------------------------------------------------
# 1. TOC oracle equivalence


def _pairwise_loop(e):
    h, d = e.shape
    s = np.zeros(d)
    for i in range(h):
        for j in range(h):
            if i != j:
                s += e[i] * e[j]
    return s / h**2


def test_c01_toc_oracle(record_criterion):
    t0 = time.time()
    rng = seeded_rng(101)
    worst = 0.0
    for _ in range(1000):
        h, d = int(rng.integers(2, 65)), int(rng.integers(1, 33))
        cb = Codebook(rng.standard_normal((h, d)))
        worst = max(worst, np.abs(per_dim_similarity(cb) - _pairwise_loop(l2_normalize(cb).codes)).max())
    mismatches = 0
    for _ in range(60):
        d = int(rng.integers(2, 13))
        cb = Codebook(rng.standard_normal((int(rng.integers(2, 20)), d)))
        q = int(rng.integers(1, d + 1))
        # lambda = 0: minimize the masked dot-product similarity
        got = select_dims(toc_scores(cb, 0.0), q)
        best = min(itertools.combinations(range(d), q),
                   key=lambda s: sum(per_dim_similarity(cb)[list(s)]))
        mismatches += got.selected != list(best)
        # general lambda: maximize the summed combined score
        lam = float(rng.uniform())
        sc = toc_scores(cb, lam)
        best = max(itertools.combinations(range(d), q), key=lambda s: sum(sc.combined[list(s)]))
        mismatches += select_dims(sc, q).selected != list(best)
        # the selected set attains the minimum decomposed similarity
        assert masked_dot_similarity(cb, got) <= min(
            masked_dot_similarity(cb, type(got).from_indices(s, d))
            for s in itertools.combinations(range(d), q)) + 1e-15
    elapsed = time.time() - t0
    ok = worst <= 1e-12 and mismatches == 0 and elapsed < 120
    record_criterion(1, ok, f"max |S - loop| = {worst:.2e}, subset mismatches = {mismatches}, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 2. decomposition identity


def test_c02_decomposition(record_criterion):
    t0 = time.time()
    rng = seeded_rng(202)
    worst = 0.0
    for _ in range(500):
        cb = l2_normalize(rng.standard_normal((int(rng.integers(2, 65)), int(rng.integers(1, 33)))))
        total, avg = per_dim_similarity(cb).sum(), average_similarity(cb)
        worst = max(worst, abs(total - avg) / max(abs(avg), 1e-300))
    elapsed = time.time() - t0
    ok = worst <= 1e-9 and elapsed < 30
    record_criterion(2, ok, f"max relative gap = {worst:.2e}, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 3. gradient suite


def test_c03_gradients(record_criterion):
    t0 = time.time()
    worst = {}
    for name, make in CASES.items():
        worst[name] = 0.0
        for seed in range(20):
            fn, store = make(seed)
            store.backward(fn)
            worst[name] = max(worst[name], finite_diff_check(fn, store, eps=1e-5, tol=1e-4).worst)
    elapsed = time.time() - t0
    ok = max(worst.values()) <= 1e-4 and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_criterion(3, ok, f"max rel error per loss: {detail}; {elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------------
# 4. CLUB calibration


def _gaussian_pairs(rng, n, rho, d=4):
    x = rng.standard_normal((n, d))
    y = rho * x + math.sqrt(1 - rho**2) * rng.standard_normal((n, d))
    return torch.from_numpy(x), torch.from_numpy(y)


def _fitted_club(rho, seed=404, n=4000, steps=2000):
    rng = seeded_rng(seed)
    x, y = _gaussian_pairs(rng, n, rho)
    est = ClubEstimator(4, 4, rng)
    for _ in range(steps):
        club_fit_step(est, x, y, lr=1e-2)
    xt, yt = _gaussian_pairs(rng, n, rho)
    with torch.no_grad():
        return float(club_estimate(xt, yt, est))


def test_c04_club_calibration(record_criterion):
    t0 = time.time()
    mi = -4 / 2 * math.log(1 - 0.9**2)
    high, zero = _fitted_club(0.9), _fitted_club(0.0)
    ratio = high / mi
    elapsed = time.time() - t0
    ok = 0.8 <= ratio <= 1.5 and abs(zero) < 0.05 and elapsed < 180
    record_criterion(4, ok, f"rho=0.9: estimate {high:.3f} vs MI {mi:.3f} (ratio {ratio:.2f}); "
                            f"rho=0: {zero:.4f}; {elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------------
# 5. InfoNCE calibration


def test_c05_infonce(record_criterion):
    rng = seeded_rng(505)
    a, b = (torch.from_numpy(rng.standard_normal((128, 32))) for _ in range(2))
    indep = float(infonce_loss(a, b))
    e = torch.eye(2, dtype=torch.float64)
    per_dir = float(infonce_loss(e, e, symmetric=False))
    # 0.3133 is log(1 + e^-1) to four places; the 1e-6 tolerance applies to the exact value
    ok = abs(indep - math.log(128)) <= 0.05 * math.log(128) and abs(per_dir - math.log(1 + math.exp(-1))) <= 1e-6
    record_criterion(5, ok, f"independent N=128: {indep:.4f} vs log 128 = {math.log(128):.4f}; "
                            f"identical N=2: {per_dir:.7f}")
    assert ok


# --------------------------------------------------------------------------
# 6. masked reconstruction sweep


def test_c06_masked_recon(record_criterion):
    t0 = time.time()
    ds = generate(SynthConfig(seed=0))
    frames = ds.audio.reshape(-1, ds.audio.shape[-1])
    ae = VQAutoencoder(codebook_size=128, dim=32, seed=0).fit(frames)
    rows = masked_recon_sweep(ae, frames, n_random=100, seed=0)
    elapsed = time.time() - t0
    beats = all(r.toc_mse < r.random_mean_mse for r in rows)
    counts = all(r.count >= 90 for r in rows if r.ratio >= 50)
    ok = beats and counts and elapsed < 600
    table = "; ".join(f"{r.ratio:g}%: {r.toc_mse:.4f}/{r.random_mean_mse:.4f}/{r.count}" for r in rows)
    record_criterion(6, ok, f"ratio: toc/random/count = {table}; {elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------------
# 7-9. desk-scale FCID


@pytest.fixture(scope="module")
def fcid_runs():
    ds = generate(SynthConfig(seed=0))
    tr, _, te = split(ds, (0.8, 0.1, 0.1), seed=0)
    runs = {}
    for name, cfg in (("club", TrainConfig()), ("no_club", TrainConfig().without_club())):
        t0 = time.time()
        model = FcidModel(24, 24, 16, cfg)
        history = train(model, tr)
        runs[name] = (model, history, time.time() - t0)
    return tr, te, runs


def test_c07_fcid_training(record_criterion, fcid_runs):
    tr, te, runs = fcid_runs
    model, history, elapsed = runs["club"]
    t0 = time.time()
    drop = loss_drop(history, window=len(tr) // model.config.batch_size)
    av = cmg_run(model, tr, te, "audio", "video").test_accuracy
    va = cmg_run(model, tr, te, "video", "audio").test_accuracy
    pairs = (("audio", "video"), ("audio", "text"), ("video", "text"))
    r10 = {f"{a[0]}{b[0]}": retrieval_eval(model, te, (a, b), (10,), pool=200)[10] for a, b in pairs}
    elapsed += time.time() - t0
    ok = (drop >= 0.30 and min(av, va) >= 3 * CHANCE and min(r10.values()) >= 3 * 10 / 200 and elapsed < 900)
    record_criterion(7, ok, f"loss drop {drop:.1%}; CMG a->v {av:.3f}, v->a {va:.3f}; "
                            f"R@10 {', '.join(f'{k} {v:.3f}' for k, v in r10.items())}; {elapsed:.0f}s")
    assert ok


def test_c08_ablation_directions(record_criterion, fcid_runs):
    tr, te, runs = fcid_runs
    on, off = runs["club"][0], runs["no_club"][0]
    cmg_on, cmg_off = average_cross_accuracy(cmg_all(on, tr, te)), average_cross_accuracy(cmg_all(off, tr, te))
    probe_on = probe_disentanglement(on, tr, te)["general_to_specific"]
    probe_off = probe_disentanglement(off, tr, te)["general_to_specific"]
    ok = cmg_off < cmg_on and probe_off > probe_on
    record_criterion(8, ok, f"avg cross CMG on {cmg_on:.3f} / off {cmg_off:.3f}; "
                            f"general->specific probe on {probe_on:.3f} / off {probe_off:.3f}")
    assert ok


def test_c09_toc_on_fcid(record_criterion, fcid_runs):
    tr, te, runs = fcid_runs
    model = runs["club"][0]
    mask = select_dims(toc_scores(model.codebook, model.config.toc_lambda), default_q(model.codebook.D))
    plain = average_cross_accuracy(cmg_all(model, tr, te))
    masked = average_cross_accuracy(cmg_all(model, tr, te, mask))
    ok = masked - plain >= -0.01
    record_criterion(9, ok, f"avg cross CMG {plain:.4f} -> {masked:.4f} with q={mask.q} "
                            f"(change {100 * (masked - plain):+.2f} pp)")
    assert ok


# --------------------------------------------------------------------------
# 10. CLI determinism


def _pipeline(root: Path) -> None:
    def cli(*args):
        cmd = [sys.executable, "-m", "fcidtoc", *map(str, args), "--threads", "1"]
        subprocess.run(cmd, check=True, capture_output=True)

    cli("gen", "--n", 200, "--seed", 11, "--out", root / "data")
    cli("train", "--data", root / "data", "--epochs", 2, "--batch-size", 32, "--out", root / "train")
    cli("toc", "--codebook", root / "train" / "codebook.tocb", "--out", root / "toc")
    cli("quantize", "--checkpoint", root / "train" / "model.tocm", "--data", root / "data",
        "--mask", root / "toc" / "mask.json", "--out", root / "quantize")
    for kind in ("cmg", "retrieval", "activation", "probes"):
        cli("eval", kind, "--checkpoint", root / "train" / "model.tocm", "--data", root / "data",
            "--pool", 20, "--mask", root / "toc" / "mask.json", "--out", root / kind)
    cli("eval", "maskrecon", "--data", root / "data", "--n-random", 10, "--ae-epochs", 2, "--out", root / "maskrecon")


def test_c10_determinism(record_criterion, tmp_path):
    _pipeline(tmp_path / "a")
    _pipeline(tmp_path / "b")
    csvs = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    differing = [str(p) for p in csvs if (tmp_path / "a" / p).read_bytes() != (tmp_path / "b" / p).read_bytes()]
    ok = len(csvs) >= 10 and not differing
    record_criterion(10, ok, f"{len(csvs)} CSV files compared, {len(differing)} differ {differing or ''}".rstrip())
    assert ok


# --------------------------------------------------------------------------
# 11. activation rule


def test_c11_activation_rule(record_criterion):
    cases = {
        (100, 0, 0): "red",
        (34, 33, 33): "green",
        (96, 3, 1): "red",
        (95, 4, 1): "blue",
        (95, 5, 0): "blue",
        (90, 5, 5): "green",
        (94, 5, 1): "blue",
        (5, 5, 90): "green",
        (0, 0, 0): "unused",
    }
    got = {c: categorize(c) for c in cases}
    stats = ActivationStats(np.array(list(cases)))
    ok = got == cases and stats.categories == list(cases.values())
    record_criterion(11, ok, f"{sum(got[c] == v for c, v in cases.items())}/{len(cases)} constructed histograms")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
