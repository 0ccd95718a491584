"""Desk-scale evaluation: CMG, retrieval, code activation, masked
reconstruction, codebook similarity and disentanglement probes.

Every result type has a CSV writer; floats are written with six significant
digits. Plots are optional SVGs rendered with matplotlib.
"""

from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.utils.validation import check_array, check_is_fitted

from .codebook import Codebook, DimensionMask, average_similarity, cosine_matrix, select_dims, toc_scores
from .errors import ValidationError
from .losses import reconstruction_loss
from .model import MODALITIES, FcidModel, encode_coarse, encode_modality, fine_features
from .numerics import DTYPE, MLP, seeded_rng
from .quantizer import EmaState, commitment_loss, mmema_update, nearest_codes, straight_through

CROSS_PAIRS = tuple(itertools.permutations(MODALITIES, 2))
DEFAULT_RATIOS = (87.5, 75.0, 62.5, 50.0, 37.5, 25.0)
RED_SHARE = 0.95
GREEN_SHARE = 0.05
CLASSIFIER_ITERS = 200


def _g(x) -> str:
    return f"{x:.6g}"


def _writer(path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def _check_modality(name: str) -> None:
    if name not in MODALITIES:
        raise ValidationError(f"eval: unknown modality {name!r}")


def _check_trained(model: FcidModel, allow_untrained: bool) -> None:
    if not (model.trained or allow_untrained):
        raise ValidationError("eval: model is untrained")


# ---------------------------------------------------------------------------
# cross-modal generalization


@dataclass(frozen=True)
class CmgResult:
    train_modality: str
    test_modality: str
    train_accuracy: float
    test_accuracy: float
    mask_q: int | None = None


def _affine_classifier() -> LogisticRegression:
    return LogisticRegression(max_iter=CLASSIFIER_ITERS)


def cmg_run(model: FcidModel, train, test, m1: str, m2: str, mask: DimensionMask | None = None,
            masked_distance: bool = False, allow_untrained: bool = False) -> CmgResult:
    """Fit an affine classifier on ``m1`` codes of ``train``; score it on the
    ``m1`` and ``m2`` codes of ``test``. The encoders stay frozen.
    """
    _check_modality(m1)
    _check_modality(m2)
    _check_trained(model, allow_untrained)

    def codes(ds, m):
        return encode_modality(ds.modality(m), m, model, mask, masked_distance)[1]

    with warnings.catch_warnings():
        # the iteration budget is part of the protocol, not a tuning knob
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf = _affine_classifier().fit(codes(train, m1), train.labels)
    acc1 = float(clf.score(codes(test, m1), test.labels))
    acc2 = acc1 if m1 == m2 else float(clf.score(codes(test, m2), test.labels))
    return CmgResult(m1, m2, acc1, acc2, None if mask is None else mask.q)


def cmg_all(model, train, test, mask=None, pairs=CROSS_PAIRS, **kw) -> list[CmgResult]:
    return [cmg_run(model, train, test, a, b, mask, **kw) for a, b in pairs]


def average_cross_accuracy(results) -> float:
    cross = [r.test_accuracy for r in results if r.train_modality != r.test_modality]
    if not cross:
        raise ValidationError("eval: no cross-modal pairs to average")
    return float(np.mean(cross))


def write_cmg_csv(path, results) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["train_modality", "test_modality", "train_accuracy", "test_accuracy", "mask_q"])
        for r in results:
            w.writerow([r.train_modality, r.test_modality, _g(r.train_accuracy), _g(r.test_accuracy),
                        "" if r.mask_q is None else r.mask_q])


# ---------------------------------------------------------------------------
# retrieval


def _ranks(sim: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry in each row; ties go to the lower column index."""
    n = sim.shape[0]
    true = np.diag(sim)[:, None]
    cols = np.arange(n)[None, :]
    ahead = (sim > true) | ((sim == true) & (cols < np.arange(n)[:, None]))
    return ahead.sum(axis=1)


def recall_at_k(query: np.ndarray, candidates: np.ndarray, ks) -> dict[int, float]:
    """Symmetrized cosine R@K for aligned rows (row ``i`` of each side is a pair)."""
    q = np.asarray(query, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    if q.shape[0] != c.shape[0] or q.ndim != 2:
        raise ValidationError("eval: retrieval needs aligned (n, D) query and candidate sets")
    n = q.shape[0]
    ks = list(ks)
    bad = [k for k in ks if not 1 <= k <= n]
    if bad:
        raise ValidationError(f"eval: K={bad[0]} exceeds the {n} candidates")
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-300)
    cn = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-300)
    sim = qn @ cn.T
    fwd, bwd = _ranks(sim), _ranks(sim.T)
    return {k: float(0.5 * (np.mean(fwd < k) + np.mean(bwd < k))) for k in ks}


def retrieval_eval(model: FcidModel, dataset, pair=("audio", "video"), ks=(1, 5, 10), pool: int = 200,
                   use_codes: bool = False, allow_untrained: bool = False) -> dict[int, float]:
    """R@K between two modalities on the first ``pool`` samples.

    Continuous coarse general features are ranked by default; ``use_codes``
    ranks the quantized codewords instead.
    """
    a, b = pair
    _check_modality(a)
    _check_modality(b)
    _check_trained(model, allow_untrained)
    if pool > len(dataset):
        raise ValidationError(f"eval: pool of {pool} exceeds dataset size {len(dataset)}")
    ds = dataset.subset(np.arange(pool))

    def feats(m):
        if use_codes:
            return encode_modality(ds.modality(m), m, model)[1]
        return encode_coarse(ds.modality(m), m, model).numpy()

    return recall_at_k(feats(a), feats(b), ks)


def write_retrieval_csv(path, rows) -> None:
    """``rows`` yields ``(modality_a, modality_b, {K: recall})``."""
    fh, w = _writer(path)
    with fh:
        w.writerow(["modality_a", "modality_b", "K", "recall"])
        for a, b, recalls in rows:
            for k in sorted(recalls):
                w.writerow([a, b, k, _g(recalls[k])])


# ---------------------------------------------------------------------------
# code activation


def categorize(counts) -> str:
    """red: one modality holds > 95% of the code's activations; green: every
    modality holds >= 5%; blue otherwise; unused when never activated.
    """
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or c.size == 0 or np.any(c < 0):
        raise ValidationError("eval: activation counts must be a non-negative vector")
    total = c.sum()
    if total == 0:
        return "unused"
    share = c / total
    if share.max() > RED_SHARE:
        return "red"
    if share.min() >= GREEN_SHARE:
        return "green"
    return "blue"


@dataclass
class ActivationStats:
    counts: np.ndarray  # (H, n_modalities)
    modalities: tuple = MODALITIES
    categories: list = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if not self.categories:
            self.categories = [categorize(row) for row in self.counts]

    def totals(self) -> dict[str, int]:
        out = {k: 0 for k in ("red", "green", "blue", "unused")}
        for c in self.categories:
            out[c] += 1
        return out


def activation_stats(model: FcidModel, dataset, allow_untrained: bool = False) -> ActivationStats:
    """One activation per sample and modality (coarse codes are per sample)."""
    _check_trained(model, allow_untrained)
    h = model.codebook.H
    counts = np.zeros((h, len(MODALITIES)), dtype=np.int64)
    for j, m in enumerate(MODALITIES):
        idx, _ = encode_modality(dataset.modality(m), m, model)
        counts[:, j] = np.bincount(idx, minlength=h)
    return ActivationStats(counts)


def write_activation_csv(path, stats: ActivationStats) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["code"] + [f"count_{m}" for m in stats.modalities] + ["category"])
        for k, (row, cat) in enumerate(zip(stats.counts, stats.categories)):
            w.writerow([k] + [int(v) for v in row] + [cat])


# ---------------------------------------------------------------------------
# masked reconstruction


class VQAutoencoder(TransformerMixin, BaseEstimator):
    """Small VQ autoencoder for frame-level features.

    MLP encoder, one EMA-updated codebook, MLP decoder; trained with Adam on
    reconstruction plus commitment loss through the straight-through
    estimator. ``reconstruct(X, mask)`` picks codes by the distance over the
    masked dimensions only and decodes the full codeword.
    """

    def __init__(self, codebook_size=128, dim=32, hidden=64, epochs=30, batch_size=256, lr=3e-3,
                 beta=0.25, ema_decay=0.99, ema_epsilon=1e-5, seed=0):
        self.codebook_size = codebook_size
        self.dim = dim
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta = beta
        self.ema_decay = ema_decay
        self.ema_epsilon = ema_epsilon
        self.seed = seed

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, d_in = X.shape
        if n < self.codebook_size:
            raise ValidationError(f"eval: need at least {self.codebook_size} rows to seed the codebook")
        rng = seeded_rng(self.seed)
        self.encoder_ = MLP(d_in, self.hidden, self.dim, rng)
        self.decoder_ = MLP(self.dim, self.hidden, d_in, rng)
        x = torch.as_tensor(X, dtype=DTYPE)
        with torch.no_grad():
            seed_rows = rng.choice(n, self.codebook_size, replace=False)
            self.codebook_ = Codebook(self.encoder_(x[seed_rows]).numpy())
        ema = EmaState.init(self.codebook_, self.ema_decay, self.ema_epsilon)
        params = list(self.encoder_.parameters()) + list(self.decoder_.parameters())
        opt = torch.optim.Adam(params, lr=self.lr)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n - self.batch_size + 1, self.batch_size):
                xb = x[order[start:start + self.batch_size]]
                z = self.encoder_(xb)
                codes = torch.from_numpy(np.array(self.codebook_.codes))
                idx, _ = nearest_codes(z, codes)
                zq = codes[idx]
                loss = reconstruction_loss(xb, self.decoder_(straight_through(z, zq))) + commitment_loss(z, zq, self.beta)
                opt.zero_grad()
                loss.backward()
                opt.step()
                self.codebook_, ema = mmema_update(ema, self.codebook_, [(z.detach().numpy(), idx.numpy())])
                self.loss_curve_.append(float(loss.detach()))
        self.n_features_in_ = d_in
        return self

    def _encode(self, X):
        check_is_fitted(self, "codebook_")
        X = check_array(X, dtype=np.float64)
        with torch.no_grad():
            return self.encoder_(torch.as_tensor(X, dtype=DTYPE))

    def predict(self, X, mask: DimensionMask | None = None) -> np.ndarray:
        z = self._encode(X)
        weights = None if mask is None else torch.from_numpy(mask.as_float())
        return nearest_codes(z, torch.from_numpy(np.array(self.codebook_.codes)), weights)[0].numpy()

    def transform(self, X, mask: DimensionMask | None = None) -> np.ndarray:
        return self.codebook_.codes[self.predict(X, mask)]

    def reconstruct(self, X, mask: DimensionMask | None = None) -> np.ndarray:
        zq = torch.from_numpy(np.array(self.transform(X, mask)))
        with torch.no_grad():
            return self.decoder_(zq).numpy()

    def mse(self, X, mask: DimensionMask | None = None) -> float:
        X = np.asarray(X, dtype=np.float64)
        return float(np.mean((self.reconstruct(X, mask) - X) ** 2))


@dataclass(frozen=True)
class MaskedReconRow:
    ratio: float
    q: int
    toc_mse: float
    random_mean_mse: float
    count: int
    n_random: int


def kept_dims(d: int, ratio: float) -> int:
    if not 0.0 <= ratio < 100.0:
        raise ValidationError(f"eval: mask ratio must lie in [0, 100), got {ratio}")
    q = int(round(d * (1.0 - ratio / 100.0)))
    if q < 1:
        raise ValidationError(f"eval: mask ratio {ratio}% keeps no dimension of {d}")
    return q


def masked_recon_sweep(autoencoder: VQAutoencoder, X, ratios=DEFAULT_RATIOS, n_random: int = 100,
                       seed: int = 0, lam: float = 0.3) -> list[MaskedReconRow]:
    """TOC mask against ``n_random`` random masks of equal size at each ratio
    (percentage of dimensions removed). ``count`` is the number of random
    masks whose MSE exceeds the TOC mask's.
    """
    check_is_fitted(autoencoder, "codebook_")
    cb = autoencoder.codebook_
    X = check_array(X, dtype=np.float64)
    z = autoencoder._encode(X)
    codes = torch.from_numpy(np.array(cb.codes))
    with torch.no_grad():
        decoded = autoencoder.decoder_(codes).numpy()
    # squared error of every frame against every decoded codeword, computed once
    err = ((X[:, None, :] - decoded[None]) ** 2).mean(-1)
    rows_idx = np.arange(X.shape[0])

    def mse(mask):
        idx = nearest_codes(z, codes, torch.from_numpy(mask.as_float()))[0].numpy()
        return float(err[rows_idx, idx].mean())

    scores = toc_scores(cb, lam)
    rng = seeded_rng(seed)
    rows = []
    for ratio in ratios:
        q = kept_dims(cb.D, ratio)
        toc = mse(select_dims(scores, q))
        rand = np.array([
            mse(DimensionMask.from_indices(rng.choice(cb.D, q, replace=False), cb.D)) for _ in range(n_random)
        ])
        rows.append(MaskedReconRow(float(ratio), q, toc, float(rand.mean()), int((rand > toc).sum()), n_random))
    return rows


def write_sweep_csv(path, rows) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["mask_percent", "q", "toc_mse", "random_mean_mse", "count", "n_random"])
        for r in rows:
            w.writerow([_g(r.ratio), r.q, _g(r.toc_mse), _g(r.random_mean_mse), r.count, r.n_random])


# ---------------------------------------------------------------------------
# codebook similarity before / after a mask


@dataclass(frozen=True)
class SimilarityReport:
    before: float
    after: float
    matrix_before: np.ndarray
    matrix_after: np.ndarray


def similarity_report(codebook, mask: DimensionMask) -> SimilarityReport:
    return SimilarityReport(
        before=average_similarity(codebook),
        after=average_similarity(codebook, mask),
        matrix_before=cosine_matrix(codebook),
        matrix_after=cosine_matrix(codebook, mask),
    )


def write_similarity_csvs(directory, report: SimilarityReport) -> None:
    from pathlib import Path

    out = Path(directory)
    fh, w = _writer(out / "similarity_summary.csv")
    with fh:
        w.writerow(["S_before", "S_after"])
        w.writerow([_g(report.before), _g(report.after)])
    for name, mat in (("similarity_before.csv", report.matrix_before), ("similarity_after.csv", report.matrix_after)):
        fh, w = _writer(out / name)
        with fh:
            w.writerows([_g(v) for v in row] for row in mat)


# ---------------------------------------------------------------------------
# disentanglement probes


PROBES = ("general_to_shared", "general_to_specific", "specific_to_shared")


def _frame_targets(ds, modality: str):
    """Per-frame targets: class label (shared) and sign of the first private latent (specific)."""
    t_len = ds.audio.shape[1]
    shared = np.repeat(ds.labels, t_len)
    key = {"audio": "z_a", "video": "z_v"}[modality]
    if key not in ds.latents:
        raise ValidationError("eval: probes need a dataset with ground-truth latents")
    specific = (ds.latents[key][..., 0] > 0).astype(int).reshape(-1)
    return shared, specific


def _probe(x_tr, y_tr, x_te, y_te) -> float:
    if np.unique(y_tr).size < 2:
        raise ValidationError("eval: probe target is degenerate (single class)")
    return float(LogisticRegression(max_iter=2000).fit(x_tr, y_tr).score(x_te, y_te))


def probe_disentanglement(model: FcidModel, train, test, modality: str = "audio",
                          allow_untrained: bool = False) -> dict[str, float]:
    """Affine probes from frozen fine features (one row per frame).

    general_to_shared: general features to class label;
    general_to_specific: general features to the sign of the private latent;
    specific_to_shared: specific features to class label.
    """
    _check_trained(model, allow_untrained)
    if modality not in ("audio", "video"):
        raise ValidationError(f"eval: probes run on audio or video, not {modality!r}")
    g_tr, s_tr = (f.reshape(-1, f.shape[-1]) for f in fine_features(train.modality(modality), modality, model))
    g_te, s_te = (f.reshape(-1, f.shape[-1]) for f in fine_features(test.modality(modality), modality, model))
    sh_tr, sp_tr = _frame_targets(train, modality)
    sh_te, sp_te = _frame_targets(test, modality)
    return {
        "general_to_shared": _probe(g_tr, sh_tr, g_te, sh_te),
        "general_to_specific": _probe(g_tr, sp_tr, g_te, sp_te),
        "specific_to_shared": _probe(s_tr, sh_tr, s_te, sh_te),
    }


def write_probes_csv(path, probes: dict) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["probe", "accuracy"])
        for k in PROBES:
            w.writerow([k, _g(probes[k])])


def loss_drop(history, window: int) -> float:
    """Relative fall of the mean total loss from the first to the last ``window`` steps."""
    totals = np.array([r.total for r in history])
    if window < 1 or totals.size < 2 * window:
        raise ValidationError(f"eval: need at least {2 * window} steps for a window of {window}")
    return float(1.0 - totals[-window:].mean() / totals[:window].mean())


def write_losses_csv(path, history) -> None:
    from .losses import LOSS_COLUMNS

    fh, w = _writer(path)
    with fh:
        w.writerow(["step"] + LOSS_COLUMNS)
        for step, rep in enumerate(history, start=1):
            row = rep.as_row()
            w.writerow([step] + [_g(row[c]) for c in LOSS_COLUMNS])


# ---------------------------------------------------------------------------
# plots


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "fcidtoc"
    return plt


def _save(plt, fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_losses(history, path) -> None:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r.total for r in history], lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    _save(plt, fig, path)


def plot_sweep(rows, path) -> None:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = [r.ratio for r in rows]
    ax.plot(x, [r.toc_mse for r in rows], marker="o", label="TOC")
    ax.plot(x, [r.random_mean_mse for r in rows], marker="s", label="random mean")
    ax.set_xlabel("masked dimensions (%)")
    ax.set_ylabel("reconstruction MSE")
    ax.legend()
    _save(plt, fig, path)


def plot_activation(stats: ActivationStats, path) -> None:
    plt = _figure()
    totals = stats.totals()
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(list(totals), list(totals.values()), color=["tab:red", "tab:green", "tab:blue", "tab:gray"])
    ax.set_ylabel("codes")
    _save(plt, fig, path)
