"""Codebook container and training-free dimension selection (TOC).

TOC scores every feature dimension of a pretrained codebook by two
statistics computed across codewords:

* per-dimension similarity ``S_k``: the share of the average pairwise dot
  product (on unit-norm codes) contributed by dimension ``k``. Summing ``S_k``
  over all dimensions recovers the average off-diagonal cosine similarity.
* per-dimension variance ``V_k``: population variance of column ``k``.

They are combined as ``U_k = lam * V_k - (1 - lam) * S_k`` and the ``q``
largest ``U_k`` are kept. :class:`TOCSelector` wraps this as a scikit-learn
feature selector.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_is_fitted

from .errors import FormatError, ValidationError

MAGIC = b"TOCB"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_MAX_ENTRIES = 1 << 31


@dataclass(frozen=True)
class Codebook:
    """``H x D`` matrix of codewords. Immutable after construction."""

    codes: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        codes = np.array(self.codes, dtype=np.float64, copy=True)
        if codes.ndim != 2:
            raise ValidationError(f"codebook: codes must be 2-D, got shape {codes.shape}")
        h, d = codes.shape
        if h < 2 or d < 1:
            raise ValidationError(f"codebook: need H >= 2 and D >= 1, got H={h}, D={d}")
        if not np.all(np.isfinite(codes)):
            raise ValidationError("codebook: codes contain non-finite values")
        if self.normalized:
            norms = np.linalg.norm(codes, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-9)
            if bad.size:
                raise ValidationError(f"codebook: row {bad[0]} is flagged normalized but has norm {norms[bad[0]]}")
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    @property
    def H(self) -> int:
        return self.codes.shape[0]

    @property
    def D(self) -> int:
        return self.codes.shape[1]


@dataclass(frozen=True)
class DimensionScore:
    similarity: np.ndarray
    variance: np.ndarray
    combined: np.ndarray
    lam: float


@dataclass(frozen=True, eq=False)
class DimensionMask:
    flags: np.ndarray

    def __eq__(self, other):
        return isinstance(other, DimensionMask) and np.array_equal(self.flags, other.flags)

    def __hash__(self):
        return hash(self.flags.tobytes())

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool).copy()
        if flags.ndim != 1 or not 1 <= flags.sum() <= flags.size:
            raise ValidationError(f"codebook: mask must select between 1 and D dims, got {int(flags.sum())}")
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)

    @property
    def d(self) -> int:
        return self.flags.size

    @property
    def q(self) -> int:
        return int(self.flags.sum())

    @property
    def selected(self) -> list[int]:
        return np.flatnonzero(self.flags).tolist()

    @classmethod
    def from_indices(cls, indices, d: int) -> "DimensionMask":
        flags = np.zeros(d, dtype=bool)
        idx = np.asarray(list(indices), dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= d):
            raise ValidationError(f"codebook: mask index out of range [0, {d})")
        flags[idx] = True
        return cls(flags)

    @classmethod
    def full(cls, d: int) -> "DimensionMask":
        return cls(np.ones(d, dtype=bool))

    def as_float(self) -> np.ndarray:
        return self.flags.astype(np.float64)


def _as_codebook(codebook) -> Codebook:
    return codebook if isinstance(codebook, Codebook) else Codebook(np.asarray(codebook))


def l2_normalize(codebook) -> Codebook:
    cb = _as_codebook(codebook)
    norms = np.linalg.norm(cb.codes, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValidationError(f"codebook: row {zero[0]} has zero norm and cannot be normalized")
    return Codebook(cb.codes / norms[:, None], normalized=True)


def per_dim_similarity(codebook) -> np.ndarray:
    """``S_k = (1/H^2) * sum_{i != j} e_ik e_jk`` on the unit-norm codebook.

    Uses ``sum_{i != j} a_i a_j = (sum a)^2 - sum a^2`` so the cost is O(H D).
    """
    cb = _as_codebook(codebook)
    e = cb.codes if cb.normalized else l2_normalize(cb).codes
    col_sum = e.sum(axis=0)
    return (col_sum**2 - (e**2).sum(axis=0)) / cb.H**2


def per_dim_variance(codebook) -> np.ndarray:
    """Population variance of each column (divisor H)."""
    return _as_codebook(codebook).codes.var(axis=0)


def toc_scores(codebook, lam: float = 0.3, variance_on: str = "normalized") -> DimensionScore:
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"codebook: lambda must lie in [0, 1], got {lam}")
    if variance_on not in ("normalized", "raw"):
        raise ValidationError(f"codebook: variance_on must be 'normalized' or 'raw', got {variance_on!r}")
    cb = _as_codebook(codebook)
    unit = cb if cb.normalized else l2_normalize(cb)
    sim = per_dim_similarity(unit)
    var = per_dim_variance(unit if variance_on == "normalized" else cb)
    return DimensionScore(similarity=sim, variance=var, combined=lam * var - (1.0 - lam) * sim, lam=lam)


def select_dims(scores, q: int) -> DimensionMask:
    """Keep the ``q`` largest combined scores; ties go to the lower index."""
    u = np.asarray(scores.combined if isinstance(scores, DimensionScore) else scores, dtype=np.float64)
    d = u.size
    if not 1 <= q <= d:
        raise ValidationError(f"codebook: q must lie in [1, {d}], got {q}")
    order = np.lexsort((np.arange(d), -u))
    return DimensionMask.from_indices(order[:q], d)


def _masked_rows(codebook, mask: DimensionMask | None) -> np.ndarray:
    cb = _as_codebook(codebook)
    e = cb.codes
    if mask is not None:
        if mask.d != cb.D:
            raise ValidationError(f"codebook: mask length {mask.d} != D={cb.D}")
        e = e * mask.as_float()
    norms = np.linalg.norm(e, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValidationError(f"codebook: row {zero[0]} is all-zero under the mask")
    return e / norms[:, None]


def cosine_matrix(codebook, mask: DimensionMask | None = None) -> np.ndarray:
    """Full ``H x H`` cosine similarity of (optionally masked) codewords."""
    e = _masked_rows(codebook, mask)
    return e @ e.T


def average_similarity(codebook, mask: DimensionMask | None = None) -> float:
    """Mean off-diagonal cosine similarity, ``(1/H^2) sum_{i != j} cos(e_i, e_j)``.

    With a mask, rows are multiplied by the flags and renormalized before the
    cosine, i.e. the true cosine of the masked vectors.
    """
    e = _masked_rows(codebook, mask)
    h = e.shape[0]
    s = e.sum(axis=0)
    return float((s @ s - (e * e).sum()) / h**2)


def masked_dot_similarity(codebook, mask: DimensionMask | None = None) -> float:
    """Decomposed objective ``sum_k F_k S_k``: masked dot products of unit codes, no renormalization."""
    sim = per_dim_similarity(codebook)
    if mask is None:
        return float(sim.sum())
    return float(sim[mask.flags].sum())


def default_q(d: int) -> int:
    return max(1, d // 2)


class TOCSelector(SelectorMixin, BaseEstimator):
    """Training-free codebook dimension selector.

    ``fit`` takes the ``H x D`` codebook; ``transform`` then keeps the
    selected columns of any ``(n, D)`` feature matrix.

    Parameters
    ----------
    lam : float, default=0.3
        Weight on variance versus (negated) similarity.
    n_dims : int or None
        Number of dimensions to keep, ``D // 2`` when None.
    variance_on : {"normalized", "raw"}
        Codebook copy the variance term is computed on.
    """

    def __init__(self, lam: float = 0.3, n_dims: int | None = None, variance_on: str = "normalized"):
        self.lam = lam
        self.n_dims = n_dims
        self.variance_on = variance_on

    def fit(self, X, y=None):
        cb = _as_codebook(X)
        q = default_q(cb.D) if self.n_dims is None else self.n_dims
        self.scores_ = toc_scores(cb, self.lam, self.variance_on)
        self.mask_ = select_dims(self.scores_, q)
        self.n_features_in_ = cb.D
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "mask_")
        return np.asarray(self.mask_.flags)

    def apply_mask(self, X) -> np.ndarray:
        """Zero the unselected dimensions instead of dropping them."""
        check_is_fitted(self, "mask_")
        return np.asarray(X, dtype=np.float64) * self.mask_.as_float()


# ---------------------------------------------------------------------------
# file formats


def save_codebook(path, codebook) -> None:
    cb = _as_codebook(codebook)
    payload = np.ascontiguousarray(cb.codes, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, cb.H, cb.D, int(cb.normalized)))
        fh.write(payload)


def load_codebook(path) -> Codebook:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"codebook: {path} is truncated (no header)")
    magic, version, h, d, flags = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"codebook: {path} has bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"codebook: unsupported version {version}")
    if h * d > _MAX_ENTRIES:
        raise FormatError(f"codebook: H*D={h * d} overflows the supported size")
    expected = _HEADER.size + 4 * h * d
    if len(raw) != expected:
        raise FormatError(f"codebook: {path} payload is {len(raw) - _HEADER.size} bytes, expected {4 * h * d}")
    codes = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, d).astype(np.float64)
    # float32 storage rounds unit norms; re-flagging is only kept when it still validates
    normalized = bool(flags & 1) and bool(np.all(np.abs(np.linalg.norm(codes, axis=1) - 1) <= 1e-9))
    return Codebook(codes, normalized=normalized)


def save_mask(path, mask: DimensionMask) -> None:
    Path(path).write_text(json.dumps({"d": mask.d, "q": mask.q, "selected": mask.selected}) + "\n")


def load_mask(path) -> DimensionMask:
    try:
        obj = json.loads(Path(path).read_text())
        d, q, selected = int(obj["d"]), int(obj["q"]), list(obj["selected"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"codebook: malformed mask file {path}: {exc}") from exc
    if selected != sorted(set(selected)) or len(selected) != q:
        raise FormatError(f"codebook: mask file {path} must list {q} sorted unique indices")
    return DimensionMask.from_indices(selected, d)


def write_scores_csv(path, scores: DimensionScore) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "S_k", "V_k", "U_k"])
        for k, (s, v, u) in enumerate(zip(scores.similarity, scores.variance, scores.combined)):
            w.writerow([k, f"{s:.6g}", f"{v:.6g}", f"{u:.6g}"])
