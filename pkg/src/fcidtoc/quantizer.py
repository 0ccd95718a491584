"""Nearest-codeword quantization, straight-through gradients and MMEMA updates."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .codebook import Codebook, DimensionMask
from .errors import ValidationError
from .numerics import DTYPE


@dataclass
class QuantizationResult:
    indices: np.ndarray
    quantized: np.ndarray
    distances: np.ndarray


def _codes_of(codebook) -> np.ndarray:
    return codebook.codes if isinstance(codebook, Codebook) else np.asarray(codebook, dtype=np.float64)


def nearest_codes(features: torch.Tensor, codes: torch.Tensor, weights: torch.Tensor | None = None):
    """Index and squared distance of the nearest code for each row (torch, no grad).

    Ties resolve to the lowest index (``argmin`` returns the first minimum).
    ``weights`` scales each dimension's squared difference (a 0/1 mask in
    practice).
    """
    with torch.no_grad():
        f, c = features, codes
        if weights is not None:
            root = weights.sqrt()
            f, c = f * root, c * root
        # direct (non-matmul) Euclidean distances keep exact ties exact
        dist = torch.cdist(f, c, compute_mode="donot_use_mm_for_euclid_dist")
        best = torch.argmin(dist, dim=1)
        sq = (features - codes[best]) ** 2
        if weights is not None:
            sq = sq * weights
        return best, sq.sum(-1)


def quantize(features, codebook, mask: DimensionMask | None = None) -> QuantizationResult:
    """Map each row of ``features`` (``T x D``) to its nearest codeword.

    With a mask the distance is measured on the selected dimensions only; the
    returned ``quantized`` rows are still the full codewords.
    """
    x = np.asarray(features, dtype=np.float64)
    codes = _codes_of(codebook)
    if x.ndim != 2 or x.shape[1] != codes.shape[1]:
        raise ValidationError(f"quantizer: features of shape {x.shape} do not match D={codes.shape[1]}")
    weights = None
    if mask is not None:
        if mask.d != codes.shape[1]:
            raise ValidationError(f"quantizer: mask length {mask.d} != D={codes.shape[1]}")
        weights = torch.from_numpy(mask.as_float())
    idx, dist = nearest_codes(torch.from_numpy(x), torch.from_numpy(np.array(codes)), weights)
    idx = idx.numpy()
    return QuantizationResult(indices=idx, quantized=codes[idx].copy(), distances=dist.numpy())


def commitment_loss(features: torch.Tensor, quantized: torch.Tensor, beta: float = 0.25) -> torch.Tensor:
    """``beta * mean((features - sg[quantized])^2)``; no gradient reaches the codebook."""
    if features.shape != quantized.shape:
        raise ValidationError(f"quantizer: commitment shapes differ {tuple(features.shape)} vs {tuple(quantized.shape)}")
    return beta * torch.mean((features - quantized.detach()) ** 2)


def straight_through(features: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward value is ``quantized``; the backward pass copies gradients to ``features``."""
    if features.shape != quantized.shape:
        raise ValidationError("quantizer: straight-through shapes differ")
    return features + (quantized - features).detach()


@dataclass
class EmaState:
    decay: float
    epsilon: float
    cluster_size: np.ndarray
    cluster_sum: np.ndarray

    @classmethod
    def init(cls, codebook, decay: float = 0.99, epsilon: float = 1e-5) -> "EmaState":
        codes = _codes_of(codebook)
        if not 0.0 < decay <= 1.0:
            raise ValidationError(f"quantizer: EMA decay must lie in (0, 1], got {decay}")
        return cls(decay, epsilon, np.ones(codes.shape[0]), codes.copy())


def mmema_update(state: EmaState, codebook, assignments) -> tuple[Codebook, EmaState]:
    """Multimodal EMA step.

    ``assignments`` is a list of ``(features, indices)`` pairs, one per
    modality. Per-modality one-hot counts and feature sums are averaged with
    equal weight before entering the usual EMA recursion, and the codes are
    the Laplace-smoothed ratio of running sums to running counts.
    """
    codes = _codes_of(codebook)
    h, d = codes.shape
    if state.cluster_sum.shape != (h, d):
        raise ValidationError("quantizer: EMA state does not match codebook shape")
    if not assignments:
        raise ValidationError("quantizer: mmema_update needs at least one modality")
    counts = np.zeros(h)
    sums = np.zeros((h, d))
    for feats, idx in assignments:
        feats = np.asarray(feats, dtype=np.float64).reshape(-1, d)
        idx = np.asarray(idx).reshape(-1)
        if idx.size != feats.shape[0]:
            raise ValidationError("quantizer: features and indices disagree in length")
        if idx.size and (idx.min() < 0 or idx.max() >= h):
            raise ValidationError(f"quantizer: code index out of [0, {h})")
        counts += np.bincount(idx, minlength=h)
        np.add.at(sums, idx, feats)
    m = len(assignments)
    counts /= m
    sums /= m

    g = state.decay
    size = g * state.cluster_size + (1.0 - g) * counts
    total = g * state.cluster_sum + (1.0 - g) * sums
    n = size.sum()
    smoothed = (size + state.epsilon) / (n + h * state.epsilon) * n
    new_codes = total / smoothed[:, None]
    return Codebook(new_codes), EmaState(g, state.epsilon, size, total)


def init_codebook(rng: np.random.Generator, h: int, d: int) -> Codebook:
    """Rows i.i.d. ``Normal(0, 1/D)``."""
    return Codebook(rng.normal(0.0, 1.0 / np.sqrt(d), size=(h, d)))


def write_assignments_csv(path, rows) -> None:
    """``rows`` yields ``(sample_id, t, code_index, sq_distance)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "t", "code_index", "sq_distance"])
        for sid, t, k, dist in rows:
            w.writerow([sid, t, int(k), f"{dist:.6g}"])


class VectorQuantizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper around a fixed codebook.

    ``predict`` returns code indices, ``transform`` the quantized rows. With
    ``masked_distance=True`` the mask restricts the nearest-neighbour search;
    otherwise quantization is done in the full space and the mask zeros the
    unselected dimensions of the emitted codewords.
    """

    def __init__(self, codebook=None, mask: DimensionMask | None = None, masked_distance: bool = False):
        self.codebook = codebook
        self.mask = mask
        self.masked_distance = masked_distance

    def fit(self, X=None, y=None):
        if self.codebook is None:
            raise ValidationError("quantizer: VectorQuantizer needs a codebook")
        self.codebook_ = self.codebook if isinstance(self.codebook, Codebook) else Codebook(self.codebook)
        self.n_features_in_ = self.codebook_.D
        return self

    def _quantize(self, X) -> QuantizationResult:
        check_is_fitted(self, "codebook_")
        return quantize(X, self.codebook_, self.mask if self.masked_distance else None)

    def predict(self, X) -> np.ndarray:
        return self._quantize(X).indices

    def transform(self, X) -> np.ndarray:
        q = self._quantize(X).quantized
        if self.mask is not None and not self.masked_distance:
            q = q * self.mask.as_float()
        return q


def to_torch(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)
