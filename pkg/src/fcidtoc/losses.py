"""Mutual-information and reconstruction losses.

* CLUB upper bound on I(general; specific) with a diagonal-Gaussian
  variational posterior ``q(specific | general)``.
* CPC across two sequences: an LSTM context from one modality scores the
  next ``R`` steps of the other against in-batch negatives.
* Symmetric InfoNCE on cosine similarity for non-sequential features.
* MSE reconstruction and the unweighted total objective.

Everything is torch float64 and differentiable; gradients are checked against
:func:`fcidtoc.numerics.finite_diff_check` in the test-suite.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NonFiniteError, ValidationError
from .numerics import Affine, LSTMSummarizer

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
_LOG_2PI = math.log(2.0 * math.pi)


class ClubEstimator(nn.Module):
    """Variational network ``q(y | x) = N(mu(x), diag(exp(logvar(x))))``.

    One tanh hidden layer of width ``2 * d_in`` feeds separate mean and
    log-variance heads; the log-variance is clamped to [-10, 10].
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.hidden = Affine(d_in, 2 * d_in, rng)
        self.mu_head = Affine(2 * d_in, d_out, rng)
        self.logvar_head = Affine(2 * d_in, d_out, rng)
        self._opt: torch.optim.Optimizer | None = None

    def forward(self, x: torch.Tensor):
        h = torch.tanh(self.hidden(x))
        return self.mu_head(h), self.logvar_head(h).clamp(LOGVAR_MIN, LOGVAR_MAX)

    def log_likelihood(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Per-row ``log q(y_i | x_i)`` summed over output dims."""
        mu, logvar = self(x)
        return (-0.5 * (_LOG_2PI + logvar + (y - mu) ** 2 / logvar.exp())).sum(-1)


def _as_btd(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(1) if x.ndim == 2 else x


def club_estimate(general: torch.Tensor, specific: torch.Tensor, est: ClubEstimator) -> torch.Tensor:
    """CLUB estimate for ``(N, T, D)`` or ``(N, D)`` batches.

    Positive term averages ``log q(s_it | g_it)`` over (i, t); the negative
    term averages ``log q(s_jt | g_it)`` over all (i, j, t), j = i included.
    The negative term is evaluated in closed form from the first two moments
    of ``s`` across the batch at each time step.
    """
    if general.shape[:-1] != specific.shape[:-1]:
        raise ValidationError(
            f"losses: CLUB batch shapes differ {tuple(general.shape)} vs {tuple(specific.shape)}"
        )
    g, s = _as_btd(general), _as_btd(specific)
    if g.shape[0] < 2:
        raise ValidationError("losses: CLUB needs a batch of at least 2")
    mu, logvar = est(g)
    inv_var = (-logvar).exp()
    positive = (-0.5 * (_LOG_2PI + logvar + (s - mu) ** 2 * inv_var)).sum(-1).mean()
    m1 = s.mean(0, keepdim=True)
    m2 = (s * s).mean(0, keepdim=True)
    spread = m2 - 2.0 * mu * m1 + mu * mu
    negative = (-0.5 * (_LOG_2PI + logvar + spread * inv_var)).sum(-1).mean()
    return positive - negative


def club_nll(est: ClubEstimator, general: torch.Tensor, specific: torch.Tensor) -> torch.Tensor:
    g, s = _as_btd(general), _as_btd(specific)
    return -est.log_likelihood(g, s).mean()


def club_fit_step(est: ClubEstimator, general, specific, lr: float = 1e-3) -> float:
    """One Adam step maximizing ``log q(specific | general)``. Returns the NLL before the step."""
    g = torch.as_tensor(general).detach()
    s = torch.as_tensor(specific).detach()
    if est._opt is None:
        est._opt = torch.optim.Adam(est.parameters(), lr=lr)
    for group in est._opt.param_groups:
        group["lr"] = lr
    est._opt.zero_grad()
    nll = club_nll(est, g, s)
    if not torch.isfinite(nll):
        raise NonFiniteError("losses: CLUB estimator NLL is non-finite")
    nll.backward()
    est._opt.step()
    return float(nll.detach())


class CpcHead(nn.Module):
    """Context LSTM for one modality plus one prediction matrix per future step."""

    def __init__(self, d_feat: int, d_ctx: int, horizon: int, rng: np.random.Generator):
        super().__init__()
        if horizon < 1:
            raise ValidationError("losses: CPC horizon must be >= 1")
        self.horizon = horizon
        self.summarizer = LSTMSummarizer(d_feat, d_ctx, rng)
        bound = 1.0 / math.sqrt(d_ctx)
        self.predictors = nn.ParameterList(
            [nn.Parameter(torch.from_numpy(rng.uniform(-bound, bound, (d_ctx, d_feat)))) for _ in range(horizon)]
        )


def contrastive_ce(logits: torch.Tensor) -> torch.Tensor:
    """``-mean_i log softmax(logits[i])[i]``: positives on the diagonal, positive included in the denominator."""
    targets = torch.arange(logits.shape[0])
    return F.cross_entropy(logits, targets)


def draw_cpc_time(rng: np.random.Generator, t_len: int, horizon: int) -> int:
    """1-based context length ``t`` uniform on ``(0, T - R]``."""
    if t_len <= horizon:
        raise ValidationError(f"losses: CPC needs T > R, got T={t_len}, R={horizon}")
    return int(rng.integers(1, t_len - horizon + 1))


def cpc_loss(f_m: torch.Tensor, f_n: torch.Tensor, head: CpcHead, rng=None, t: int | None = None) -> torch.Tensor:
    """CPC from modality ``m`` to ``n``.

    The context is the LSTM state after the first ``t`` steps of ``f_m``; for
    ``r = 1..R`` it scores ``f_n`` at step ``t + r`` (1-based) of every batch
    item, the matching item being the positive.
    """
    n, t_len, _ = f_m.shape
    if f_n.shape[:2] != f_m.shape[:2]:
        raise ValidationError("losses: CPC sequences must share batch size and length")
    if n < 2:
        raise ValidationError("losses: CPC needs a batch of at least 2")
    if t_len <= head.horizon:
        raise ValidationError(f"losses: CPC needs T > R, got T={t_len}, R={head.horizon}")
    if t is None:
        t = draw_cpc_time(rng, t_len, head.horizon)
    context = head.summarizer(f_m, steps=t)[:, t - 1]
    total = f_m.new_zeros(())
    for r in range(1, head.horizon + 1):
        pred = context @ head.predictors[r - 1]
        logits = pred @ f_n[:, t - 1 + r].T
        total = total + contrastive_ce(logits)
    return total / head.horizon


def _unit_rows(x: torch.Tensor, name: str) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        row = int(torch.nonzero(norms[:, 0] == 0)[0])
        raise ValidationError(f"losses: {name} row {row} has zero norm")
    return x / norms


def infonce_loss(c_m: torch.Tensor, c_n: torch.Tensor, tau: float = 1.0, symmetric: bool = True) -> torch.Tensor:
    """InfoNCE over cosine similarity / tau, averaged over both directions by default."""
    if c_m.shape != c_n.shape or c_m.ndim != 2:
        raise ValidationError("losses: InfoNCE inputs must be equal-shape (N, D)")
    if c_m.shape[0] < 2:
        raise ValidationError("losses: InfoNCE needs N >= 2")
    if tau <= 0:
        raise ValidationError(f"losses: tau must be positive, got {tau}")
    logits = _unit_rows(c_m, "c_m") @ _unit_rows(c_n, "c_n").T / tau
    forward = contrastive_ce(logits)
    if not symmetric:
        return forward
    return 0.5 * (forward + contrastive_ce(logits.T))


def reconstruction_loss(x: torch.Tensor, decoded: torch.Tensor) -> torch.Tensor:
    if x.shape != decoded.shape:
        raise ValidationError(f"losses: reconstruction shapes differ {tuple(x.shape)} vs {tuple(decoded.shape)}")
    return torch.mean((x - decoded) ** 2)


@dataclass
class LossReport:
    recon: float = 0.0
    commit: float = 0.0
    cpc: float = 0.0
    nce: float = 0.0
    club_fine: float = 0.0
    club_coarse: float = 0.0

    @property
    def contra(self) -> float:
        return self.cpc + self.nce

    @property
    def club(self) -> float:
        return self.club_fine + self.club_coarse

    @property
    def total(self) -> float:
        return total_loss(self)

    def as_row(self) -> dict:
        row = asdict(self)
        row["total"] = self.total
        return row


LOSS_COLUMNS = [f.name for f in fields(LossReport)] + ["total"]


def total_loss(parts: LossReport):
    """``recon + commit + (cpc + nce) + (club_fine + club_coarse)``, no weights.

    Works on floats or on torch scalars with the same field names.
    """
    for f in fields(LossReport):
        value = getattr(parts, f.name)
        if not math.isfinite(float(value.detach() if isinstance(value, torch.Tensor) else value)):
            raise NonFiniteError(f"losses: {f.name} is non-finite")
    return (
        parts.recon
        + parts.commit
        + (parts.cpc + parts.nce)
        + (parts.club_fine + parts.club_coarse)
    )
