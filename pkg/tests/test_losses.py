import math

import numpy as np
import pytest
import torch
from gradcases import CASES
from hypothesis import given
from hypothesis import strategies as st

from fcidtoc.errors import NonFiniteError, ValidationError
from fcidtoc.losses import (
    LOSS_COLUMNS,
    ClubEstimator,
    CpcHead,
    LossReport,
    club_estimate,
    club_fit_step,
    club_nll,
    contrastive_ce,
    cpc_loss,
    draw_cpc_time,
    infonce_loss,
    reconstruction_loss,
    total_loss,
)
from fcidtoc.numerics import finite_diff_check, seeded_rng


def _t(a):
    return torch.from_numpy(np.asarray(a, dtype=np.float64))


def club_bruteforce(g, s, est):
    """Explicit average over all (i, j) pairs at each step."""
    g, s = g.unsqueeze(1) if g.ndim == 2 else g, s.unsqueeze(1) if s.ndim == 2 else s
    n, t_len, _ = g.shape
    pos, neg = 0.0, 0.0
    for t in range(t_len):
        for i in range(n):
            mu, lv = est(g[i, t])
            ll = lambda y: float((-0.5 * (math.log(2 * math.pi) + lv + (y - mu) ** 2 / lv.exp())).sum())
            pos += ll(s[i, t])
            neg += sum(ll(s[j, t]) for j in range(n)) / n
    return (pos - neg) / (n * t_len)


@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(1, 3))
def test_club_closed_form_matches_pair_loop(seed, n, t_len):
    rng = seeded_rng(seed)
    est = ClubEstimator(3, 2, rng)
    g, s = _t(rng.standard_normal((n, t_len, 3))), _t(rng.standard_normal((n, t_len, 2)))
    with torch.no_grad():
        assert float(club_estimate(g, s, est)) == pytest.approx(club_bruteforce(g, s, est), rel=1e-10, abs=1e-10)


def test_club_accepts_flat_batches_and_validates():
    rng = seeded_rng(0)
    est = ClubEstimator(3, 3, rng)
    g, s = _t(rng.standard_normal((5, 3))), _t(rng.standard_normal((5, 3)))
    assert club_estimate(g, s, est).ndim == 0
    with pytest.raises(ValidationError):
        club_estimate(g[:1], s[:1], est)
    with pytest.raises(ValidationError):
        club_estimate(g, s[:4], est)


def test_club_logvar_is_clamped():
    est = ClubEstimator(2, 2, seeded_rng(0))
    with torch.no_grad():
        est.logvar_head.bias.fill_(50.0)
    _, lv = est(torch.zeros(1, 2, dtype=torch.float64))
    assert torch.all(lv == 10.0)


def test_club_fit_step_reduces_nll():
    rng = seeded_rng(1)
    x = _t(rng.standard_normal((256, 2)))
    y = 0.8 * x + 0.3 * _t(rng.standard_normal((256, 2)))
    est = ClubEstimator(2, 2, rng)
    first = club_fit_step(est, x, y, lr=1e-2)
    for _ in range(200):
        club_fit_step(est, x, y, lr=1e-2)
    assert float(club_nll(est, x, y).detach()) < first - 0.5


def test_contrastive_ce_includes_positive():
    logits = _t([[2.0, 0.0], [1.0, 3.0]])
    expected = -0.5 * (2.0 - math.log(math.exp(2) + 1) + 3.0 - math.log(math.e + math.exp(3)))
    assert float(contrastive_ce(logits)) == pytest.approx(expected)


def test_cpc_loss_matches_manual_scores():
    rng = seeded_rng(2)
    head = CpcHead(3, 4, 2, rng)
    f_m, f_n = _t(rng.standard_normal((3, 5, 3))), _t(rng.standard_normal((3, 5, 3)))
    t = 2
    with torch.no_grad():
        ctx = head.summarizer(f_m)[:, t - 1]
        total = 0.0
        for r in (1, 2):
            scores = ctx @ head.predictors[r - 1] @ f_n[:, t - 1 + r].T
            total += float(-torch.log_softmax(scores, dim=1).diagonal().mean())
        assert float(cpc_loss(f_m, f_n, head, t=t)) == pytest.approx(total / 2)


def test_cpc_time_is_in_range_and_validated():
    rng = seeded_rng(3)
    draws = {draw_cpc_time(rng, 8, 3) for _ in range(300)}
    assert draws == {1, 2, 3, 4, 5}
    with pytest.raises(ValidationError):
        draw_cpc_time(rng, 3, 3)
    head = CpcHead(2, 2, 3, rng)
    with pytest.raises(ValidationError):
        cpc_loss(torch.zeros(4, 3, 2, dtype=torch.float64), torch.zeros(4, 3, 2, dtype=torch.float64), head, t=1)
    with pytest.raises(ValidationError):
        CpcHead(2, 2, 0, rng)


def test_infonce_identical_orthonormal_pair():
    e = torch.eye(2, dtype=torch.float64)
    assert float(infonce_loss(e, e, symmetric=False)) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert float(infonce_loss(e, e)) == pytest.approx(0.3132616875182228, abs=1e-12)


@given(st.floats(0.05, 5.0))
def test_infonce_is_scale_invariant(scale):
    rng = seeded_rng(4)
    a, b = _t(rng.standard_normal((6, 3))), _t(rng.standard_normal((6, 3)))
    assert float(infonce_loss(scale * a, b, tau=0.5)) == pytest.approx(float(infonce_loss(a, b, tau=0.5)), rel=1e-10)


def test_infonce_validation():
    z = torch.zeros(3, 2, dtype=torch.float64)
    with pytest.raises(ValidationError, match="zero norm"):
        infonce_loss(z, torch.ones(3, 2, dtype=torch.float64))
    with pytest.raises(ValidationError):
        infonce_loss(torch.ones(3, 2, dtype=torch.float64), torch.ones(3, 2, dtype=torch.float64), tau=0.0)
    with pytest.raises(ValidationError):
        infonce_loss(torch.ones(1, 2, dtype=torch.float64), torch.ones(1, 2, dtype=torch.float64))


def test_reconstruction_loss():
    assert float(reconstruction_loss(_t([[1.0, 2.0]]), _t([[0.0, 0.0]]))) == pytest.approx(2.5)
    with pytest.raises(ValidationError):
        reconstruction_loss(_t([[1.0]]), _t([[1.0, 2.0]]))


def test_total_loss_is_plain_sum():
    rep = LossReport(1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    assert total_loss(rep) == 21.0 == rep.total
    assert rep.contra == 7.0 and rep.club == 11.0
    assert list(rep.as_row()) == LOSS_COLUMNS
    with pytest.raises(NonFiniteError):
        total_loss(LossReport(recon=float("nan")))


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    for seed in range(3):
        fn, store = CASES[name](seed)
        store.backward(fn)
        report = finite_diff_check(fn, store)
        assert report.passed, (seed, report.failing, report.worst)
