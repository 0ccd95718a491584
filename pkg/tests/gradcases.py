"""Random differentiable instances for every loss, shared by unit and acceptance tests."""

import numpy as np
import torch

from fcidtoc.losses import (
    ClubEstimator,
    CpcHead,
    LossReport,
    club_estimate,
    cpc_loss,
    infonce_loss,
    reconstruction_loss,
    total_loss,
)
from fcidtoc.numerics import ParamStore, seeded_rng
from fcidtoc.quantizer import commitment_loss


def _leaf(rng, *shape, scale=1.0):
    return torch.from_numpy(scale * rng.standard_normal(shape)).requires_grad_(True)


def club_case(seed):
    rng = seeded_rng(seed)
    g, s = _leaf(rng, 6, 2, 3), _leaf(rng, 6, 2, 3)
    est = ClubEstimator(3, 3, rng)
    store = ParamStore({"g": g, "s": s, **{f"q.{k}": v for k, v in est.named_parameters()}})
    return (lambda: club_estimate(g, s, est)), store


def cpc_case(seed):
    rng = seeded_rng(seed)
    # unit-scale sequences leave some recurrent-weight gradients near 1e-8,
    # below what central differences resolve at eps=1e-5
    f_m, f_n = _leaf(rng, 4, 5, 3, scale=2.0), _leaf(rng, 4, 5, 3, scale=2.0)
    head = CpcHead(3, 4, 2, rng)
    t = int(rng.integers(1, 4))
    store = ParamStore({"f_m": f_m, "f_n": f_n, **{f"h.{k}": v for k, v in head.named_parameters()}})
    return (lambda: cpc_loss(f_m, f_n, head, t=t)), store


def infonce_case(seed):
    rng = seeded_rng(seed)
    a, b = _leaf(rng, 5, 4), _leaf(rng, 5, 4)
    tau = float(rng.uniform(0.5, 2.0))
    return (lambda: infonce_loss(a, b, tau)), ParamStore({"a": a, "b": b})


def recon_case(seed):
    rng = seeded_rng(seed)
    x, y = _leaf(rng, 4, 3), _leaf(rng, 4, 3)
    return (lambda: reconstruction_loss(x, y)), ParamStore({"x": x, "y": y})


def commitment_case(seed):
    rng = seeded_rng(seed)
    f = _leaf(rng, 4, 3)
    q = torch.from_numpy(rng.standard_normal((4, 3)))
    return (lambda: commitment_loss(f, q, 0.25)), ParamStore({"f": f})


def composite_case(seed):
    """Unweighted sum of every term on shared random inputs."""
    rng = seeded_rng(seed)
    f_a, f_v, fs_a = (_leaf(rng, 4, 5, 3, scale=2.0) for _ in range(3))
    c_av, c_te, cs_av = _leaf(rng, 4, 3), _leaf(rng, 4, 3), _leaf(rng, 4, 3)
    x, x_hat = torch.from_numpy(rng.standard_normal((4, 3))), _leaf(rng, 4, 3)
    q = torch.from_numpy(rng.standard_normal((4, 3)))
    head = CpcHead(3, 4, 2, rng)
    est_f, est_c = ClubEstimator(3, 3, rng), ClubEstimator(3, 3, rng)
    t = int(rng.integers(1, 4))

    def loss():
        return total_loss(LossReport(
            recon=reconstruction_loss(x, x_hat),
            commit=commitment_loss(c_av, q),
            cpc=cpc_loss(f_a, f_v, head, t=t),
            nce=infonce_loss(c_av, c_te),
            club_fine=club_estimate(f_a, fs_a, est_f),
            club_coarse=club_estimate(c_av, cs_av, est_c),
        ))

    store = ParamStore({
        "f_a": f_a, "f_v": f_v, "fs_a": fs_a, "c_av": c_av, "c_te": c_te, "cs_av": cs_av, "x_hat": x_hat,
        **{f"h.{k}": v for k, v in head.named_parameters()},
        **{f"qf.{k}": v for k, v in est_f.named_parameters()},
    })
    return loss, store


CASES = {
    "club": club_case,
    "cpc": cpc_case,
    "infonce": infonce_case,
    "reconstruction": recon_case,
    "commitment": commitment_case,
    "composite": composite_case,
}
