"""Fine and coarse cross-modal disentangling model and its desk-scale trainer.

Fine stage (audio, video; per time step):
    general ``f^m = Phi^m_f(x^m)``, specific ``fs^m = Psi^m_f(x^m)``;
    CPC aligns ``f^a`` and ``f^v`` in both directions, CLUB separates
    ``f^m`` from ``fs^m``.

Coarse stage (audiovisual, text; one vector per sample):
    ``u^av = P^va(mean_t f^m)`` for each of m = audio, video with shared
    weights, ``u^te = P^te(x^te)``; ``c^M = Phi^M_c(u^M)``,
    ``cs^M = Psi^M_c(u^M)``; InfoNCE aligns each audiovisual view with
    ``c^te``, CLUB separates ``c^M`` from ``cs^M``.

Coarse general features of all three modalities are quantized against one
shared codebook that is updated by multimodal EMA (three modality groups).
Running the audiovisual branch per view keeps training and single-modality
inference on the same path. Decoders rebuild every input from the quantized
code (straight-through) concatenated with the specific features; the audio
and video frame decoders also see the fine general feature of their frame,
so time-varying shared content need not be copied into the specific stream.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .codebook import Codebook, DimensionMask
from .errors import FormatError, NonFiniteError, ValidationError
from .losses import (
    ClubEstimator,
    CpcHead,
    LossReport,
    club_estimate,
    club_fit_step,
    cpc_loss,
    infonce_loss,
    reconstruction_loss,
    total_loss,
)
from .numerics import DTYPE, MLP, Affine, child_seed, seeded_rng
from .quantizer import EmaState, commitment_loss, init_codebook, mmema_update, nearest_codes, straight_through

log = logging.getLogger(__name__)

MODALITIES = ("audio", "video", "text")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 5.0
    club_lr: float = 2e-3
    club_steps: int = 1
    horizon: int = 3
    toc_lambda: float = 0.3
    beta: float = 0.25
    tau: float = 1.0
    ema_decay: float = 0.99
    ema_epsilon: float = 1e-5
    codebook_size: int = 64
    dim: int = 16
    hidden: int = 32
    use_club_a: bool = True
    use_club_v: bool = True
    use_club_av: bool = True
    use_club_te: bool = True
    use_recon: bool = True
    use_commit: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValidationError("model: batch_size must be >= 2")
        if self.codebook_size < 2 or self.dim < 1 or self.hidden < 1:
            raise ValidationError("model: codebook_size >= 2, dim >= 1 and hidden >= 1 are required")
        if self.horizon < 1:
            raise ValidationError("model: horizon must be >= 1")
        if self.tau <= 0:
            raise ValidationError("model: tau must be positive")
        if not 0 < self.ema_decay <= 1:
            raise ValidationError("model: ema_decay must lie in (0, 1]")

    @property
    def club_flags(self) -> dict:
        return {k: getattr(self, f"use_club_{k}") for k in ("a", "v", "av", "te")}

    def without_club(self) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), "use_club_a": False, "use_club_v": False,
                              "use_club_av": False, "use_club_te": False})


@dataclass
class FineForward:
    f_a: torch.Tensor
    f_v: torch.Tensor
    fs_a: torch.Tensor
    fs_v: torch.Tensor


@dataclass
class CoarseForward:
    c_av: torch.Tensor
    c_te: torch.Tensor
    cs_av: torch.Tensor
    cs_te: torch.Tensor
    q_av: torch.Tensor
    q_te: torch.Tensor
    idx_av: torch.Tensor
    idx_te: torch.Tensor


class FcidModel(nn.Module):
    """All trainable pieces plus the shared codebook and its EMA state."""

    def __init__(self, dim_a: int, dim_v: int, dim_te: int, config: TrainConfig = TrainConfig()):
        super().__init__()
        self.config = config
        self.dims = {"audio": dim_a, "video": dim_v, "text": dim_te}
        rng = seeded_rng(config.seed)
        d, h = config.dim, config.hidden

        self.fine_gen_a = MLP(dim_a, h, d, rng)
        self.fine_gen_v = MLP(dim_v, h, d, rng)
        self.fine_spec_a = MLP(dim_a, h, d, rng)
        self.fine_spec_v = MLP(dim_v, h, d, rng)
        self.proj_va = Affine(d, d, rng)
        self.proj_te = Affine(dim_te, d, rng)
        self.coarse_gen_av = MLP(d, h, d, rng)
        self.coarse_gen_te = MLP(d, h, d, rng)
        self.coarse_spec_av = MLP(d, h, d, rng)
        self.coarse_spec_te = MLP(d, h, d, rng)
        # frame decoder inputs: [quantized code, coarse specific, fine general at t, fine specific at t]
        self.dec_a = MLP(4 * d, h, dim_a, rng)
        self.dec_v = MLP(4 * d, h, dim_v, rng)
        self.dec_te = MLP(2 * d, h, dim_te, rng)
        self.cpc_a = CpcHead(d, h, config.horizon, rng)
        self.cpc_v = CpcHead(d, h, config.horizon, rng)

        self.club = nn.ModuleDict({
            "a": ClubEstimator(d, d, rng),
            "v": ClubEstimator(d, d, rng),
            "av": ClubEstimator(d, d, rng),
            "te": ClubEstimator(d, d, rng),
        })
        self.codebook = init_codebook(rng, config.codebook_size, d)
        self.ema = EmaState.init(self.codebook, config.ema_decay, config.ema_epsilon)
        self.step_rng = seeded_rng(child_seed(rng))
        self.trained = False

    def main_parameters(self) -> list[nn.Parameter]:
        return [p for name, p in self.named_parameters() if not name.startswith("club.")]

    def codes_tensor(self) -> torch.Tensor:
        return torch.from_numpy(np.array(self.codebook.codes))


def _check_dim(x: torch.Tensor, expected: int, name: str) -> None:
    if x.shape[-1] != expected:
        raise ValidationError(f"model: {name} input has dim {x.shape[-1]}, expected {expected}")


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def forward_fine(x_a, x_v, model: FcidModel) -> FineForward:
    x_a, x_v = _t(x_a), _t(x_v)
    _check_dim(x_a, model.dims["audio"], "audio")
    _check_dim(x_v, model.dims["video"], "video")
    return FineForward(
        f_a=model.fine_gen_a(x_a),
        f_v=model.fine_gen_v(x_v),
        fs_a=model.fine_spec_a(x_a),
        fs_v=model.fine_spec_v(x_v),
    )


def pool_av(f: torch.Tensor) -> torch.Tensor:
    """Temporal mean pooling ``(N, T, D) -> (N, D)``."""
    return f.mean(dim=-2)


def forward_coarse(fine: FineForward, x_te, model: FcidModel) -> CoarseForward:
    """Coarse stage. The audiovisual branch runs on the audio and the video
    view separately with shared weights; ``*_av`` fields stack the two views
    as ``(2N, D)``, audio rows first.
    """
    x_te = _t(x_te)
    _check_dim(x_te, model.dims["text"], "text")
    u_av = model.proj_va(torch.cat([pool_av(fine.f_a), pool_av(fine.f_v)], dim=0))
    u_te = model.proj_te(x_te)
    c_av, c_te = model.coarse_gen_av(u_av), model.coarse_gen_te(u_te)
    codes = model.codes_tensor()
    idx_av, _ = nearest_codes(c_av, codes)
    idx_te, _ = nearest_codes(c_te, codes)
    return CoarseForward(
        c_av=c_av, c_te=c_te,
        cs_av=model.coarse_spec_av(u_av), cs_te=model.coarse_spec_te(u_te),
        q_av=codes[idx_av], q_te=codes[idx_te], idx_av=idx_av, idx_te=idx_te,
    )


def _views(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    n = x.shape[0] // 2
    return x[:n], x[n:]


def compute_losses(batch, model: FcidModel, t_cpc: int) -> tuple[dict, FineForward, CoarseForward]:
    """Differentiable loss terms for one batch; ablated terms are exact zeros."""
    cfg = model.config
    x_a, x_v, x_te = (_t(b) for b in batch[:3])
    fine = forward_fine(x_a, x_v, model)
    coarse = forward_coarse(fine, x_te, model)
    zero = x_a.new_zeros(())

    cpc = 0.5 * (cpc_loss(fine.f_a, fine.f_v, model.cpc_a, t=t_cpc)
                 + cpc_loss(fine.f_v, fine.f_a, model.cpc_v, t=t_cpc))
    c_a, c_v = _views(coarse.c_av)
    nce = 0.5 * (infonce_loss(c_a, coarse.c_te, cfg.tau) + infonce_loss(c_v, coarse.c_te, cfg.tau))

    # a negative CLUB value only means q is stale; it must not reward the encoders
    club = {k: club_estimate(g, s, model.club[k]).clamp(min=0.0) if cfg.club_flags[k] else zero
            for k, (g, s) in club_pairs(fine, coarse).items()}

    commit = zero
    if cfg.use_commit:
        commit = commitment_loss(coarse.c_av, coarse.q_av, cfg.beta) + commitment_loss(coarse.c_te, coarse.q_te, cfg.beta)

    recon = zero
    if cfg.use_recon:
        recon = sum(reconstruction_loss(x, y) for x, y in zip((x_a, x_v, x_te), decode(model, fine, coarse)))

    terms = {
        "recon": recon, "commit": commit, "cpc": cpc, "nce": nce,
        "club_fine": club["a"] + club["v"], "club_coarse": club["av"] + club["te"],
    }
    return terms, fine, coarse


def club_pairs(fine: FineForward, coarse: CoarseForward) -> dict:
    return {
        "a": (fine.f_a, fine.fs_a), "v": (fine.f_v, fine.fs_v),
        "av": (coarse.c_av, coarse.cs_av), "te": (coarse.c_te, coarse.cs_te),
    }


def decode(model: FcidModel, fine: FineForward, coarse: CoarseForward):
    st_a, st_v = _views(straight_through(coarse.c_av, coarse.q_av))
    cs_a, cs_v = _views(coarse.cs_av)
    st_te = straight_through(coarse.c_te, coarse.q_te)
    t_len = fine.fs_a.shape[1]

    def frames(dec, st, cs, f, fs):
        ctx = torch.cat([st, cs], dim=-1).unsqueeze(1).expand(-1, t_len, -1)
        return dec(torch.cat([ctx, f, fs], dim=-1))

    rec_a = frames(model.dec_a, st_a, cs_a, fine.f_a, fine.fs_a)
    rec_v = frames(model.dec_v, st_v, cs_v, fine.f_v, fine.fs_v)
    rec_te = model.dec_te(torch.cat([st_te, coarse.cs_te], dim=-1))
    return rec_a, rec_v, rec_te


class Trainer:
    """Owns the optimizer; one instance per model, single-threaded."""

    def __init__(self, model: FcidModel):
        cfg = model.config
        self.model = model
        self.params = model.main_parameters()
        self.opt = torch.optim.SGD(self.params, lr=cfg.lr, momentum=cfg.momentum)

    def step(self, batch) -> LossReport:
        model, cfg = self.model, self.model.config
        n, t_len = batch[0].shape[:2]
        if n < 2:
            raise ValidationError("model: training batch needs at least 2 samples")
        t_cpc = int(model.step_rng.integers(1, t_len - cfg.horizon + 1))
        terms, fine, coarse = compute_losses(batch, model, t_cpc)
        for name, value in terms.items():
            if not torch.isfinite(value):
                raise NonFiniteError(f"model: loss component {name} is non-finite")
        loss = total_loss(LossReport(**terms))
        self.opt.zero_grad()
        loss.backward()
        if cfg.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(self.params, cfg.clip_norm)
        self.opt.step()

        c_a, c_v = _views(coarse.c_av.detach())
        i_a, i_v = _views(coarse.idx_av)
        model.codebook, model.ema = mmema_update(
            model.ema, model.codebook,
            [(c_a.numpy(), i_a.numpy()), (c_v.numpy(), i_v.numpy()),
             (coarse.c_te.detach().numpy(), coarse.idx_te.numpy())],
        )
        for key, (g, s) in club_pairs(fine, coarse).items():
            if cfg.club_flags[key]:
                for _ in range(cfg.club_steps):
                    club_fit_step(model.club[key], g.detach(), s.detach(), cfg.club_lr)
        return LossReport(**{k: float(v.detach()) for k, v in terms.items()})


def training_step(batch, model: FcidModel, trainer: Trainer | None = None) -> LossReport:
    trainer = trainer or Trainer(model)
    return trainer.step(batch)


def iterate_batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start:start + batch_size]


def train(model: FcidModel, dataset, epochs: int | None = None, callback=None) -> list[LossReport]:
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    if len(dataset) < cfg.batch_size:
        raise ValidationError(f"model: dataset of {len(dataset)} is smaller than one batch")
    trainer = Trainer(model)
    rng = seeded_rng(child_seed(model.step_rng))
    history = []
    for epoch in range(epochs):
        for idx in iterate_batches(rng, len(dataset), cfg.batch_size):
            report = trainer.step((dataset.audio[idx], dataset.video[idx], dataset.text[idx]))
            history.append(report)
            if callback is not None:
                callback(len(history), report)
        log.debug("epoch %d total %.4f", epoch, history[-1].total)
    model.trained = True
    return history


def encode_coarse(x, modality: str, model: FcidModel) -> torch.Tensor:
    """Pre-quantization coarse general feature of one modality, no gradient."""
    with torch.no_grad():
        x = _t(x)
        if modality == "audio":
            _check_dim(x, model.dims["audio"], "audio")
            return model.coarse_gen_av(model.proj_va(pool_av(model.fine_gen_a(x))))
        if modality == "video":
            _check_dim(x, model.dims["video"], "video")
            return model.coarse_gen_av(model.proj_va(pool_av(model.fine_gen_v(x))))
        if modality == "text":
            _check_dim(x, model.dims["text"], "text")
            return model.coarse_gen_te(model.proj_te(x))
    raise ValidationError(f"model: unknown modality {modality!r}")


def encode_modality(x, modality: str, model: FcidModel, mask: DimensionMask | None = None,
                    masked_distance: bool = False):
    """Code indices and quantized features for one modality.

    Default TOC usage quantizes in the full space and then zeros the
    unselected dimensions of the emitted codes; ``masked_distance=True``
    instead restricts the nearest-code search to the selected dimensions.
    """
    c = encode_coarse(x, modality, model)
    codes = model.codes_tensor()
    weights = None
    if mask is not None:
        if mask.d != codes.shape[1]:
            raise ValidationError(f"model: mask length {mask.d} != D={codes.shape[1]}")
        weights = torch.from_numpy(mask.as_float()) if masked_distance else None
    idx, _ = nearest_codes(c, codes, weights)
    quantized = codes[idx].numpy()
    if mask is not None and not masked_distance:
        quantized = quantized * mask.as_float()
    return idx.numpy(), quantized


def fine_features(x, modality: str, model: FcidModel) -> tuple[np.ndarray, np.ndarray]:
    """Fine general and specific features ``(N, T, D)`` for audio or video."""
    with torch.no_grad():
        x = _t(x)
        if modality == "audio":
            return model.fine_gen_a(x).numpy(), model.fine_spec_a(x).numpy()
        if modality == "video":
            return model.fine_gen_v(x).numpy(), model.fine_spec_v(x).numpy()
    raise ValidationError(f"model: fine features exist only for audio and video, not {modality!r}")


def parameter_digest(model: FcidModel) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().numpy().tobytes())
    h.update(np.asarray(model.codebook.codes).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoint: "TOCM", u32 version, u32 header length, JSON header, float32 blobs

CKPT_MAGIC = b"TOCM"
_CKPT_HEADER = struct.Struct("<4sII")


def save_checkpoint(path, model: FcidModel) -> None:
    blobs = [(name, t.detach().numpy()) for name, t in model.state_dict().items()]
    blobs += [("codebook", np.asarray(model.codebook.codes)),
              ("ema.cluster_size", model.ema.cluster_size),
              ("ema.cluster_sum", model.ema.cluster_sum)]
    entries, offset = [], 0
    for name, arr in blobs:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += 4 * arr.size
    header = json.dumps({
        "config": asdict(model.config), "dims": model.dims, "trained": model.trained, "params": entries,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, 1, len(header)))
        fh.write(header)
        for _, arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> FcidModel:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError(f"model: {path} is truncated")
    magic, version, hlen = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC or version != 1:
        raise FormatError(f"model: {path} is not a checkpoint")
    try:
        header = json.loads(raw[_CKPT_HEADER.size:_CKPT_HEADER.size + hlen])
    except ValueError as exc:
        raise FormatError(f"model: corrupt checkpoint header in {path}") from exc
    base = _CKPT_HEADER.size + hlen
    dims = header["dims"]
    model = FcidModel(dims["audio"], dims["video"], dims["text"], TrainConfig(**header["config"]))
    arrays = {}
    for e in header["params"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        if start + 4 * size > len(raw):
            raise FormatError(f"model: {path} is truncated at {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4", count=size, offset=start).reshape(e["shape"]).astype(np.float64)
    state = {k: torch.from_numpy(arrays[k].copy()) for k in model.state_dict()}
    model.load_state_dict(state)
    model.codebook = Codebook(arrays["codebook"])
    model.ema = EmaState(model.config.ema_decay, model.config.ema_epsilon,
                         arrays["ema.cluster_size"], arrays["ema.cluster_sum"])
    model.trained = bool(header["trained"])
    return model


class FCID(TransformerMixin, BaseEstimator):
    """Estimator facade: ``fit`` trains on a :class:`MultimodalDataset`.

    ``transform`` returns quantized coarse features for one modality;
    ``predict`` returns the code indices.
    """

    def __init__(self, epochs=20, batch_size=64, lr=0.05, momentum=0.9, clip_norm=5.0, club_lr=2e-3, club_steps=1, horizon=3,
                 toc_lambda=0.3, beta=0.25, tau=1.0, ema_decay=0.99, ema_epsilon=1e-5,
                 codebook_size=64, dim=16, hidden=32, use_club_a=True, use_club_v=True,
                 use_club_av=True, use_club_te=True, use_recon=True, use_commit=True, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.club_lr = club_lr
        self.club_steps = club_steps
        self.horizon = horizon
        self.toc_lambda = toc_lambda
        self.beta = beta
        self.tau = tau
        self.ema_decay = ema_decay
        self.ema_epsilon = ema_epsilon
        self.codebook_size = codebook_size
        self.dim = dim
        self.hidden = hidden
        self.use_club_a = use_club_a
        self.use_club_v = use_club_v
        self.use_club_av = use_club_av
        self.use_club_te = use_club_te
        self.use_recon = use_recon
        self.use_commit = use_commit
        self.seed = seed

    def config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    def fit(self, X, y=None):
        cfg = self.config()
        self.model_ = FcidModel(X.audio.shape[-1], X.video.shape[-1], X.text.shape[-1], cfg)
        self.history_ = train(self.model_, X)
        return self

    def transform(self, X, modality: str = "audio", mask: DimensionMask | None = None):
        check_is_fitted(self, "model_")
        return encode_modality(X, modality, self.model_, mask)[1]

    def predict(self, X, modality: str = "audio", mask: DimensionMask | None = None):
        check_is_fitted(self, "model_")
        return encode_modality(X, modality, self.model_, mask)[0]
