"""Synthetic audio / video / text features with known latent structure.

Each sample has

* ``z_avt`` (constant over time) shared by all three modalities; the class
  label is the index of the nearest class centre to ``z_avt``;
* ``z_av[t]`` shared by audio and video only, an AR(1) trajectory;
* ``z_a[t]``, ``z_v[t]`` private AR(1) trajectories and a static ``z_te``.

Audio and video frames are fixed random linear maps of
``[z_avt, z_av[t], z_private[t]]`` plus a per-sample linear drift and
Gaussian noise. Text is a linear map of ``[z_avt, z_te]`` plus noise, so it
never sees the audio-video pairwise factor.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .numerics import seeded_rng

AR_COEF = 0.8
CENTER_SCALE = 1.5
WITHIN_CLASS_SPREAD = 0.5
DRIFT_SCALE = 0.1

TENSOR_MAGIC = b"TOCT"
_TENSOR_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class SynthConfig:
    n: int = 2000
    T: int = 8
    n_classes: int = 8
    shared_dim: int = 4
    pairwise_dim: int = 2
    specific_dim: int = 2
    dim_a: int = 24
    dim_v: int = 24
    dim_te: int = 16
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("noise", "seed"):
                continue
            if getattr(self, f.name) < 1:
                raise ValidationError(f"synth: {f.name} must be >= 1")
        if self.noise < 0:
            raise ValidationError("synth: noise must be >= 0")


@dataclass
class MultimodalDataset:
    audio: np.ndarray  # (N, T, dim_a)
    video: np.ndarray  # (N, T, dim_v)
    text: np.ndarray  # (N, dim_te)
    labels: np.ndarray  # (N,)
    latents: dict = field(default_factory=dict)
    config: SynthConfig | None = None

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "MultimodalDataset":
        idx = np.asarray(idx)
        return MultimodalDataset(
            self.audio[idx], self.video[idx], self.text[idx], self.labels[idx],
            {k: v[idx] for k, v in self.latents.items()}, self.config,
        )

    def modality(self, name: str) -> np.ndarray:
        try:
            return {"audio": self.audio, "video": self.video, "text": self.text}[name]
        except KeyError:
            raise ValidationError(f"synth: unknown modality {name!r}") from None


def _ar1(rng, n, t_len, dim):
    z = np.empty((n, t_len, dim))
    z[:, 0] = rng.standard_normal((n, dim))
    scale = np.sqrt(1.0 - AR_COEF**2)
    for t in range(1, t_len):
        z[:, t] = AR_COEF * z[:, t - 1] + scale * rng.standard_normal((n, dim))
    return z


def generate(config: SynthConfig = SynthConfig()) -> MultimodalDataset:
    cfg = config
    rng = seeded_rng(cfg.seed)
    centers = CENTER_SCALE * rng.standard_normal((cfg.n_classes, cfg.shared_dim))
    drawn = rng.integers(0, cfg.n_classes, size=cfg.n)
    z_avt = centers[drawn] + WITHIN_CLASS_SPREAD * rng.standard_normal((cfg.n, cfg.shared_dim))
    labels = np.argmin(((z_avt[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)

    z_av = _ar1(rng, cfg.n, cfg.T, cfg.pairwise_dim)
    z_a = _ar1(rng, cfg.n, cfg.T, cfg.specific_dim)
    z_v = _ar1(rng, cfg.n, cfg.T, cfg.specific_dim)
    z_te = rng.standard_normal((cfg.n, cfg.specific_dim))

    k_av = cfg.shared_dim + cfg.pairwise_dim + cfg.specific_dim
    k_te = cfg.shared_dim + cfg.specific_dim
    map_a = rng.standard_normal((k_av, cfg.dim_a)) / np.sqrt(k_av)
    map_v = rng.standard_normal((k_av, cfg.dim_v)) / np.sqrt(k_av)
    map_te = rng.standard_normal((k_te, cfg.dim_te)) / np.sqrt(k_te)

    ramp = (np.arange(cfg.T) / max(cfg.T - 1, 1) - 0.5)[None, :, None]
    shared_seq = np.broadcast_to(z_avt[:, None, :], (cfg.n, cfg.T, cfg.shared_dim))

    def frames(private, mapping, dim):
        z = np.concatenate([shared_seq, z_av, private], axis=-1)
        drift = DRIFT_SCALE * rng.standard_normal((cfg.n, 1, dim)) * ramp
        return z @ mapping + drift + cfg.noise * rng.standard_normal((cfg.n, cfg.T, dim))

    audio = frames(z_a, map_a, cfg.dim_a)
    video = frames(z_v, map_v, cfg.dim_v)
    text = np.concatenate([z_avt, z_te], axis=-1) @ map_te + cfg.noise * rng.standard_normal((cfg.n, cfg.dim_te))

    latents = {"z_avt": z_avt, "z_av": z_av, "z_a": z_a, "z_v": z_v, "z_te": z_te}
    return MultimodalDataset(audio, video, text, labels, latents, cfg)


def _allocate(total: int, fractions) -> list[int]:
    raw = np.asarray(fractions) * total
    counts = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def split(dataset: MultimodalDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Label-stratified deterministic partition.

    Samples are ordered class by class (shuffled within class) and dealt to
    the partitions by largest running deficit, so every class is spread in
    proportion and the global sizes are exact.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValidationError(f"synth: split fractions must be non-negative and sum to 1, got {fractions.tolist()}")
    rng = seeded_rng(seed)
    n = len(dataset)
    order = np.concatenate(
        [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in np.unique(dataset.labels)]
    )
    targets = np.asarray(_allocate(n, fractions), dtype=np.float64)
    assigned = np.zeros(len(fractions))
    buckets: list[list[int]] = [[] for _ in fractions]
    for pos, idx in enumerate(order):
        k = int(np.argmax(targets * (pos + 1) / n - assigned))
        assigned[k] += 1
        buckets[k].append(int(idx))
    return [dataset.subset(np.sort(b)) for b in buckets]


# ---------------------------------------------------------------------------
# on-disk format


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    with open(path, "wb") as fh:
        fh.write(_TENSOR_HEADER.pack(TENSOR_MAGIC, 1, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _TENSOR_HEADER.size:
        raise FormatError(f"synth: {path} is truncated")
    magic, version, ndim = _TENSOR_HEADER.unpack_from(raw)
    if magic != TENSOR_MAGIC or version != 1:
        raise FormatError(f"synth: {path} is not a tensor file")
    shape = struct.unpack_from(f"<{ndim}I", raw, _TENSOR_HEADER.size)
    offset = _TENSOR_HEADER.size + 4 * ndim
    if len(raw) - offset != 4 * int(np.prod(shape)):
        raise FormatError(f"synth: {path} payload size does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(shape).astype(np.float64)


_MODALITY_FILES = {"audio": "audio.bin", "video": "video.bin", "text": "text.bin"}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(dataset: MultimodalDataset, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name, fname in _MODALITY_FILES.items():
        write_tensor(out / fname, dataset.modality(name))
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label"])
        w.writerows((i, int(y)) for i, y in enumerate(dataset.labels))
    _write_latents(out / "latents.csv", dataset)
    files = sorted(list(_MODALITY_FILES.values()) + ["labels.csv", "latents.csv"])
    manifest = {
        "config": asdict(dataset.config) if dataset.config else None,
        "n": len(dataset),
        "checksums": {f: _sha256(out / f) for f in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _write_latents(path, ds: MultimodalDataset) -> None:
    lat = ds.latents
    t_len = ds.audio.shape[1]
    static = [("z_avt", lat["z_avt"]), ("z_te", lat["z_te"])]
    temporal = [("z_av", lat["z_av"]), ("z_a", lat["z_a"]), ("z_v", lat["z_v"])]
    header = ["sample_id", "t"]
    for name, arr in static + temporal:
        header += [f"{name}_{k}" for k in range(arr.shape[-1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            for t in range(t_len):
                row = [i, t]
                for _, arr in static:
                    row += [f"{v:.6g}" for v in arr[i]]
                for _, arr in temporal:
                    row += [f"{v:.6g}" for v in arr[i, t]]
                w.writerow(row)


def _read_latents(path, n: int, t_len: int) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in r] for r in reader])
    if rows.shape[0] != n * t_len:
        raise FormatError(f"synth: {path} has {rows.shape[0]} rows, expected {n * t_len}")
    names = {}
    for col, h in enumerate(header[2:], start=2):
        names.setdefault(h.rsplit("_", 1)[0], []).append(col)
    out = {}
    for name, cols in names.items():
        block = rows[:, cols].reshape(n, t_len, len(cols))
        out[name] = block[:, 0] if name in ("z_avt", "z_te") else block
    return out


def load_dataset(directory, verify: bool = True) -> MultimodalDataset:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"synth: {d} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if verify:
        for fname, digest in manifest["checksums"].items():
            if _sha256(d / fname) != digest:
                raise FormatError(f"synth: checksum mismatch for {fname}")
    audio = read_tensor(d / "audio.bin")
    video = read_tensor(d / "video.bin")
    text = read_tensor(d / "text.bin")
    with open(d / "labels.csv", newline="") as fh:
        labels = np.array([int(r["label"]) for r in csv.DictReader(fh)])
    latents = _read_latents(d / "latents.csv", len(labels), audio.shape[1])
    cfg = SynthConfig(**manifest["config"]) if manifest.get("config") else None
    return MultimodalDataset(audio, video, text, labels, latents, cfg)
