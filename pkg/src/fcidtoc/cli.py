"""``fcidtoc`` command line: gen, train, toc, quantize, eval.

Every command takes an optional flat JSON ``--config`` file whose keys are
the command's long option names with dashes replaced by underscores; flags
given on the command line win over the file. Unknown keys are rejected.
Each run writes ``config.json`` (the fully resolved parameters) next to its
outputs. ``FCIDTOC_OUTPUT_DIR`` supplies the output directory when neither
``--out`` nor the config file does.

Exit codes: 0 success, 2 invalid input, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import codebook as cbk
from . import evaluation as ev
from .errors import FcidTocError, NonFiniteError, ValidationError
from .model import MODALITIES, FcidModel, TrainConfig, encode_coarse, load_checkpoint, save_checkpoint, train
from .quantizer import nearest_codes, write_assignments_csv
from .synth import SynthConfig, generate, load_dataset, read_tensor, save_dataset, split

ENV_OUT = "FCIDTOC_OUTPUT_DIR"
SPLIT = (0.8, 0.1, 0.1)
EVAL_KINDS = ("cmg", "retrieval", "activation", "maskrecon", "probes")

log = logging.getLogger("fcidtoc")


def _bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# command -> {key: default}; None marks a required path-like key
_COMMON = {"out": "", "threads": 1}
COMMAND_KEYS = {
    "gen": {**{f.name: f.default for f in fields(SynthConfig)}},
    "train": {"data": None, "split_seed": 0, "plots": False,
              **{f.name: f.default for f in fields(TrainConfig)}},
    "toc": {"codebook": None, "lambda": 0.3, "q": 0, "variance_on": "normalized"},
    "quantize": {"checkpoint": "", "data": "", "modality": "audio", "codebook": "", "features": "",
                 "mask": "", "masked_distance": False},
    "eval": {"checkpoint": "", "data": None, "mask": "", "masked_distance": False, "split_seed": 0,
             "pool": 200, "ks": "1,5,10", "n_random": 100, "ae_epochs": 30, "seed": 0, "lambda": 0.3,
             "probe_modality": "audio", "plots": False},
}


def _add_keys(parser: argparse.ArgumentParser, keys: dict) -> None:
    for key, default in {**keys, **_COMMON}.items():
        flag = "--" + key.replace("_", "-")
        kind = str if default is None else type(default)
        parser.add_argument(flag, dest=key, default=None, type=_bool if kind is bool else kind)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcidtoc", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMAND_KEYS.items():
        p = sub.add_parser(name)
        if name == "eval":
            p.add_argument("kind", choices=EVAL_KINDS)
        p.add_argument("--config", default=None, help="flat JSON file of parameters")
        _add_keys(p, keys)
    return parser


def _coerce(key: str, value, default):
    kind = str if default is None else type(default)
    if isinstance(value, (dict, list)) or value is None:
        raise ValidationError(f"cli: config key {key} must be a scalar")
    if kind is bool:
        if not isinstance(value, bool):
            raise ValidationError(f"cli: config key {key} must be true or false")
        return value
    if kind is int and not (isinstance(value, int) and not isinstance(value, bool)):
        raise ValidationError(f"cli: config key {key} must be an integer")
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ValidationError(f"cli: config key {key} must be a number")
    if kind is str and not isinstance(value, str):
        raise ValidationError(f"cli: config key {key} must be a string")
    return kind(value)


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    keys = {**COMMAND_KEYS[command], **_COMMON}
    params = dict(keys)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ValidationError(f"cli: config file {args.config} not found") from None
        except ValueError as exc:
            raise ValidationError(f"cli: config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ValidationError("cli: config file must hold a flat JSON object")
        unknown = sorted(set(loaded) - set(keys))
        if unknown:
            raise ValidationError(f"cli: unknown config key(s) for {command}: {', '.join(unknown)}")
        for k, v in loaded.items():
            params[k] = _coerce(k, v, keys[k])
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            params[k] = v
    missing = [k for k, v in params.items() if v is None]
    if missing:
        raise ValidationError(f"cli: {command} needs --{missing[0].replace('_', '-')}")
    if not params["out"]:
        params["out"] = os.environ.get(ENV_OUT) or f"runs/{command}"
    if params["threads"] < 1:
        raise ValidationError("cli: --threads must be >= 1")
    return params


def _outdir(params: dict, command: str, extra: dict | None = None) -> Path:
    out = Path(params["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo = {"command": command, **(extra or {}), **params}
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    return out


def _pick(params: dict, cls) -> dict:
    return {f.name: params[f.name] for f in fields(cls)}


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not path or not p.exists():
        raise ValidationError(f"cli: {what} {path!r} not found")
    return p


def _load_mask(params: dict):
    return cbk.load_mask(_require_file(params["mask"], "mask file")) if params["mask"] else None


# ---------------------------------------------------------------------------


def cmd_gen(params: dict) -> None:
    cfg = SynthConfig(**_pick(params, SynthConfig))
    out = _outdir(params, "gen")
    save_dataset(generate(cfg), out)


def cmd_train(params: dict) -> None:
    cfg = TrainConfig(**_pick(params, TrainConfig))
    ds = load_dataset(_require_file(params["data"], "dataset directory"))
    tr, _, _ = split(ds, SPLIT, params["split_seed"])
    out = _outdir(params, "train")
    model = FcidModel(ds.audio.shape[-1], ds.video.shape[-1], ds.text.shape[-1], cfg)
    history = train(model, tr)
    save_checkpoint(out / "model.tocm", model)
    cbk.save_codebook(out / "codebook.tocb", model.codebook)
    ev.write_losses_csv(out / "losses.csv", history)
    if params["plots"]:
        ev.plot_losses(history, out / "losses.svg")


def cmd_toc(params: dict) -> None:
    cb = cbk.load_codebook(_require_file(params["codebook"], "codebook"))
    q = params["q"] or cbk.default_q(cb.D)
    scores = cbk.toc_scores(cb, params["lambda"], params["variance_on"])
    mask = cbk.select_dims(scores, q)
    out = _outdir(params, "toc", {"q_resolved": q})
    cbk.write_scores_csv(out / "scores.csv", scores)
    cbk.save_mask(out / "mask.json", mask)
    ev.write_similarity_csvs(out, ev.similarity_report(cb, mask))


def cmd_quantize(params: dict) -> None:
    mask = _load_mask(params)
    weights = torch.from_numpy(mask.as_float()) if mask is not None and params["masked_distance"] else None
    if params["checkpoint"]:
        model = load_checkpoint(_require_file(params["checkpoint"], "checkpoint"))
        ds = load_dataset(_require_file(params["data"], "dataset directory"))
        if params["modality"] not in MODALITIES:
            raise ValidationError(f"cli: unknown modality {params['modality']!r}")
        feats = encode_coarse(ds.modality(params["modality"]), params["modality"], model)[:, None, :]
        codes = model.codes_tensor()
    elif params["codebook"]:
        cb = cbk.load_codebook(_require_file(params["codebook"], "codebook"))
        arr = read_tensor(_require_file(params["features"], "features file"))
        if arr.ndim == 2:
            arr = arr[:, None, :]
        if arr.ndim != 3 or arr.shape[-1] != cb.D:
            raise ValidationError(f"cli: features of shape {arr.shape} do not match codebook D={cb.D}")
        feats = torch.from_numpy(arr)
        codes = torch.from_numpy(np.array(cb.codes))
    else:
        raise ValidationError("cli: quantize needs --checkpoint and --data, or --codebook and --features")
    if mask is not None and mask.d != codes.shape[1]:
        raise ValidationError(f"cli: mask length {mask.d} != D={codes.shape[1]}")
    n, t_len, d = feats.shape
    idx, dist = nearest_codes(feats.reshape(-1, d), codes, weights)
    out = _outdir(params, "quantize")
    rows = ((i // t_len, i % t_len, k, s) for i, (k, s) in enumerate(zip(idx.tolist(), dist.tolist())))
    write_assignments_csv(out / "assignments.csv", rows)


def cmd_eval(kind: str, params: dict) -> None:
    ds = load_dataset(_require_file(params["data"], "dataset directory"))
    if kind == "maskrecon":
        out = _outdir(params, "eval", {"kind": kind})
        frames = ds.audio.reshape(-1, ds.audio.shape[-1])
        ae = ev.VQAutoencoder(epochs=params["ae_epochs"], seed=params["seed"]).fit(frames)
        rows = ev.masked_recon_sweep(ae, frames, n_random=params["n_random"], seed=params["seed"],
                                     lam=params["lambda"])
        ev.write_sweep_csv(out / "maskrecon.csv", rows)
        if params["plots"]:
            ev.plot_sweep(rows, out / "maskrecon.svg")
        return
    tr, _, te = split(ds, SPLIT, params["split_seed"])
    model = load_checkpoint(_require_file(params["checkpoint"], "checkpoint"))
    mask = _load_mask(params)
    out = _outdir(params, "eval", {"kind": kind})
    if kind == "cmg":
        pairs = [(m, m) for m in MODALITIES] + list(ev.CROSS_PAIRS)
        results = ev.cmg_all(model, tr, te, mask, pairs=pairs, masked_distance=params["masked_distance"])
        ev.write_cmg_csv(out / "cmg.csv", results)
    elif kind == "retrieval":
        try:
            ks = [int(k) for k in str(params["ks"]).split(",")]
        except ValueError:
            raise ValidationError(f"cli: --ks must be comma-separated integers, got {params['ks']!r}") from None
        rows = [(a, b, ev.retrieval_eval(model, te, (a, b), ks, params["pool"]))
                for a, b in (("audio", "video"), ("audio", "text"), ("video", "text"))]
        ev.write_retrieval_csv(out / "retrieval.csv", rows)
    elif kind == "activation":
        stats = ev.activation_stats(model, ds)
        ev.write_activation_csv(out / "activation.csv", stats)
        if params["plots"]:
            ev.plot_activation(stats, out / "activation.svg")
    elif kind == "probes":
        ev.write_probes_csv(out / "probes.csv", ev.probe_disentanglement(model, tr, te, params["probe_modality"]))


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        params = resolve(args.command, args)
        torch.set_num_threads(params["threads"])
        if args.command == "eval":
            cmd_eval(args.kind, params)
        else:
            {"gen": cmd_gen, "train": cmd_train, "toc": cmd_toc, "quantize": cmd_quantize}[args.command](params)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteError, FcidTocError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
