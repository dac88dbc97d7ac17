"""Command line entry point: ``toolseg synth | train | eval | infer``.

Every command resolves a run configuration from defaults, an optional YAML or
JSON ``--config`` file, and explicit flags (flags win), then writes that
configuration to ``run_config.json`` in its output directory before doing any
work.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from .losses import ADV_MODES, LossWeights
from .metrics import EvalReport, evaluate, format_table, predict_mask
from .serialization import FormatError, write_atomic
from .synthdata import (DatasetManifest, ErrorModel, SceneConfig, find_image_mask_pairs,
                        generate_dataset, load_image, load_mask, save_png)
from .trainer import CheckpointError, TrainConfig, load_segmenter, read_loss_log, train

log = logging.getLogger("toolseg")

RUN_CONFIG = "run_config.json"
REPORT = "report.json"
TABLE = "table.txt"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping at top level")
    return data


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _overrides(args, mapping: dict[str, tuple[str, ...]]) -> dict:
    """Nested dict of flags that were actually given, keyed by config path."""
    out: dict = {}
    for dest, path in mapping.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        node = out
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = list(value) if isinstance(value, tuple) else value
    return out


def resolve_config(args, defaults: dict, mapping: dict) -> dict:
    merged = _merge(defaults, _load_config_file(getattr(args, "config", None)))
    return _merge(merged, _overrides(args, mapping))


def _echo(out_dir: Path, run_config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_atomic(out_dir / RUN_CONFIG, (json.dumps(run_config, indent=2, sort_keys=True) + "\n").encode())


def _jsonable(obj) -> dict:
    return json.loads(json.dumps(asdict(obj)))


# ---------------------------------------------------------------- synth

SYNTH_FLAGS = {
    "n": ("n_samples",),
    "heldout": ("n_heldout",),
    "frames_per_sequence": ("frames_per_sequence",),
    "out": ("out",),
    "seed": ("scene", "rng_seed"),
    "size": ("scene", "image_size"),
    "sigma_translate": ("error_model", "sigma_translate"),
    "sigma_rotate": ("error_model", "sigma_rotate"),
    "sigma_scale": ("error_model", "sigma_scale"),
}


def cmd_synth(args) -> int:
    defaults = {"command": "synth", "n_samples": 200, "n_heldout": 0, "frames_per_sequence": 25,
                "out": None, "scene": _jsonable(SceneConfig()), "error_model": _jsonable(ErrorModel())}
    rc = resolve_config(args, defaults, SYNTH_FLAGS)
    if not rc["out"]:
        raise UsageError("synth needs --out")
    scene = SceneConfig.from_dict(rc["scene"])
    errors = ErrorModel(**rc["error_model"])
    out = Path(rc["out"])
    _echo(out, rc)
    manifest = generate_dataset(scene, errors, rc["n_samples"], out, rc["n_heldout"],
                                rc["frames_per_sequence"])
    counts = ", ".join(f"{k}={v}" for k, v in sorted(manifest.counts.items()))
    print(f"dataset {out}: {counts} ({scene.image_size[0]}x{scene.image_size[1]}, seed {scene.rng_seed})")
    print(f"manifest sha256 {manifest.digest()}")
    print(f"mean IoU(gt, noisy) {manifest.mean_noisy_iou():.4f}")
    return 0


# ---------------------------------------------------------------- train

TRAIN_FLAGS = {
    "data": ("data",),
    "out": ("out",),
    "resume": ("resume",),
    "epochs_fixed": ("train", "n_fixed_epochs"),
    "epochs_decay": ("train", "n_decay_epochs"),
    "lr": ("train", "base_lr"),
    "lambda_cyc": ("train", "weights", "lambda_cycle"),
    "mu_edge": ("train", "weights", "mu_edge"),
    "adv_mode": ("train", "weights", "adv_mode"),
    "seed": ("train", "seed"),
    "gen_width": ("train", "gen_width"),
    "disc_width": ("train", "disc_width"),
    "n_blocks": ("train", "n_residual_blocks"),
    "steps_per_epoch": ("train", "steps_per_epoch"),
    "buffer": ("train", "buffer_capacity"),
}


def cmd_train(args) -> int:
    defaults = {"command": "train", "data": None, "out": None, "resume": None,
                "train": TrainConfig().to_dict()}
    rc = resolve_config(args, defaults, TRAIN_FLAGS)
    if args.no_edge:
        rc["train"]["weights"]["mu_edge"] = 0.0
    if not rc["data"] or not rc["out"]:
        raise UsageError("train needs --data and --out")
    cfg = TrainConfig.from_dict(rc["train"])
    manifest = DatasetManifest.load(rc["data"])
    out = Path(rc["out"])
    _echo(out, rc)
    state, means = train(manifest, cfg, out, resume=rc["resume"])
    for k, mean in enumerate(means):
        print("epoch", state.epoch - len(means) + k + 1,
              " ".join(f"{name}={v:.4f}" for name, v in mean.as_dict().items()))
    print(f"finished epoch {state.epoch}/{state.config.n_epochs} at step {state.step}; "
          f"{len(read_loss_log(out / 'losses.csv'))} logged steps in {out}")
    return 0


# ---------------------------------------------------------------- eval

EVAL_FLAGS = {
    "data": ("data",),
    "split": ("split",),
    "images": ("images",),
    "masks": ("masks",),
    "out": ("out",),
    "threshold": ("threshold",),
    "tolerance": ("tolerance",),
}


def _checkpoint_names(specs: list[str]) -> dict[str, str]:
    named = {}
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        if name in named:
            name = f"{name}_{len(named)}"
        named[name] = path
    return named


def _eval_items(rc: dict) -> list:
    if rc.get("images"):
        if not rc.get("masks"):
            raise UsageError("--images needs --masks")
        pairs = find_image_mask_pairs(rc["images"], rc["masks"])
        return [(load_image(i), load_mask(m), seq) for i, m, seq in pairs]
    if not rc.get("data"):
        raise UsageError("eval needs --data or --images/--masks")
    manifest = DatasetManifest.load(rc["data"])
    samples = manifest.split(rc["split"])
    if not samples:
        raise UsageError(f"split {rc['split']!r} is empty in {rc['data']}")
    return [(load_image(manifest.path(s.image)), load_mask(manifest.path(s.mask_gt)), s.sequence)
            for s in samples]


def cmd_eval(args) -> int:
    defaults = {"command": "eval", "checkpoints": [], "data": None, "split": "test",
                "images": None, "masks": None, "out": None, "threshold": 0.0,
                "boundary_f1": False, "tolerance": 2.0}
    rc = resolve_config(args, defaults, EVAL_FLAGS)
    if args.checkpoint:
        rc["checkpoints"] = list(args.checkpoint)
    if args.boundary_f1:
        rc["boundary_f1"] = True
    if not rc["checkpoints"] or not rc["out"]:
        raise UsageError("eval needs at least one --checkpoint and --out")
    out = Path(rc["out"])
    _echo(out, rc)
    items = _eval_items(rc)
    tol = rc["tolerance"] if rc["boundary_f1"] else None
    reports: dict[str, EvalReport] = {}
    for name, path in _checkpoint_names(rc["checkpoints"]).items():
        reports[name] = evaluate(load_segmenter(path), items, rc["threshold"], tol)
    table = format_table(reports, "ji")
    lines = [table, ""]
    for name, r in reports.items():
        m = r.metrics
        extra = f" BF1@{tol:g}={r.boundary_f1:.4f}" if tol is not None else ""
        lines.append(f"{name}: OP={m['op']:.4f} PC={m['pc']:.4f} JI={m['ji']:.4f} "
                     f"IoU(tool)={m['fg_iou']:.4f}{extra} n={r.n_samples} skipped={r.n_skipped}")
    text = "\n".join(lines)
    body = {name: r.to_dict() for name, r in reports.items()}
    write_atomic(out / TABLE, (text + "\n").encode())
    write_atomic(out / REPORT, (json.dumps(body, indent=2, sort_keys=True) + "\n").encode())
    print(text)
    return 0


# ---------------------------------------------------------------- infer


def _overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    rgb = ((np.clip(image, -1, 1) + 1) * 127.5).astype(np.float64)
    tint = np.array([0.0, 255.0, 0.0])
    rgb[mask > 0] = (1 - alpha) * rgb[mask > 0] + alpha * tint
    return np.round(rgb).astype(np.uint8)


def cmd_infer(args) -> int:
    defaults = {"command": "infer", "checkpoint": None, "image": None, "out": None,
                "threshold": 0.0, "overlay": False}
    rc = resolve_config(args, defaults, {"checkpoint": ("checkpoint",), "image": ("image",),
                                         "out": ("out",), "threshold": ("threshold",)})
    if args.overlay:
        rc["overlay"] = True
    if not rc["checkpoint"] or not rc["image"] or not rc["out"]:
        raise UsageError("infer needs --checkpoint, --image and --out")
    image = load_image(rc["image"])
    h, w = image.shape[:2]
    if h % 4 or w % 4:
        raise UsageError(f"input dims {h}x{w} must be divisible by 4")
    net = load_segmenter(rc["checkpoint"])
    out = Path(rc["out"])
    _echo(out, rc)
    mask = predict_mask(net, image, rc["threshold"])
    stem = Path(rc["image"]).stem
    save_png(mask.astype(np.uint8) * 255, out / f"{stem}_mask.png")
    written = [out / f"{stem}_mask.png"]
    if rc["overlay"]:
        save_png(_overlay(image, mask), out / f"{stem}_overlay.png")
        written.append(out / f"{stem}_overlay.png")
    print(f"{h}x{w} tool fraction {mask.mean():.4f}; wrote " + ", ".join(str(p) for p in written))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a toy dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--n", type=int, help="training samples")
    p.add_argument("--heldout", type=int, help="held-out test samples")
    p.add_argument("--frames-per-sequence", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--sigma-translate", type=float)
    p.add_argument("--sigma-rotate", type=float)
    p.add_argument("--sigma-scale", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the translation networks")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--resume")
    p.add_argument("--epochs-fixed", type=int)
    p.add_argument("--epochs-decay", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-cyc", type=float)
    p.add_argument("--mu-edge", type=float)
    p.add_argument("--no-edge", action="store_true", help="set the edge weight to 0")
    p.add_argument("--adv-mode", choices=ADV_MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--gen-width", type=int)
    p.add_argument("--disc-width", type=int)
    p.add_argument("--n-blocks", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--buffer", type=int, help="replay buffer capacity")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints against clean masks")
    p.add_argument("--config")
    p.add_argument("--checkpoint", action="append", help="PATH or NAME=PATH; repeatable")
    p.add_argument("--data", help="dataset root with manifest.json")
    p.add_argument("--split")
    p.add_argument("--images", help="directory of images (instead of --data)")
    p.add_argument("--masks", help="directory of gt masks matching --images")
    p.add_argument("--out")
    p.add_argument("--threshold", type=float)
    p.add_argument("--boundary-f1", action="store_true")
    p.add_argument("--tolerance", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment a single image")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--out")
    p.add_argument("--threshold", type=float)
    p.add_argument("--overlay", action="store_true")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, TypeError, OSError, CheckpointError, FormatError) as exc:
        print(f"toolseg {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
