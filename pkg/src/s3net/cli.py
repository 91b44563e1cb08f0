"""Command-line entry point: ``s3net {make-fixtures,train,relight,eval,wavelet}``.

Exit codes: 0 ok, 1 internal error, 2 bad config, 3 data error, 4 shape error.
"""
import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import __version__
from .checkpoint import load_archive, load_model
from .data import load_depth, load_image, save_image, scan_dataset
from .errors import ConfigError, DataError, ShapeError
from .fixtures import make_fixtures
from .inference import relight
from .losses import VGG19Extractor, default_extractor
from .metrics import evaluate_dir
from .model import PRESETS, ModelConfig
from .train import TrainConfig, fit
from .wavelet import SUBBANDS, dwt_pyramid, reconstruct

log = logging.getLogger("s3net")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_SHAPE = 0, 1, 2, 3, 4


class Manifest:
    def __init__(self, command, params, seed=None):
        params = {k: v for k, v in params.items() if k != "func"}
        self.record = {
            "command": command,
            "config_hash": hashlib.sha256(
                json.dumps(params, sort_keys=True, default=str).encode()
            ).hexdigest(),
            "params": params,
            "seed": seed,
            "inputs": [],
            "outputs": [],
            "version": __version__,
        }
        self._t0 = time.time()
        self.record["timing"] = {"started": self._t0}

    def write(self, path, **extra):
        t1 = time.time()
        self.record["timing"].update(finished=t1, wall_seconds=t1 - self._t0)
        self.record.update(extra)
        self.record["inputs"] = [str(p) for p in self.record["inputs"]]
        self.record["outputs"] = [str(p) for p in self.record["outputs"]]
        with open(path, "w") as f:
            f.write(json.dumps(self.record, default=str) + "\n")


def load_run_config(path):
    try:
        with open(path) as f:
            doc = yaml.safe_load(f) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping with 'model' and/or 'train' sections")
    unknown = set(doc) - {"preset", "model", "train"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    preset = doc.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    model_over = doc.get("model") or {}
    unknown = set(model_over) - set(ModelConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    try:
        model_cfg = PRESETS[preset](**model_over)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    train_cfg = TrainConfig.from_dict(doc.get("train") or {})
    return model_cfg, train_cfg


def cmd_make_fixtures(args):
    out = Path(args.out_dir)
    m = Manifest("make-fixtures", vars(args), seed=args.seed)
    try:
        written = make_fixtures(out, args.scenes, args.settings, args.size, args.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    m.record["outputs"] = written
    m.write(out / "manifest.json")
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


def cmd_train(args):
    model_cfg, train_cfg = load_run_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    index = scan_dataset(args.data_root)
    out = Path(args.out_dir)
    m = Manifest(
        "train",
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
        seed=train_cfg.seed,
    )
    m.record["inputs"] = [args.config, args.data_root]
    state = fit(train_cfg, index, out, model_cfg=model_cfg, resume=args.resume)
    m.record["outputs"] = sorted(p for p in out.glob("*") if p.name != "manifest.json")
    final = state.history[-1] if state.history else None
    m.write(out / "manifest.json", final=final, missing_pairs=[list(x) for x in index.missing])
    if final:
        print(json.dumps(final))
    return EXIT_OK


def cmd_relight(args):
    model = load_model(args.checkpoint)
    src, guide = load_image(args.src), load_image(args.guide)
    src_d, guide_d = load_depth(args.src_depth), load_depth(args.guide_depth)
    m = Manifest("relight", vars(args))
    m.record["inputs"] = [args.checkpoint, args.src, args.src_depth, args.guide, args.guide_depth]
    t0 = time.perf_counter()
    out = relight(model, src, src_d, guide, guide_d)
    elapsed = time.perf_counter() - t0
    out_path = Path(args.out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, out_path)
    m.record["outputs"] = [out_path]
    m.write(out_path.with_name(out_path.name + ".manifest.json"), relight_seconds=elapsed)
    print(f"wrote {out_path} ({elapsed:.3f}s)")
    return EXIT_OK


def _eval_extractor(args):
    if args.extractor:
        payload = load_archive(args.extractor, kind="extractor")
        return VGG19Extractor(payload["params"])
    return default_extractor(args.extractor_seed)


def cmd_eval(args):
    extractor = _eval_extractor(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = Manifest("eval", vars(args))
    m.record["inputs"] = [*args.pred_dirs, args.gt]
    summary = []
    print(f"{'label':<24}{'n':>5}{'psnr':>10}{'ssim':>9}{'dist':>9}{'mps':>9}")
    for pred_dir in args.pred_dirs:
        label = Path(pred_dir).name
        report = evaluate_dir(pred_dir, args.gt, extractor)
        for w in report.warnings:
            log.warning("%s: %s", label, w)
        csv_path, json_path = out / f"{label}.csv", out / f"{label}.json"
        report.write_csv(csv_path)
        report.write_json(json_path, label=label)
        m.record["outputs"] += [csv_path, json_path]
        agg = report.aggregate()
        summary.append({"label": label, "count": len(report.rows), "aggregate": report.to_json()["aggregate"]})
        if agg is None:
            print(f"{label:<24}{0:>5}  (no overlapping images)")
        else:
            print(f"{label:<24}{len(report.rows):>5}{agg['psnr']:>10.4f}{agg['ssim']:>9.4f}"
                  f"{agg['perceptual_distance']:>9.4f}{agg['mps']:>9.4f}")
    m.write(out / "manifest.json", summary=summary)
    return EXIT_OK


def _read_any(path):
    try:
        img = Image.open(path)
        img.load()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img).astype(np.float32)[None] / 65535.0
    elif img.mode == "L":
        arr = np.asarray(img, dtype=np.float32)[None] / 255.0
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr))


def cmd_wavelet(args):
    x = _read_any(args.image).double()
    pyr = dwt_pyramid(x, args.levels)
    err = (reconstruct(pyr) - x).abs().max().item()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = Manifest("wavelet", vars(args))
    m.record["inputs"] = [args.image]
    for i in range(1, args.levels + 1):
        for name, band in pyr.level(i).items():
            if name == "ll":
                vis = band / 2 ** i
            else:
                # zero maps to mid-gray
                vis = 0.5 + band / 2 ** (i + 1)
            p = out / f"level{i}_{name}.png"
            save_image(vis.float(), p)
            m.record["outputs"].append(p)
    m.write(out / "manifest.json", reconstruction_error=err, subbands=list(SUBBANDS))
    print(f"reconstruction error {err:.3e}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="s3net", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("make-fixtures", help="write a synthetic scene tree")
    f.add_argument("out_dir")
    f.add_argument("--scenes", type=int, default=2)
    f.add_argument("--settings", type=int, default=4)
    f.add_argument("--size", type=int, default=64)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_make_fixtures)

    t = sub.add_parser("train", help="train on a dataset tree")
    t.add_argument("--config", required=True, help="YAML/JSON with 'preset', 'model', 'train' sections")
    t.add_argument("--data-root", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", help="training checkpoint to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("relight", help="relight one image to a guide's illumination")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--src", required=True)
    r.add_argument("--src-depth", required=True)
    r.add_argument("--guide", required=True)
    r.add_argument("--guide-depth", required=True)
    r.add_argument("--out", dest="out_path", required=True)
    r.set_defaults(func=cmd_relight)

    e = sub.add_parser("eval", help="score prediction dirs against ground truth")
    e.add_argument("pred_dirs", nargs="+")
    e.add_argument("--gt", required=True)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--extractor", help="extractor checkpoint (VGG19 weights)")
    e.add_argument("--extractor-seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("wavelet", help="dump Haar subbands of an image")
    w.add_argument("image")
    w.add_argument("--levels", type=int, default=2)
    w.add_argument("--out-dir", required=True)
    w.set_defaults(func=cmd_wavelet)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ShapeError as e:
        print(f"shape error: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
