"""Command line entry point: ``unibev {synth,train,eval,ft,sweep-res}``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 incompatible
checkpoint or config. Relative output directories resolve against
``$UNIBEV_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ROI_CHOICES, ExperimentConfig, parse_override
from .dataset import DatasetError, DirectoryDataset, dataset_checksum, write_dataset
from .evaluation import evaluate
from .ft import TABLE5_SCALES, failure_test, sweep_resolution, write_sweep_csv
from .model import ModelConfig, UniBEVFusion, collate
from .pipeline import CheckpointMismatch, Trainer, load_checkpoint, predict, set_deterministic
from .rdl import ConfigError
from .synth import generate_frames

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_USAGE", "EXIT_DATA", "EXIT_INCOMPATIBLE"]

log = logging.getLogger("unibev")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INCOMPATIBLE = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "UNIBEV_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def output_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- config


def _experiment(args, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else None
    base = cfg.to_dict() if cfg else {}
    if args.seed is not None:
        base["seed"] = args.seed
    if getattr(args, "preset", None):
        base["preset"] = args.preset
    if "seed" not in base or base["seed"] is None:
        raise ConfigError("seed: pass --seed or set it in the config file")
    exp = ExperimentConfig.from_dict(base)
    dotted = dict(parse_override(s) for s in (args.set or []))
    dotted.update(overrides)
    return exp.override(**dotted)


def _load_frames(path) -> tuple[list, DirectoryDataset]:
    if path is None:
        raise UsageError("--data is required")
    ds = DirectoryDataset(path)
    frames = list(ds)
    if not frames:
        raise DatasetError("-", "manifest", f"dataset {path} holds no frames")
    return frames, ds


def _dataset_classes(ds: DirectoryDataset) -> tuple[str, ...] | None:
    scene = ds.manifest.get("scene_config")
    if not scene:
        return None
    return tuple(c["name"] for c in scene["classes"])


def _check_compatible(model_cfg: ModelConfig, frames, ds: DirectoryDataset) -> None:
    schema = frames[0].radar.schema.name
    if schema != model_cfg.schema:
        raise CheckpointMismatch(f"model expects radar schema {model_cfg.schema!r}, dataset has {schema!r}")
    names = _dataset_classes(ds)
    if names is not None and tuple(names) != tuple(model_cfg.anchors.class_names):
        raise CheckpointMismatch(f"model classes {model_cfg.anchors.class_names} differ from "
                                 f"dataset classes {names}")
    for f in frames:
        h, w = f.camera.image_size
        if h % model_cfg.stride or w % model_cfg.stride:
            raise CheckpointMismatch(f"frame {f.frame_id}: image {h}x{w} is not divisible by the "
                                     f"encoder stride {model_cfg.stride}")


def _schema_overrides(frames) -> dict:
    """Follow the dataset's radar schema (the vod/tj4d presets pin their own)."""
    return {"data.schema": frames[0].radar.schema.name}


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    exp = _experiment(args, **{"data.frames": args.frames, "data.schema": args.schema})
    scene = exp.scene_config()
    frames = generate_frames(scene, exp.values["data"]["frames"], start=args.start)
    out = output_dir(args.out)
    write_dataset(frames, out, scene, extra={"config_hash": exp.hash})
    summary = {
        "frames": len(frames), "schema": scene.schema,
        "radar_extras": list(scene.radar_schema.channel_names),
        "objects": int(sum(len(f.gt) for f in frames)),
        "radar_points": int(sum(len(f.radar) for f in frames)),
        "checksum": dataset_checksum(out), "config_hash": exp.hash,
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    frames, ds = _load_frames(args.data)
    over = _schema_overrides(frames)
    over.update({"train.steps": args.steps, "train.batch_size": args.batch_size, "train.lr": args.lr})
    if args.no_deterministic:
        over["train.deterministic"] = False
    if args.ablate_rdl:
        over["model.rdl_ablation"] = "all"
    exp = _experiment(args, **over)
    model_cfg = exp.model_config()
    _check_compatible(model_cfg, frames, ds)
    trainer = Trainer(model_cfg, exp.train_config(), frames)
    out = output_dir(args.out)
    ckpt = out / "checkpoint.pt"
    if args.resume:
        if not Path(args.resume).exists():
            raise DatasetError("-", "checkpoint", f"missing checkpoint {args.resume}")
        trainer.resume(args.resume)
    elif (out / "loss.csv").exists():
        (out / "loss.csv").unlink()
    rows = trainer.run(loss_csv=out / "loss.csv", log_every=args.log_every,
                       extra_columns={"config_hash": trainer.hash})
    trainer.save(ckpt)
    exp.dump(out / "config.yaml")
    info = {"config_hash": trainer.hash, "experiment_hash": exp.hash, "steps": trainer.step,
            "final_loss": rows[-1]["total"] if rows else None, "frames": len(frames)}
    _write_json(out / "train.json", info)
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def _load_for_eval(args):
    frames, ds = _load_frames(args.data)
    if not Path(args.checkpoint).exists():
        raise DatasetError("-", "checkpoint", f"missing checkpoint {args.checkpoint}")
    try:
        model, ckpt = load_checkpoint(args.checkpoint)
    except (KeyError, RuntimeError, ValueError) as e:
        raise CheckpointMismatch(f"cannot load checkpoint {args.checkpoint}: {e}") from None
    _check_compatible(model.cfg, frames, ds)
    exp = _experiment(args, **_schema_overrides(frames), **{"eval.roi": args.roi})
    if args.preset or args.config:
        # an explicitly requested architecture must be the one the checkpoint holds;
        # reduction order and the RDL ablation switch do not change the weights' layout
        free = ("splat_mode", "rdl_ablation")
        want = {k: v for k, v in exp.model_config().to_dict().items() if k not in free}
        have = {k: v for k, v in ckpt["model_config"].items() if k not in free}
        if want != have:
            diff = sorted(k for k in want if want[k] != have.get(k))
            raise CheckpointMismatch(f"checkpoint architecture differs from the config in {diff}")
    return frames, model, ckpt, exp


def _eval_configs(exp: ExperimentConfig, class_names) -> dict:
    ec = exp.eval_config(tuple(class_names))
    configs = {"all": ec.with_(roi=None)}
    if ec.roi is not None:
        configs["roi"] = ec
    return configs


def _predictor(model, frames, exp):
    e = exp.values["eval"]
    preps = [model.prepare(f, seed=exp.seed + i, with_targets=False) for i, f in enumerate(frames)]

    def run(fr, images=None):
        return predict(model, fr, images, score_thr=e["score_thr"], nms_iou=e["nms_iou"],
                       max_dets=e["max_dets"], preps=preps)

    return run, preps


def cmd_eval(args) -> int:
    set_deterministic(True)
    frames, model, ckpt, exp = _load_for_eval(args)
    run, preps = _predictor(model, frames, exp)
    dets = run(frames)
    gts, cams = [f.gt for f in frames], [f.camera for f in frames]
    metrics = {name: evaluate(dets, gts, ec, cams)
               for name, ec in _eval_configs(exp, model.cfg.anchors.class_names).items()}
    out = output_dir(args.out)
    result = {"config_hash": exp.hash, "checkpoint_config_hash": ckpt["config_hash"],
              "frames": len(frames), "metrics": metrics}
    _write_json(out / "metrics.json", result)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area", "class", "ap", "config_hash"])
        for area, m in metrics.items():
            for c, ap in m["ap"].items():
                w.writerow([area, c, ap, exp.hash])
            w.writerow([area, "mAP", m["map"], exp.hash])
    if args.debug:
        export_heatmaps(model, frames, preps, out / "debug", limit=args.debug_frames)
    print(json.dumps({k: m["map"] for k, m in metrics.items()}, sort_keys=True))
    return EXIT_OK


def cmd_ft(args) -> int:
    set_deterministic(True)
    frames, model, ckpt, exp = _load_for_eval(args)
    run, _ = _predictor(model, frames, exp)
    configs = _eval_configs(exp, model.cfg.anchors.class_names)
    report = failure_test(run, frames, tuple(args.rho), args.runs, args.sigma, exp.seed, configs)
    out = output_dir(args.out)
    report.to_json(out / "ft.json")
    doc = json.loads((out / "ft.json").read_text())
    doc.update(config_hash=exp.hash, checkpoint_config_hash=ckpt["config_hash"])
    _write_json(out / "ft.json", doc)
    report.to_csv(out / "ft.csv", extra_columns={"config_hash": exp.hash})
    for r in report.rows:
        print(json.dumps({"rho": r["rho"], **{k: v["mean"] for k, v in r["metrics"].items()}}))
    return EXIT_OK


def cmd_sweep_res(args) -> int:
    frames, ds = _load_frames(args.data)
    eval_frames = _load_frames(args.eval_data)[0] if args.eval_data else frames
    over = _schema_overrides(frames)
    over.update({"train.steps": args.steps, "train.batch_size": args.batch_size})
    if args.no_deterministic:
        over["train.deterministic"] = False
    exp = _experiment(args, **over)
    base_cfg = exp.model_config()
    _check_compatible(base_cfg, frames, ds)
    e = exp.values["eval"]

    def train_and_predict(tr, ev, rdl):
        cfg = ModelConfig.from_dict({**base_cfg.to_dict(), "rdl_ablation": "none" if rdl else "all"})
        trainer = Trainer(cfg, exp.train_config(), tr)
        trainer.run(log_every=0)
        trainer.model.eval()
        return predict(trainer.model, ev, score_thr=e["score_thr"], nms_iou=e["nms_iou"],
                       max_dets=e["max_dets"])

    names = base_cfg.anchors.class_names
    ec = exp.eval_config(tuple(names))
    rows = sweep_resolution(train_and_predict, frames, eval_frames, ec.with_(iou_mode="3d"),
                            ec.with_(iou_mode="bev"), tuple(args.scales), base_cfg.stride)
    out = output_dir(args.out)
    write_sweep_csv(rows, out / "sweep.csv", extra_columns={"config_hash": exp.hash})
    _write_json(out / "sweep.json", {"config_hash": exp.hash, "rows": rows})
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------- debug export


def _heatmap_png(values: np.ndarray, path: Path) -> None:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(np.nanmin(v)), float(np.nanmax(v))
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(path)


@torch.no_grad()
def export_heatmaps(model: UniBEVFusion, frames, preps, directory, limit: int = 4) -> list[Path]:
    """Expected-depth maps (camera view) and camera fusion weights (BEV) as grayscale PNGs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    model.eval()
    for f, p in list(zip(frames, preps))[:limit]:
        out = model(collate([f], [p]))
        prob = torch.softmax(out["depth_logits"][0], 0).numpy()
        depth = np.tensordot(model.cfg.bins.depths, prob, axes=(0, 0))
        path = directory / f"{f.frame_id}_depth.png"
        _heatmap_png(depth, path)
        written.append(path)
        if out["fusion_weights"] is not None:
            # BEV maps are stored (y, x); rotate so forward (+x) points up and +y (left) is left
            w = out["fusion_weights"][0, 0].numpy().T[::-1, ::-1]
            path = directory / f"{f.frame_id}_fusion_camera.png"
            _heatmap_png(w, path)
            written.append(path)
    return written


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unibev", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, preset=True):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="mandatory unless set in the config file")
        if preset:
            p.add_argument("--preset", choices=("vod", "tj4d", "toy"))
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. train.lr=5e-4 (repeatable)")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, preset=False)
    p.add_argument("--frames", type=int)
    p.add_argument("--schema", choices=("vod", "tj4d"))
    p.add_argument("--start", type=int, default=0, help="index of the first frame seed")
    p.set_defaults(func=cmd_synth)

    def training(p):
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--no-deterministic", action="store_true",
                       help="faster, non bit-reproducible reductions")

    p = sub.add_parser("train", help="train a model on a dataset directory")
    common(p)
    p.add_argument("--data", required=True)
    training(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--ablate-rdl", action="store_true", help="zero the radar depth channels")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    def evaluating(p):
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--roi", choices=list(ROI_CHOICES), default="none")

    p = sub.add_parser("eval", help="mAP of a checkpoint on a dataset")
    common(p)
    evaluating(p)
    p.add_argument("--debug", action="store_true", help="export depth / fusion-weight heatmaps")
    p.add_argument("--debug-frames", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ft", help="failure test: mAP under image noise")
    common(p)
    evaluating(p)
    p.add_argument("--rho", type=float, nargs="+", default=[0.0, 0.5, 0.7, 0.9])
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--sigma", type=float, default=0.1)
    p.set_defaults(func=cmd_ft)

    p = sub.add_parser("sweep-res", help="retrain with RDL off/on per image scale")
    common(p)
    p.add_argument("--data", required=True, help="training dataset")
    p.add_argument("--eval-data", help="evaluation dataset (defaults to --data)")
    training(p)
    p.add_argument("--scales", type=float, nargs="+", default=list(TABLE5_SCALES))
    p.set_defaults(func=cmd_sweep_res)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointMismatch as e:
        print(f"incompatible: {e}", file=sys.stderr)
        return EXIT_INCOMPATIBLE


if __name__ == "__main__":
    sys.exit(main())
