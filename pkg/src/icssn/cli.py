"""Command-line entry point: ``icssn <command>`` or ``python -m icssn <command>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, dump_toml, load_config, load_toml, synth_config_from_dict
from .data import (DatasetManifest, generate_synthetic_dataset, load_dataset, load_image,
                   prepare_splits, save_dataset, split_dataset)

log = logging.getLogger("icssn")


def _config(path):
    return load_config(path) if path else Config().validate()


def _splits(data_dir, cfg):
    samples, manifest = load_dataset(data_dir)
    if manifest is None:
        manifest = split_dataset(list(samples.values()), cfg.data.split_ratios, cfg.training.seed)
    ops = cfg.data.augment_ops
    return prepare_splits(samples, manifest, equalize=cfg.data.equalize, augment_ops=ops)


def _dump(obj, out):
    text = json.dumps(obj, indent=2, default=float)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _load_net(path, branch=None):
    from .training import Checkpoint, build_networks, load_named_arrays

    ckpt = Checkpoint.load(path)
    meta = ckpt.metadata
    if "config" not in meta:
        raise SystemExit(f"{path}: checkpoint carries no config; use a final branch checkpoint")
    cfg = Config.from_dict(meta["config"])
    branch = branch or meta.get("branch")
    cls_net, seg_net = build_networks(cfg)
    net = cls_net if branch == "classification" else seg_net
    load_named_arrays(net, ckpt.params)
    return net.eval(), cfg, branch


# --- commands --------------------------------------------------------------------

def cmd_config(args):
    text = dump_toml(Config())
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)


def cmd_synth(args):
    raw = load_toml(args.config) if args.config else {}
    sections = set(Config().to_dict())
    if raw and not set(raw) <= sections | {"synth"}:
        raw = {"synth": raw}        # a bare synth table
    scfg = synth_config_from_dict(raw.get("synth", {}))
    cfg = Config.from_dict({k: v for k, v in raw.items() if k != "synth"})
    samples = generate_synthetic_dataset(scfg, seed=args.seed)
    manifest = split_dataset(samples, cfg.data.split_ratios, seed=args.seed)
    save_dataset(samples, args.out, manifest)
    print(json.dumps({"out": str(args.out), "samples": len(samples), "counts": manifest.counts}))


def cmd_preprocess(args):
    cfg = _config(args.config)
    splits = _splits(args.input, cfg)
    manifest = DatasetManifest(
        [s.id for s in splits.train], [s.id for s in splits.val], [s.id for s in splits.test],
        cfg.training.seed,
        {name: len(part) for name, part in vars(splits).items()},
        preprocessed=True,
    )
    save_dataset(splits.train + splits.val + splits.test, args.out, manifest)
    print(json.dumps({"out": str(args.out), **manifest.counts}))


def cmd_train(args):
    from .training import run_iterative_training

    cfg = _config(args.config)
    if args.seed is not None:
        cfg.training.seed = args.seed
    splits = _splits(args.data, cfg)
    caps = {k: v for k, v in (("classification", args.epochs_classification),
                              ("segmentation", args.epochs_segmentation),
                              ("warmup", args.epochs_warmup)) if v is not None}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_toml(cfg))
    result = run_iterative_training(splits, cfg, out_dir=out, rounds=args.rounds,
                                    resume=args.resume, epoch_caps=caps)
    print(json.dumps({"rounds": result.round_log[-1]["round"], "out": str(out)}))


def cmd_evaluate(args):
    from .training import evaluate_classification, evaluate_segmentation

    branch = "classification" if args.task == "classify" else "segmentation"
    net, cfg, _ = _load_net(args.checkpoint, branch)
    samples = getattr(_splits(args.data, cfg), args.split)
    if branch == "classification":
        report = evaluate_classification(net, samples, cfg)
    else:
        report = evaluate_segmentation(net, samples, cfg)
    report = {"task": args.task, "split": args.split, "n": len(samples), **report}
    _dump(report, args.out)


def cmd_report(args):
    from .complexity import complexity_report

    out = {}
    if args.run:
        rounds = json.loads((Path(args.run) / "rounds.json").read_text())
        rows = []
        for e in rounds:
            if e["branch"] == "transfer":
                continue
            rows.append({"round": e["round"], "branch": e["branch"], "phase": e["phase"],
                         "epochs": e.get("epochs_run"), "best_val_loss": e.get("best_val_loss"),
                         **{f"test_{k}": v for k, v in e.get("test_metrics", {}).items()
                            if isinstance(v, (int, float))}})
        out["rounds"] = rows
    if args.complexity:
        out["complexity"] = complexity_report(_config(args.config), size=args.size)
    _dump(out, args.out)


def cmd_cam(args):
    from .data import equalize_histogram
    from .explain import grad_cam, save_heatmap

    net, cfg, branch = _load_net(args.checkpoint, args.branch)
    image = load_image(args.image)
    if cfg.data.equalize:
        image = equalize_histogram(image)
    mask = np.asarray(load_image(args.mask))[..., 0] > 0 if args.mask else None
    heat = grad_cam(net, image, target=args.target, mask=mask)
    if heat.flagged:
        log.warning("zero gradient for target %s; heatmap is all zeros", heat.target)
    out, raw = save_heatmap(heat, image, args.out)
    print(json.dumps({"branch": branch, "target": heat.target, "flagged": heat.flagged,
                      "overlay": str(out), "raw": str(raw)}))


def build_parser():
    p = argparse.ArgumentParser(prog="icssn", description="Landslide classification and segmentation with a shared encoder.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", help="print the default configuration as TOML")
    c.add_argument("--out", type=Path)
    c.set_defaults(func=cmd_config)

    c = sub.add_parser("synth", help="generate a synthetic landslide dataset")
    c.add_argument("--config", type=Path, help="TOML with an optional [synth] table")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", type=Path, required=True)
    c.set_defaults(func=cmd_synth)

    c = sub.add_parser("preprocess", help="equalize and augment a dataset once, on disk")
    c.add_argument("--in", dest="input", type=Path, required=True)
    c.add_argument("--out", type=Path, required=True)
    c.add_argument("--config", type=Path)
    c.set_defaults(func=cmd_preprocess)

    c = sub.add_parser("train", help="run the alternating training schedule")
    c.add_argument("--config", type=Path)
    c.add_argument("--data", type=Path, required=True)
    c.add_argument("--out", type=Path, required=True)
    c.add_argument("--rounds", type=int, help="override training.max_rounds")
    c.add_argument("--seed", type=int)
    c.add_argument("--resume", type=Path, help="a checkpoints/state_r*_*.pt file")
    c.add_argument("--epochs-classification", type=int)
    c.add_argument("--epochs-segmentation", type=int)
    c.add_argument("--epochs-warmup", type=int)
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("evaluate", help="score a trained branch on one split")
    c.add_argument("--task", choices=("classify", "segment"), required=True)
    c.add_argument("--checkpoint", type=Path, required=True)
    c.add_argument("--data", type=Path, required=True)
    c.add_argument("--split", choices=("train", "val", "test"), default="test")
    c.add_argument("--out", type=Path)
    c.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("report", help="summarize a run and/or model complexity")
    c.add_argument("--run", type=Path, help="training output directory")
    c.add_argument("--complexity", action="store_true")
    c.add_argument("--config", type=Path)
    c.add_argument("--size", type=int, default=512)
    c.add_argument("--out", type=Path)
    c.set_defaults(func=cmd_report)

    c = sub.add_parser("cam", help="Grad-CAM heatmap for one image")
    c.add_argument("--checkpoint", type=Path, required=True)
    c.add_argument("--image", type=Path, required=True)
    c.add_argument("--out", type=Path, required=True)
    c.add_argument("--branch", choices=("classification", "segmentation"))
    c.add_argument("--target", type=int, help="joint class index for the classification branch")
    c.add_argument("--mask", type=Path, help="ground-truth mask for the segmentation branch")
    c.set_defaults(func=cmd_cam)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (FileNotFoundError, ValueError) as err:
        print(f"icssn {args.command}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
