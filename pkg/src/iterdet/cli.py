"""Command-line interface: ``iterdet gen-data | train | eval | viz``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import iterative as it
from . import metrics as M
from . import nn
from . import report
from . import train as T
from .config import ConfigError, RunConfig, load_config
from .synthetic import (CROWDING_THRESHOLDS, DatasetError, generate_dataset, load_dataset,
                        read_image, save_dataset)
from .viz import render_svg

log = logging.getLogger("iterdet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODE_FLAGS = {"standard": "standard", "one-per-iter": "one_per_iteration"}


def parse_iterations(text: str) -> list[int]:
    """``"2"`` -> [2]; ``"1-3"`` -> [1, 2, 3]."""
    try:
        if "-" in text:
            lo, hi = (int(p) for p in text.split("-", 1))
        else:
            lo = hi = int(text)
    except ValueError:
        raise ConfigError(f"--iterations expects N or A-B, got {text!r}") from None
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad iteration range {text!r}")
    return list(range(lo, hi + 1))


def _crowding_table(name, stats) -> str:
    pairs = "  ".join(f"IoU>{t}: {stats['pairs_per_image'][str(t)]:.3f}"
                      for t in CROWDING_THRESHOLDS)
    return f"{name:<5}  images {stats['images']:5d}  objects/image {stats['objects_per_image']:.3f}  " \
           f"pairs/image  {pairs}"


def cmd_gen_data(args, cfg: RunConfig) -> int:
    cfg = cfg.override("scene", seed=args.seed)
    cfg = cfg.override("data", train_scenes=args.train_scenes, val_scenes=args.val_scenes,
                       jobs=args.jobs)
    out = Path(args.out)
    splits = {
        "train": (0, cfg.data.train_scenes),
        "val": (cfg.data.train_scenes, cfg.data.val_scenes),
    }
    for name, (start, n) in splits.items():
        samples = generate_dataset(cfg.scene, n, start=start, jobs=cfg.data.jobs)
        try:
            save_dataset(samples, out / name)
        except OSError as exc:
            raise DatasetError(f"cannot write dataset to {out / name}: {exc}") from exc
        stats = M.crowding_stats([s.boxes for s in samples])
        stats["images"] = len(samples)
        print(_crowding_table(name, stats))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _load_split(data_dir, split):
    root = Path(data_dir)
    if (root / split / "annotations.json").exists():
        root = root / split
    samples = load_dataset(root)
    if not samples:
        raise DatasetError(f"no images in {root}")
    return samples


def _write_loss_csv(path, losses):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for e, loss in enumerate(losses, 1):
            w.writerow([e, repr(loss)])


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json"
    losses: list[float] = []
    if args.resume:
        try:
            state, det_cfg, header = T.load_state(args.resume)
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        train_cfg = T.TrainConfig.from_dict(header.get("train", {}))
        losses = list(header.get("losses", []))[:state.epoch]
        cfg = RunConfig(scene=cfg.scene, data=cfg.data, detector=det_cfg, train=train_cfg,
                        infer=cfg.infer)
        cfg = cfg.override("train", epochs=args.epochs, batch_size=args.batch_size, lr=args.lr)
    else:
        cfg = cfg.override("train", seed=args.seed, epochs=args.epochs,
                           batch_size=args.batch_size, lr=args.lr)
        state = T.new_state(cfg.detector, cfg.train)
    scenes = _load_split(args.data, "train")
    if args.limit:
        scenes = scenes[:args.limit]

    def on_epoch(epoch, loss):
        losses.append(loss)
        print(f"epoch {epoch:3d}  loss {loss:.6f}", flush=True)
        _write_loss_csv(out / "loss.csv", losses)
        _save(ckpt, state, cfg, losses)

    with threadpool_limits(1):
        T.train(state, scenes, cfg.detector, cfg.train, on_epoch)
    _write_loss_csv(out / "loss.csv", losses)
    _save(ckpt, state, cfg, losses)
    return EXIT_OK


def _save(path, state, cfg, losses):
    header = {"detector": cfg.detector.to_dict(), "train": cfg.train.to_dict(),
              "scene": cfg.scene.to_dict(), "losses": losses}
    extra = {"epoch": state.epoch, "rng": state.rng.bit_generator.state}
    tmp = Path(str(path) + ".tmp")
    nn.save_checkpoint(tmp, state.params.tensors(), header, state.optimizer, extra)
    os.replace(tmp, path)


def _load_model(ckpt, cfg_path, cfg: RunConfig):
    try:
        state, det_cfg, _ = T.load_state(ckpt)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint: {exc}") from exc
    if cfg_path is not None and cfg.detector != det_cfg:
        raise ConfigError(f"detector config in {cfg_path} does not match checkpoint {ckpt}")
    return state.params, det_cfg


def cmd_eval(args, cfg: RunConfig) -> int:
    params, det_cfg = _load_model(args.ckpt, args.config, cfg)
    mode = MODE_FLAGS[args.mode] if args.mode else cfg.infer.mode
    iterations = parse_iterations(args.iterations) if args.iterations else [cfg.infer.max_iterations]
    samples = _load_split(args.data, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    iter_cfg = cfg.override("infer", mode=mode, max_iterations=max(iterations)).infer
    with threadpool_limits(1):
        results = [it.infer_iterative(s.image, params, iter_cfg, det_cfg) for s in samples]
    gts = [s.boxes for s in samples]
    sizes = [(s.width, s.height) for s in samples]
    if mode == "one_per_iteration":
        reports = report.per_iteration_reports(results, gts, sizes, [iter_cfg.max_total],
                                               "one-per-iter")
        reports[0].label = "one-per-iter"
        iterations = []
    else:
        reports = report.per_iteration_reports(results, gts, sizes, iterations, "iterdet")
        full = report.per_iteration_reports(results, gts, sizes, range(1, max(iterations) + 1),
                                            "iterdet")
        for m, r in zip(iterations, reports):
            r.per_iteration = [{"iteration": t, "recall": f.recall, "ap": f.ap}
                               for t, f in enumerate(full[:m], 1)]
    report.write_reports(out, reports)
    last = max(iterations) if iterations else iter_cfg.max_total
    report.write_pr_csv(out / "pr.csv", [M.EvalSample(r.upto(last), g, w, h)
                                         for r, g, (w, h) in zip(results, gts, sizes)])
    if len(iterations) > 1:
        report.write_iterations_csv(out / "iterations.csv", iterations, reports)
    sys.stdout.write(report.format_table(reports))
    return EXIT_OK


def cmd_viz(args, cfg: RunConfig) -> int:
    params, det_cfg = _load_model(args.ckpt, args.config, cfg)
    image = read_image(args.image)
    mode = MODE_FLAGS[args.mode] if args.mode else cfg.infer.mode
    m = max(parse_iterations(args.iterations)) if args.iterations else cfg.infer.max_iterations
    iter_cfg = cfg.override("infer", mode=mode, max_iterations=m).infer
    result = it.infer_iterative(image, params, iter_cfg, det_cfg)
    Path(args.out).write_text(render_svg(image, result.boxes))
    print(f"{len(result.boxes)} detections over {result.iterations_run} iterations -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iterdet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run config JSON (with a 'version' field)")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="generate train/ and val/ synthetic scenes")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--train-scenes", type=int)
    g.add_argument("--val-scenes", type=int)
    g.add_argument("--jobs", type=int, help="parallel generation processes")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the history-aware detector")
    common(t)
    t.add_argument("data", help="dataset directory (uses its train/ split if present)")
    t.add_argument("--out", required=True, help="directory for checkpoint.json and loss.csv")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--limit", type=int, help="use only the first N training scenes")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="iterative inference and metrics on a split")
    common(e)
    e.add_argument("ckpt")
    e.add_argument("data")
    e.add_argument("--split", default="val")
    e.add_argument("--iterations", help="N or A-B")
    e.add_argument("--mode", choices=sorted(MODE_FLAGS))
    e.add_argument("--out", required=True, help="directory for metrics.json/.txt and CSVs")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="SVG overlay of detections coloured by iteration")
    common(v)
    v.add_argument("ckpt")
    v.add_argument("image", help="PNG image")
    v.add_argument("--iterations", help="N or A-B (the maximum is used)")
    v.add_argument("--mode", choices=sorted(MODE_FLAGS))
    v.add_argument("--out", required=True, help="output SVG path")
    v.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    level = os.environ.get("ITERDET_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (nn.NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
