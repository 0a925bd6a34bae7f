"""Command-line entry point: ``afford gen|curate|train|eval``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import pipeline
from .config import RunConfig, load_config
from .denoiser import build_model, load_params, records_to_tensors, save_params, train
from .errors import (AffordError, ConfigError, CorruptManifest, MissingBlob, NonFiniteLoss, ParamIoError,
                     ShapeMismatch, SizeMismatch, VersionMismatch)
from .evalkit import evaluate, report_csv, report_json, report_text, saliency_map
from .synth.curation import CurationConfig
from .synth.dataset import MANIFEST, read_dataset, update_labels, write_dataset
from .synth.records import validate_record

log = logging.getLogger("afford")

OK, RUNTIME, USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _threads():
    val = os.environ.get("AFFORD_THREADS")
    if val:
        try:
            torch.set_num_threads(max(1, int(val)))
        except ValueError:
            raise UsageError(f"AFFORD_THREADS must be an integer, got {val!r}") from None


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, generator=replace(cfg.generator, seed=args.seed),
                      model=replace(cfg.model, seed=args.seed), eval=replace(cfg.eval, seed=args.seed))
    return cfg


def _path(args, name: str, cfg: RunConfig):
    val = getattr(args, name, None) or getattr(cfg.paths, name, None)
    if val is None:
        raise UsageError(f"--{name} is required")
    return Path(val)


def _read(dataset: Path):
    try:
        return read_dataset(dataset)
    except (CorruptManifest, SizeMismatch) as exc:
        raise UsageError(str(exc)) from exc
    except MissingBlob as exc:
        if exc.path.endswith(MANIFEST):
            raise UsageError(f"no dataset at {dataset}") from exc
        raise UsageError(str(exc)) from exc


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = _path(args, "out", cfg)
    g = cfg.generator
    rep = pipeline.generate(g.n, g.seed, g.width, g.archetypes, g.clutter_max, g.twin, g.sigma_track,
                            g.sigma_hand, g.provenance)
    for r in rep.records:
        validate_record(r)
    write_dataset(rep.records, out)
    print(f"wrote {len(rep.records)} records to {out}")
    print(f"invariants: {len(rep.records)} records valid; {len(rep.infeasible)} infeasible seeds skipped")
    return OK


def cmd_curate(args) -> int:
    cfg = _config(args)
    dataset = _path(args, "dataset", cfg)
    records = _read(dataset)
    c = cfg.curate
    summary = pipeline.curate_records(records, CurationConfig(k_max=c.k_max, gmm_seed=c.gmm_seed))
    labels = {r.id: r.curated for r in summary.records if r.curated is not None}
    update_labels(dataset, labels)
    print(f"curated {summary.curated} / {summary.eligible} eligible records; "
          f"{summary.skipped} skipped (no intermediates)")
    if summary.px_errors:
        px = np.asarray(summary.px_errors)
        deg = np.degrees(summary.rot_errors)
        print(f"point error px: mean {px.mean():.3f} median {np.median(px):.3f} p95 {np.percentile(px, 95):.3f}")
        print(f"pose error deg: mean {deg.mean():.3f} median {np.median(deg):.3f} max {deg.max():.3f}")
    if summary.failed:
        print("failed: " + " ".join(summary.failed))
    if summary.success_fraction < c.min_success:
        return RUNTIME
    return OK


def _write_curve(path: Path, curve, held):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "heldout_sr"])
        for j, loss in enumerate(curve):
            w.writerow([j + 1, repr(loss), repr(held[j + 1]) if j + 1 in held else ""])


def cmd_train(args) -> int:
    cfg = _config(args)
    dataset = _path(args, "dataset", cfg)
    out = _path(args, "out", cfg)
    records = _read(dataset)
    if not records:
        raise UsageError(f"dataset {dataset} has no records")
    sched_loc, sched_rot = cfg.schedules()
    tr, hold = pipeline.split_holdout(records, cfg.train.holdout, cfg.model.seed)
    if not tr:
        raise UsageError("no training records left after the held-out split")
    held = {}
    model_ref = {}
    every = cfg.train.eval_every
    probe = hold[:cfg.train.eval_samples]

    def callback(step, loss):
        if every and probe and (step + 1) % every == 0:
            res = pipeline.evaluate_model(model_ref["m"], probe, sched_loc, sched_rot, 1, cfg.eval.seed)
            held[step + 1] = res.mean("sr")
            log.info("step %d loss %.4f held-out SR %.3f", step + 1, loss, held[step + 1])

    model = build_model(cfg.model)
    model_ref["m"] = model
    data = records_to_tensors(tr, cfg.model.max_depth)
    try:
        curve = train(model, data, sched_loc, sched_rot, callback=callback)
    except NonFiniteLoss as exc:
        print(f"error: {exc} (step {exc.step})", file=sys.stderr)
        return RUNTIME
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(model, out)
    meta = {"width": tr[0].width, "height": tr[0].height, "n_train": len(tr), "n_heldout": len(hold)}
    Path(str(out) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write_curve(Path(str(out) + ".loss.csv"), curve, held)
    print(f"trained {len(curve)} steps on {len(tr)} records; loss {curve[0]:.4f} -> {curve[-1]:.4f}"
          if curve else f"trained 0 steps on {len(tr)} records")
    return OK


def _write_overlay(path: Path, record, preds, sigma_h):
    """Binary PPM: the frame with the prediction saliency blended into the red channel."""
    pts = np.array([[p.contact_point.u, p.contact_point.v] for p in preds])
    sal = saliency_map(pts, record.mask.shape, sigma_h)
    sal = sal / max(sal.max(), 1e-12)
    img = record.frame.rgb.astype(float)
    img[..., 0] = np.clip(img[..., 0] * (1 - sal) + 255 * sal, 0, 255)
    h, w = record.mask.shape
    path.write_bytes(f"P6 {w} {h} 255\n".encode() + img.astype(np.uint8).tobytes())


def cmd_eval(args) -> int:
    cfg = _config(args)
    dataset = _path(args, "dataset", cfg)
    out = _path(args, "out", cfg)
    records = _read(dataset)
    if not records:
        raise UsageError(f"dataset {dataset} has no records")
    n = cfg.eval.samples_per_scene
    info = {"created": time.strftime("%Y-%m-%dT%H:%M:%S"), "samples_per_scene": n}
    if args.oracle:
        preds = pipeline.oracle_predictions(records, n)
        info["model"] = "oracle"
    else:
        model_path = _path(args, "model", cfg)
        try:
            model = load_params(model_path)
        except (ParamIoError, VersionMismatch, ShapeMismatch) as exc:
            raise UsageError(str(exc)) from exc
        meta_path = Path(str(model_path) + ".json")
        if meta_path.is_file():
            meta = json.loads(meta_path.read_text())
            if (meta["width"], meta["height"]) != (records[0].width, records[0].height):
                print(f"error: model trained on {meta['width']}x{meta['height']} images, dataset is "
                      f"{records[0].width}x{records[0].height}", file=sys.stderr)
                return RUNTIME
        sched_loc, sched_rot = cfg.schedules()
        preds = pipeline.predict(model, records, sched_loc, sched_rot, n, cfg.eval.seed)
        info["model"] = str(model_path)
    res = evaluate(records, preds, cfg.eval.sigma_h)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report_json(res, **info) + "\n")
    Path(str(out) + ".txt").write_text(report_text(res))
    if args.csv:
        Path(str(out) + ".csv").write_text(report_csv(res))
    if args.overlay:
        odir = Path(str(out) + ".overlays")
        odir.mkdir(exist_ok=True)
        for r, p in zip(records, preds):
            _write_overlay(odir / f"{r.id}.ppm", r, p, cfg.eval.sigma_h)
    print(report_text(res), end="")
    return OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afford", description="Pose-centred affordance pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *names):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        for name in names:
            sp.add_argument(f"--{name}")
        return sp

    common(sub.add_parser("gen", help="generate a synthetic dataset"), "out").set_defaults(func=cmd_gen)
    common(sub.add_parser("curate", help="extract labels from demonstration intermediates"),
           "dataset").set_defaults(func=cmd_curate)
    common(sub.add_parser("train", help="train the noise predictor"), "dataset", "out").set_defaults(func=cmd_train)
    ev = common(sub.add_parser("eval", help="sample and score affordances"), "dataset", "model", "out")
    ev.add_argument("--oracle", action="store_true", help="score ground truth instead of a model")
    ev.add_argument("--csv", action="store_true", help="also write per-sample rows")
    ev.add_argument("--overlay", action="store_true", help="write saliency overlay images")
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE if exc.code else OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _threads()
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE
    except (AffordError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME


if __name__ == "__main__":
    sys.exit(main())
