"""Command-line entry point: ``vlws <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from vlws.core import DatasetManifest, ManifestEntry, read_caption_file, read_manifest, write_manifest
from vlws.ingest import (
    TilingConfig,
    encode_mask,
    load_mask,
    load_rgb,
    save_png,
    synthesize_caption,
    tile_scene,
)

log = logging.getLogger("vlws")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _run_config(args):
    from vlws.trainer import RunConfig, load_run_config

    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "manifest", None):
        cfg.manifests = [Path(m) for m in args.manifest]
    if getattr(args, "backend_override", None):
        cfg.encoder = replace(cfg.encoder, backend=args.backend_override)
    return cfg


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path}")


# --- commands -----------------------------------------------------------------


def cmd_tile(args) -> int:
    image = load_rgb(args.input)
    mask = load_mask(args.mask, args.dataset_id) if args.mask else None
    cfg = TilingConfig(args.tile, args.overlap, args.discard)
    tiles = tile_scene(image, mask, cfg)
    out = Path(args.out)
    entries = []
    rows = ["row\tcol\timage"]
    for t in tiles:
        name = f"tile_{t.origin[0]:06d}_{t.origin[1]:06d}"
        img_p = save_png(t.image, out / f"{name}.png")
        rows.append(f"{t.origin[0]}\t{t.origin[1]}\t{img_p.name}")
        if t.mask is not None:
            entries.append(ManifestEntry(img_p, save_png(encode_mask(t.mask), out / f"{name}_mask.png")))
    _write(out / "origins.tsv", "\n".join(rows) + "\n")
    if entries:
        write_manifest(DatasetManifest(args.dataset_id, args.split, tuple(entries)), out / "tiles.manifest")
        print(f"wrote {out / 'tiles.manifest'}")
    print(f"{len(tiles)} tiles kept")
    return 0


def cmd_caption(args) -> int:
    manifest = read_manifest(args.manifest)
    sidecar = read_caption_file(args.captions) if args.captions else None
    if sidecar is not None and len(sidecar) != len(manifest.entries):
        raise SystemExit(f"caption file has {len(sidecar)} lines for {len(manifest.entries)} entries")
    entries = []
    for i, e in enumerate(manifest.entries):
        if args.mode == "template":
            caption = synthesize_caption(load_mask(e.mask, manifest.dataset_id), manifest.dataset_id)
        elif sidecar is not None:
            caption = sidecar[i]
        elif e.caption is not None:
            caption = e.caption
        elif e.caption_path is not None:
            caption = read_caption_file(e.caption_path)[0]
        else:
            raise SystemExit(f"entry {e.image} has no caption file; pass --captions or use --mode template")
        entries.append(ManifestEntry(e.image, e.mask, caption))
        if not args.out:
            print(f"{e.image.name}\t{caption}")
    if args.out:
        write_manifest(replace(manifest, entries=tuple(entries)), args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    from vlws.model import VLWSModel
    from vlws.trainer import dump_run_config, evaluate_items, train

    cfg = _run_config(args)
    out = Path(args.out) if args.out else cfg.out_dir
    catalog = cfg.catalog()
    model = VLWSModel(cfg.model, cfg.encoder)
    _write(out / "run.cfg", dump_run_config(replace(cfg, out_dir=out)))
    result = train(model, catalog, cfg.train, cfg.loss, out_dir=out)
    print(f"best {cfg.train.stop_metric}={result.best_metric:.4f} at epoch {result.best_epoch}; checkpoint {result.checkpoint}")
    if catalog.split("val"):
        report = evaluate_items(result.model, catalog.split("val"), cfg.train.eval_caption)
        _write_reports(report, out)
    return 0


def _write_reports(report, out: Path) -> None:
    from vlws.metrics import dumps_report

    _write(out / "overall.tsv", report.overall_table())
    _write(out / "per_dataset.tsv", report.dataset_table())
    _write(out / "report.json", dumps_report(report.to_json()))
    print(report.overall_table(), end="")


def cmd_eval(args) -> int:
    from vlws.trainer import evaluate

    cfg = _run_config(args)
    overrides = {"weights_dir": args.encoder_dir} if args.encoder_dir else {}
    report = evaluate(args.ckpt, cfg.catalog(), args.split, args.eval_caption, **overrides)
    _write_reports(report, Path(args.out) if args.out else Path(args.ckpt).parent / f"eval_{args.split}")
    return 0


def cmd_adapt(args) -> int:
    from vlws.experiments import SweepSpec, run_adaptation_sweep

    cfg = _run_config(args)
    spec = SweepSpec(args.target, tuple(_floats(args.fractions)), cfg.train, args.seed, args.repeats)
    report = run_adaptation_sweep(spec, cfg.catalog(), cfg.model, cfg.encoder, cfg.loss)
    out = Path(args.out)
    _write(out / f"adapt_{args.target.replace(' ', '_')}.tsv", report.table())
    _write(
        out / f"adapt_{args.target.replace(' ', '_')}.json",
        json.dumps(
            {
                "target": report.target,
                "sources": report.sources,
                "cells": [
                    {"fraction": c.fraction, "dice": c.dice, "target_train_ids": c.target_train_ids, "target_val_hash": c.target_val_hash}
                    for c in report.cells
                ],
            },
            indent=2,
        ),
    )
    print(report.table(), end="")
    return 0


def cmd_ablate(args) -> int:
    from vlws.experiments import run_lambda_ablation

    cfg = _run_config(args)
    report = run_lambda_ablation(cfg.catalog(), _floats(args.lambda_vl), cfg.train, cfg.model, cfg.encoder, cfg.loss)
    _write(Path(args.out) / "lambda_ablation.tsv", report.table())
    print(report.table(), end="")
    return 0


def cmd_map(args) -> int:
    from vlws.experiments import predict_scene, render_overlay
    from vlws.model import load_checkpoint

    overrides = {"weights_dir": args.encoder_dir} if args.encoder_dir else None
    model, _ = load_checkpoint(args.ckpt, overrides)
    image = load_rgb(args.scene)
    tiling = TilingConfig(args.tile, args.overlap, 1.0)
    result = predict_scene(model, image, tiling, args.blend, args.eval_caption, args.dataset_id)
    out = Path(args.out)
    save_png(result.rendered, out / "weed_map.png")
    save_png(render_overlay(image, result.class_map, args.alpha), out / "overlay.png")
    _write(out / "areas.json", json.dumps(result.area_fractions, indent=2))
    print(f"wrote {out / 'weed_map.png'} and {out / 'overlay.png'}")
    return 0


def cmd_analyze(args) -> int:
    from vlws.experiments import embedding_similarity_matrix

    cfg = _run_config(args)
    res = embedding_similarity_matrix(cfg.catalog(), args.backend, cfg.encoder, cfg.model, args.budget, args.seed)
    out = Path(args.out)
    _write(out / f"similarity_{args.backend}_blocks.tsv", res.block_table())
    np.savetxt(out / f"similarity_{args.backend}_tiles.tsv", res.matrix, delimiter="\t", fmt="%.6f")
    _write(out / f"similarity_{args.backend}_labels.tsv", "\n".join(f"{d}\t{s}" for d, s in zip(res.labels, res.sample_ids)) + "\n")
    print(res.block_table(), end="")
    return 0


def cmd_synth(args) -> int:
    from vlws.synthetic import write_synthetic_dataset

    paths = write_synthetic_dataset(args.out, n_train=args.train, n_val=args.val, size=args.size, seed=args.seed)
    for p in paths:
        print(f"wrote {p}")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlws", description="Vision-language crop/weed segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("tile", help="cut a scene (and optional mask) into overlapping tiles")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--mask")
    s.add_argument("--out", required=True)
    s.add_argument("--tile", type=int, default=512)
    s.add_argument("--overlap", type=float, default=0.25)
    s.add_argument("--discard", type=float, default=0.5)
    s.add_argument("--dataset-id", default="UAV Soybean")
    s.add_argument("--split", default="train", choices=("train", "val"))
    s.set_defaults(func=cmd_tile)

    s = sub.add_parser("caption", help="attach template or file captions to a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", choices=("template", "file"), default="template")
    s.add_argument("--captions", help="sidecar file, one caption per manifest entry")
    s.add_argument("--out", help="write a manifest with inline captions")
    s.set_defaults(func=cmd_caption)

    def data_args(s):
        s.add_argument("--config", help="run config (section.key=value)")
        s.add_argument("--manifest", action="append", help="manifest file (repeatable); overrides the config")

    s = sub.add_parser("train", help="train a model from a run config")
    data_args(s)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    data_args(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", default="val", choices=("train", "val"))
    s.add_argument("--eval-caption", choices=("file", "template", "fixed"), default="file")
    s.add_argument("--encoder-dir")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("adapt", help="target-domain fraction sweep")
    data_args(s)
    s.add_argument("--target", required=True)
    s.add_argument("--fractions", default="0.1,0.2,0.5,1.0")
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="runs/adapt")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("ablate", help="contrastive loss weight ablation")
    data_args(s)
    s.add_argument("--lambda-vl", default="0.01,0.02,0.03,0.05,0.10")
    s.add_argument("--out", default="runs/ablate")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("map", help="segment and stitch a field scene")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--blend", choices=("mean", "mean_prob", "majority"), default="mean_prob")
    s.add_argument("--tile", type=int, default=512)
    s.add_argument("--overlap", type=float, default=0.25)
    s.add_argument("--eval-caption", choices=("template", "fixed"), default="template")
    s.add_argument("--dataset-id", default="UAV Soybean")
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--encoder-dir")
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("analyze-embeddings", help="cross-dataset embedding cosine similarity")
    data_args(s)
    s.add_argument("--backend", choices=("vl", "baseline-visual"), default="vl")
    s.add_argument("--budget", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="runs/embeddings")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("synth", help="write a small synthetic four-dataset corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--train", type=int, default=8)
    s.add_argument("--val", type=int, default=4)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "blend", None) == "mean":
        args.blend = "mean_prob"
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
