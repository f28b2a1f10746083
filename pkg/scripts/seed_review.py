#!/usr/bin/env python3
"""Seed a review workload, then optionally serve it.

Composites flagged logo instances onto a small catalog, runs the gating
pipeline with a wide review band so every scored image needs a human,
opens --tasks review tasks, and with --serve exposes the HTTP surface
(plus the console, if --static points at its build).
"""
import argparse
import json
import shutil
import sys
from pathlib import Path

from modgate.catalog import CatalogStore, CorpusSpec, generate_corpus
from modgate.detectors import DetectorRegistry, logo_detector_from_templates
from modgate.logos import Compliance, Split, generate_logo_library
from modgate.pipeline import PipelineContext, ThresholdPolicy, run_pipeline
from modgate.review import LabeledStore, ReviewBoard
from modgate.router import L1Classifier, L1Mode, RoutingTable
from modgate.server import create_app, serve
from modgate.synthgen import TransformConfig, generate_dataset

CATEGORIES = ("apparel", "toys", "jewelry", "garden", "misc")


def build_world(workdir: Path, tasks: int, seed: int):
    bases = generate_corpus(CorpusSpec(n_images=tasks + 5, seed=seed,
                                       width=96, height=96,
                                       categories=CATEGORIES))
    logos = generate_logo_library(["brandx"], styles_per_class=2, seed=seed + 1)
    # fixed small rotation keeps the match strong but strictly below 1.0,
    # so nothing auto-blocks under t_block=1.0
    cfg = TransformConfig(scale_choices=(0.5,), rotation_range_deg=(8.0, 8.0),
                          shear_range=(0, 0), flip_prob=0.0)
    samples = generate_dataset(bases, logos, n_per_class=tasks, neg_ratio=0.25,
                               seed=seed + 2, config=cfg, resample="nearest")

    store = CatalogStore(workdir / "catalog")
    for s in samples:
        store.add(s.image)
    store.save()

    train = [l for l in logos if l.split is Split.TRAIN
             and l.compliance is Compliance.NON_COMPLIANT]
    det = logo_detector_from_templates(train, scales=[0.5], resample="nearest")
    registry = DetectorRegistry()
    registry.register(det)
    table = RoutingTable({c: {det.detector_id} for c in CATEGORIES})
    clf = L1Classifier(mode=L1Mode.METADATA_TRUSTED)
    policy = ThresholdPolicy(t_review=0.05, t_block=1.0)
    report = run_pipeline(store, clf, table, registry, policy, workdir)

    ctx = PipelineContext(store, workdir)
    labeled = LabeledStore(workdir / "labeled.jsonl")
    board = ReviewBoard(ctx, labeled, workdir)
    created = board.select_for_review(budget=tasks)
    return ctx, board, report, created


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="review-demo")
    ap.add_argument("--tasks", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--fresh", action="store_true",
                    help="wipe the workdir before seeding")
    ap.add_argument("--serve", action="store_true")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=8077)
    ap.add_argument("--static", default=None,
                    help="console build dir to mount at /")
    args = ap.parse_args(argv)

    workdir = Path(args.workdir)
    if args.fresh and workdir.exists():
        shutil.rmtree(workdir)
    ctx, board, report, created = build_world(workdir, args.tasks, args.seed)
    print(json.dumps({
        "workdir": str(workdir),
        "images": report.ingested,
        "open_tasks": len(created),
    }), flush=True)

    if args.serve:
        serve(ctx, board, host=args.host, port=args.port,
              static_dir=args.static)
    return 0


if __name__ == "__main__":
    sys.exit(main())
