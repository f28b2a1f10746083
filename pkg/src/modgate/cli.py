"""The modgate command: every workflow as a deterministic subcommand.

Configuration precedence is flags > MODGATE_ env vars > --config file >
built-in defaults. Errors print one JSON object to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .catalog import (
    CatalogStore,
    CorpusSpec,
    Label,
    generate_corpus,
    load_image,
)
from .config import RunConfig, load_config
from .detectors import ShallowModel, build_registry, shallow_fit
from .errors import ConfigError, ModgateError
from .evalkit import (
    ConfusionCounts,
    MaxF1,
    RecallAtPrecision,
    f1_curve,
    prf1,
    roc,
    tune_thresholds,
    write_eval_outputs,
)
from .logos import generate_logo_library, load_logo_library, save_logo_library
from .pipeline import Limits, PipelineContext, ThresholdPolicy, run_pipeline
from .review import LabeledStore, ReviewBoard, TaskStatus
from .router import L1Classifier, L1Mode, RoutingTable
from .signature import (
    SimilarityIndex,
    compute_signature,
    fit_binarization,
    knn_query,
    load_index,
    save_index,
)
from .synthgen import Split, TransformConfig, generate_dataset, write_annotations


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _transform_config(cfg: RunConfig) -> TransformConfig:
    return TransformConfig(
        scale_range=cfg.scale_range,
        rotation_range_deg=cfg.rotation_range_deg,
        scale_choices=cfg.scale_choices or None,
    )


def _registry(cfg: RunConfig):
    needs_logos = any(e.get("kind") == "template" for e in cfg.detectors.values())
    logos = load_logo_library(cfg.logos_dir) if needs_logos else None
    models = {}
    for entry in cfg.detectors.values():
        if entry.get("kind") == "shallow":
            key = entry.get("params", {}).get("model", "shallow")
            models[key] = ShallowModel.load(Path(cfg.models_dir) / f"{key}.json")
    return build_registry(cfg.detectors, logos=logos, models=models or None)


def _context(cfg: RunConfig) -> tuple[CatalogStore, PipelineContext, ReviewBoard]:
    store = CatalogStore.load(cfg.catalog_dir)
    ctx = PipelineContext(store, cfg.workdir)
    labeled = LabeledStore(Path(cfg.workdir) / "labeled.jsonl")
    board = ReviewBoard(ctx, labeled, cfg.workdir)
    return store, ctx, board


# ---------------------------------------------------------------- handlers

def cmd_gen_corpus(cfg: RunConfig, args) -> int:
    spec = CorpusSpec(n_images=cfg.corpus_images, categories=cfg.categories,
                      seed=cfg.seed, width=cfg.image_size, height=cfg.image_size)
    store = CatalogStore(cfg.catalog_dir)
    store.add_all(generate_corpus(spec))
    store.save()
    _emit({"catalog_dir": cfg.catalog_dir, "images": len(store),
           "categories": list(cfg.categories)})
    return 0


def cmd_gen_logos(cfg: RunConfig, args) -> int:
    assets = generate_logo_library(list(cfg.logo_classes),
                                   styles_per_class=cfg.styles_per_class,
                                   seed=cfg.seed)
    save_logo_library(assets, cfg.logos_dir)
    _emit({"logos_dir": cfg.logos_dir, "assets": len(assets),
           "classes": list(cfg.logo_classes)})
    return 0


def cmd_synth(cfg: RunConfig, args) -> int:
    store = CatalogStore.load(cfg.catalog_dir)
    logos = load_logo_library(cfg.logos_dir)
    split = Split.TRAIN if args.split == "train" else Split.TEST
    samples = generate_dataset(
        store.images(), logos,
        n_per_class=cfg.n_per_class, neg_ratio=cfg.neg_ratio, seed=cfg.seed,
        config=_transform_config(cfg), split=split,
        lookalike_fraction=cfg.lookalike_fraction, resample=cfg.resample,
    )
    path = write_annotations(samples, cfg.dataset_dir)
    _emit({"dataset_dir": cfg.dataset_dir, "samples": len(samples),
           "annotations": str(path), "split": split.value})
    return 0


def cmd_index_build(cfg: RunConfig, args) -> int:
    store = CatalogStore.load(cfg.catalog_dir)
    if len(store) == 0:
        raise ConfigError([f"catalog at {cfg.catalog_dir!r} is empty; "
                           f"run gen-corpus first"])
    sigs = [compute_signature(img) for img in store.images()]
    index = SimilarityIndex(fit_binarization(sigs))
    index.add_images(store.images())
    save_index(index, cfg.index_path, cfg.thresholds_path)
    _emit({"index_path": cfg.index_path, "thresholds_path": cfg.thresholds_path,
           "entries": len(index)})
    return 0


def cmd_index_query(cfg: RunConfig, args) -> int:
    index = load_index(cfg.index_path, cfg.thresholds_path)
    probe = load_image(args.image)
    hits = knn_query(index, probe, args.k)
    _emit({"probe": args.image,
           "hits": [{"image_id": i, "distance": d} for i, d in hits]})
    return 0


def cmd_fit_shallow(cfg: RunConfig, args) -> int:
    anns = Path(cfg.dataset_dir) / "annotations.jsonl"
    samples = []
    with anns.open() as fh:
        for line in fh:
            rec = json.loads(line)
            image = load_image(Path(cfg.dataset_dir) / rec["image_path"],
                               rec["image_id"])
            samples.append((compute_signature(image), Label(rec["label"])))
    model = shallow_fit(samples)
    out = Path(cfg.models_dir) / f"{args.name}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    _emit({"model_path": str(out), "dimension": model.dimension,
           "samples": len(samples), "final_loss": model.loss_history[-1]})
    return 0


def cmd_route_check(cfg: RunConfig, args) -> int:
    table = RoutingTable.from_dict(cfg.routing)
    registry = _registry(cfg)
    missing = sorted(table.detector_ids() - set(registry.ids()))
    if missing:
        raise ConfigError([f"routing table references unregistered detector {d!r}"
                           for d in missing])
    _emit({"ok": True,
           "routes": {cat: sorted(table.routes[cat]) for cat in table.categories()},
           "detectors": registry.ids()})
    return 0


def cmd_run(cfg: RunConfig, args) -> int:
    store = CatalogStore.load(cfg.catalog_dir)
    table = RoutingTable.from_dict(cfg.routing)
    registry = _registry(cfg)
    clf = L1Classifier(mode=L1Mode.METADATA_TRUSTED)
    policy = ThresholdPolicy(t_review=cfg.t_review, t_block=cfg.t_block)
    limits = Limits(min_dim=cfg.min_dim, max_dim=cfg.max_dim)
    report = run_pipeline(store, clf, table, registry, policy, cfg.workdir,
                          workers=cfg.workers, limits=limits)
    if Path(cfg.catalog_dir, "index.jsonl").exists():
        store.flush_index()  # persist terminal states next to the pixels
    _emit(report.to_dict())
    return 0


def cmd_serve(cfg: RunConfig, args) -> int:
    from .server import serve

    store, ctx, board = _context(cfg)
    static = cfg.static_dir or None
    print(f"serving on http://{cfg.bind} "
          f"({len(store)} images, static={'yes' if static else 'no'})",
          file=sys.stderr)
    serve(ctx, board, host=cfg.host, port=cfg.port, static_dir=static)
    return 0


def cmd_review_select(cfg: RunConfig, args) -> int:
    store, ctx, board = _context(cfg)
    created = board.select_for_review(budget=args.budget, floor=args.floor)
    _emit({"created": [t.to_dict() for t in created],
           "open_total": len(board.tasks(TaskStatus.OPEN))})
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    report: dict = {}
    if args.counts:
        raw = json.loads(Path(args.counts).read_text())
        rows = raw["rows"] if isinstance(raw, dict) else raw
        table = []
        for row in rows:
            c = ConfusionCounts(tp=row.get("tp", 0), fp=row.get("fp", 0),
                                tn=row.get("tn", 0), fn=row.get("fn", 0))
            p, r, f1 = prf1(c)
            table.append({"name": row.get("name", ""),
                          "precision": round(p, 2), "recall": round(r, 2),
                          "f1": round(f1, 2)})
        report["rows"] = table
    curve = None
    f1_points = None
    if args.scores:
        scores = []
        with Path(args.scores).open() as fh:
            for line in fh:
                rec = json.loads(line)
                scores.append((float(rec["confidence"]), bool(rec["truth"])))
        curve = roc(scores)
        f1_points = f1_curve(scores)
        best_t, best_f1 = max(f1_points, key=lambda p: (p[1], p[0]))
        report["auc"] = curve.auc()
        report["best_threshold"] = best_t
        report["best_f1"] = best_f1
        report["samples"] = len(scores)
    if not report:
        raise ConfigError(["eval needs --counts and/or --scores"])
    write_eval_outputs(cfg.eval_dir, report, curve, f1_points)
    report["eval_dir"] = cfg.eval_dir
    _emit(report)
    return 0


def cmd_tune(cfg: RunConfig, args) -> int:
    groups: dict[tuple[str, str], list[tuple[float, bool]]] = {}
    with Path(args.scores).open() as fh:
        for line in fh:
            rec = json.loads(line)
            key = (rec["detector"], rec["category"])
            groups.setdefault(key, []).append(
                (float(rec["confidence"]), bool(rec["truth"])))
    if args.objective == "max-f1":
        objective = MaxF1()
    else:
        objective = RecallAtPrecision(args.precision_floor)
    result = tune_thresholds(groups, objective,
                             default_review=cfg.t_review,
                             default_block=cfg.t_block,
                             review_budget=args.review_budget)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {"policy": result.policy.to_dict(),
               "warnings": list(result.warnings)}
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _emit({**payload, "policy_path": str(out)})
    return 0


# ------------------------------------------------------------------ parser

def _parser() -> argparse.ArgumentParser:
    # shared flags accepted before or after the subcommand; SUPPRESS keeps a
    # subparser from clobbering a value parsed at the top level
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="YAML config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="master RNG seed")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS,
                        help="pipeline worker threads")
    common.add_argument("--bind", default=argparse.SUPPRESS,
                        help="HTTP bind address host:port")
    common.add_argument("--workdir", default=argparse.SUPPRESS,
                        help="run state directory")

    p = argparse.ArgumentParser(
        prog="modgate",
        description="Image moderation workbench: data synthesis, detection, "
                    "routing, review, evaluation.",
        parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    s = add_parser("gen-corpus", help="generate a procedural product-image catalog")
    s.add_argument("--n", type=int, dest="corpus_images", help="image count")
    s.add_argument("--out", dest="catalog_dir", help="catalog directory")
    s.set_defaults(handler=cmd_gen_corpus)

    s = add_parser("gen-logos", help="generate the procedural logo library")
    s.add_argument("--out", dest="logos_dir", help="logo directory")
    s.set_defaults(handler=cmd_gen_logos)

    s = add_parser("synth", help="composite logos onto the catalog")
    s.add_argument("--split", choices=["train", "test"], default="train")
    s.add_argument("--n-per-class", type=int, dest="n_per_class")
    s.add_argument("--out", dest="dataset_dir", help="dataset directory")
    s.set_defaults(handler=cmd_synth)

    s = add_parser("index", help="binary-signature similarity index")
    isub = s.add_subparsers(dest="index_command", required=True)
    b = isub.add_parser("build", parents=[common], help="index the catalog")
    b.set_defaults(handler=cmd_index_build)
    q = isub.add_parser("query", parents=[common], help="k-NN lookup for a probe image")
    q.add_argument("--image", required=True, help="probe PNG path")
    q.add_argument("--k", type=int, default=10)
    q.set_defaults(handler=cmd_index_query)

    s = add_parser("fit", help="train models")
    fsub = s.add_subparsers(dest="fit_command", required=True)
    f = fsub.add_parser("shallow", parents=[common], help="logistic classifier on signatures")
    f.add_argument("--name", default="shallow", help="model file stem")
    f.set_defaults(handler=cmd_fit_shallow)

    s = add_parser("route-check", help="validate routing against detectors")
    s.set_defaults(handler=cmd_route_check)

    s = add_parser("run", help="drive every pending image to a terminal state")
    s.set_defaults(handler=cmd_run)

    s = add_parser("serve", help="HTTP API + review console")
    s.set_defaults(handler=cmd_serve)

    s = add_parser("review", help="review workflow")
    rsub = s.add_subparsers(dest="review_command", required=True)
    r = rsub.add_parser("select", parents=[common], help="open tasks for top flagged images")
    r.add_argument("--budget", type=int, default=10)
    r.add_argument("--floor", type=float, default=0.0)
    r.set_defaults(handler=cmd_review_select)

    s = add_parser("eval", help="metrics from counts and/or scored samples")
    s.add_argument("--counts", help="JSON file of confusion-count rows")
    s.add_argument("--scores", help="JSONL of {confidence, truth}")
    s.set_defaults(handler=cmd_eval)

    s = add_parser("tune", help="per-(detector,category) threshold search")
    s.add_argument("--scores", required=True,
                   help="JSONL of {detector, category, confidence, truth}")
    s.add_argument("--objective", choices=["max-f1", "recall-at-precision"],
                   default="max-f1")
    s.add_argument("--precision-floor", type=float, default=0.9)
    s.add_argument("--review-budget", type=int, default=None)
    s.add_argument("--out", default="work/policy.json", help="policy output path")
    s.set_defaults(handler=cmd_tune)
    return p


_CONFIG_FLAGS = ("seed", "workers", "bind", "workdir", "corpus_images",
                 "catalog_dir", "logos_dir", "dataset_dir", "n_per_class")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    overrides = {name: getattr(args, name)
                 for name in _CONFIG_FLAGS
                 if getattr(args, name, None) is not None}
    try:
        cfg = load_config(getattr(args, "config", None), overrides=overrides)
        return args.handler(cfg, args)
    except ConfigError as exc:
        json.dump({"error": "ConfigError", "violations": exc.violations},
                  sys.stderr, sort_keys=True)
        sys.stderr.write("\n")
        return 2
    except ModgateError as exc:
        json.dump({"error": type(exc).__name__, "detail": str(exc)},
                  sys.stderr, sort_keys=True)
        sys.stderr.write("\n")
        return 2
    except OSError as exc:
        json.dump({"error": "OSError", "detail": str(exc)}, sys.stderr,
                  sort_keys=True)
        sys.stderr.write("\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
