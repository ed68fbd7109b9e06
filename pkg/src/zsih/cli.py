"""Command-line operator surface: synthesize data, build splits, train,
encode, and evaluate Hamming-space retrieval."""

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import data, model, pipeline, retrieval

logger = logging.getLogger("zsih.cli")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = os.environ.get("ZSIH_LOG", "error").lower()
    if level not in _LOG_LEVELS:
        raise ValueError(f"ZSIH_LOG must be one of {sorted(_LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=_LOG_LEVELS[level],
                        format="%(levelname)s %(name)s: %(message)s")


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value
    return out


def _load_config(args):
    config = pipeline.load_config(args.config) if args.config else pipeline.ZsihConfig()
    config = pipeline.apply_overrides(config, _parse_overrides(args.set))
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config.validate()


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="zsih",
        description="Cross-modal sketch-image hashing with zero-shot retrieval",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--locations", type=int, default=4)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--semantic-dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--sketches", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--semantics", required=True)

    p = sub.add_parser("split", help="draw a zero-shot seen/unseen class split")
    p.add_argument("--features", required=True)
    p.add_argument("--n-unseen", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on the seen classes")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--sketches", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--semantics", required=True)
    p.add_argument("--synonyms")
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metrics", required=True)
    p.add_argument("--resume")

    p = sub.add_parser("encode", help="hash features with a trained encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--modality", choices=("sketch", "image"), required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("retrieve", help="rank a gallery for each query code")
    p.add_argument("--queries", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="retrieval metrics for query/gallery codes")
    p.add_argument("--queries", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--k", action="append", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--pr-dump")

    p = sub.add_parser("ablate", help="sweep fusion/GCN/bandwidth settings")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--sketches", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--semantics", required=True)
    p.add_argument("--synonyms")
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    return parser


def run_synth(args, parser):
    counts = {
        "--classes": args.classes,
        "--per-class": args.per_class,
        "--locations": args.locations,
        "--channels": args.channels,
        "--semantic-dim": args.semantic_dim,
    }
    for flag, value in counts.items():
        if value <= 0:
            parser.error(f"{flag} must be positive, got {value}")
    if args.noise < 0:
        parser.error(f"--noise must be non-negative, got {args.noise}")
    store, table = data.synth_dataset(
        args.classes, args.per_class, args.locations, args.channels,
        args.semantic_dim, args.noise, args.seed,
    )
    data.save_features(store, args.sketches, "sketch")
    data.save_features(store, args.images, "image")
    names = {store.class_names[cid]: vec for cid, vec in sorted(table.vectors.items())}
    data.write_semantic_file(names, args.semantics)
    print(
        f"synthesized {args.classes} classes, {args.per_class} items per class "
        f"per modality, feature maps {args.locations}x{args.channels}, "
        f"semantics {args.semantic_dim}-D"
    )
    return 0


def run_split(args, parser):
    store = data.load_features(args.features)
    classes = store.classes()
    if not 0 < args.n_unseen < len(classes):
        parser.error(
            f"--n-unseen must be in (0, {len(classes)}), got {args.n_unseen}"
        )
    split = data.make_split(classes, args.n_unseen, args.seed)
    data.save_split(split, args.out)
    print(f"split {len(classes)} classes: {len(split.seen)} seen, "
          f"{len(split.unseen)} unseen (seed {split.seed})")
    return 0


def _load_training_inputs(args):
    sketch_store = data.load_features(args.sketches)
    image_store = data.load_features(args.images)
    class_names = dict(sketch_store.class_names)
    class_names.update(image_store.class_names)
    semantics = data.load_semantics(args.semantics, class_names, args.synonyms)
    split = data.load_split(args.split)
    return sketch_store, image_store, semantics, split


def _seen_dataset(sketch_store, image_store, semantics, split):
    present = set(sketch_store.classes("sketch")) & set(image_store.classes("image"))
    train_classes = sorted(present & split.seen)
    if not train_classes:
        raise ValueError("no seen classes with data in both modalities")
    leaked = set(train_classes) & split.unseen
    if leaked:
        raise ValueError(
            f"zero-shot contract violated: unseen classes {sorted(leaked)} "
            "selected for training"
        )
    return pipeline.PairedDataset.from_stores(
        sketch_store, image_store, semantics, classes=train_classes
    )


def run_train(args, parser):
    config = _load_config(args)
    sketch_store, image_store, semantics, split = _load_training_inputs(args)
    dataset = _seen_dataset(sketch_store, image_store, semantics, split)
    resume = pipeline.load_checkpoint(args.resume) if args.resume else None
    if resume is None and os.path.exists(args.metrics):
        open(args.metrics, "w").close()
    ckpt = pipeline.train(config, dataset, metrics_out=args.metrics, resume=resume)
    pipeline.save_checkpoint(ckpt, args.checkpoint)
    print(f"trained {ckpt.iteration} iterations over {len(dataset.classes)} "
          f"seen classes; checkpoint -> {args.checkpoint}")
    return 0


def _encode_items(params, items, modality):
    feats = [item.feat.astype(np.float64) for item in items]
    labels = np.array([item.class_id for item in items], dtype=np.uint32)
    if modality == "sketch":
        soft = model.encode_features(feats, params.attn_sk, params.enc_sk)
    else:
        soft = model.encode_features(feats, params.attn_im, params.enc_im)
    return retrieval.binarize(soft, labels, modality=modality)


def run_encode(args, parser):
    ckpt = pipeline.load_checkpoint(args.checkpoint)
    params = ckpt.build_params()
    store = data.load_features(args.features)
    items = store.modality_items(args.modality)
    if not items:
        raise ValueError(
            f"feature file {args.features} holds no {args.modality} items "
            "(modality mismatch)"
        )
    if items[0].feat.shape[1] != params.feat_channels:
        raise ValueError(
            f"feature channels {items[0].feat.shape[1]} do not match "
            f"checkpoint ({params.feat_channels})"
        )
    codes = _encode_items(params, items, args.modality)
    retrieval.save_codes(codes, args.out)
    print(f"encoded {len(codes)} {args.modality} items at {codes.n_bits} bits "
          f"-> {args.out}")
    return 0


def run_retrieve(args, parser):
    if args.top < 1:
        parser.error(f"--top must be positive, got {args.top}")
    queries = retrieval.load_codes(args.queries)
    gallery = retrieval.load_codes(args.gallery)
    if queries.n_bits != gallery.n_bits:
        raise ValueError(
            f"code length mismatch: queries {queries.n_bits} bits, "
            f"gallery {gallery.n_bits} bits"
        )
    top = min(args.top, len(gallery))
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("query\trank\tgallery_index\tdistance\n")
        for qi in range(len(queries)):
            dist = retrieval._packed_distances(queries.codes[qi], gallery.codes)
            order = np.argsort(dist, kind="stable")[:top]
            for rank, gi in enumerate(order, start=1):
                f.write(f"{qi}\t{rank}\t{gi}\t{dist[gi]}\n")
    print(f"ranked top-{top} of {len(gallery)} gallery items for "
          f"{len(queries)} queries -> {args.out}")
    return 0


def run_eval(args, parser):
    queries = retrieval.load_codes(args.queries)
    gallery = retrieval.load_codes(args.gallery)
    ks = args.k or [1, 10, 100]
    if any(k < 1 for k in ks):
        parser.error("--k values must be positive")
    report = retrieval.evaluate(queries, gallery, ks=ks)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(retrieval.format_report(report))
    if args.pr_dump:
        retrieval.write_pr_dump(report, args.pr_dump)
    print(f"mAP@all {report.map_all:.4f} over {len(report.per_query_ap)} queries "
          f"-> {args.out}")
    return 0


ABLATION_SETTINGS = (
    ("full", {}),
    ("fusion=concat", {"fusion_mode": "concat"}),
    ("fusion=mfb", {"fusion_mode": "mfb"}),
    ("no_gcn", {"use_gcn": "false"}),
    ("t=1", {"t": "1"}),
    ("t=1e-6", {"t": "1e-6"}),
)


def run_ablate(args, parser):
    base = _load_config(args)
    sketch_store, image_store, semantics, split = _load_training_inputs(args)
    dataset = _seen_dataset(sketch_store, image_store, semantics, split)
    unseen_sketches = [i for i in sketch_store.modality_items("sketch")
                       if i.class_id in split.unseen]
    unseen_images = [i for i in image_store.modality_items("image")
                     if i.class_id in split.unseen]
    if not unseen_sketches or not unseen_images:
        raise ValueError("no unseen-class data to evaluate the ablation on")
    rows = []
    for name, overrides in ABLATION_SETTINGS:
        config = pipeline.apply_overrides(base, overrides)
        ckpt = pipeline.train(config, dataset)
        params = ckpt.build_params()
        q = _encode_items(params, unseen_sketches, "sketch")
        g = _encode_items(params, unseen_images, "image")
        report = retrieval.evaluate(q, g, ks=(1,))
        rows.append((name, report.map_all))
        logger.info("ablation %s: mAP@all %.4f", name, report.map_all)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("setting\tmap_all\n")
        for name, value in rows:
            f.write(f"{name}\t{value!r}\n")
    print(f"ablation sweep over {len(rows)} settings -> {args.out}")
    return 0


_HANDLERS = {
    "synth": run_synth,
    "split": run_split,
    "train": run_train,
    "encode": run_encode,
    "retrieve": run_retrieve,
    "eval": run_eval,
    "ablate": run_ablate,
}


def main(argv=None):
    try:
        _setup_logging()
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.verb](args, parser)
    except (ValueError, FloatingPointError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
