"""``amilpath`` command-line front end.

Configuration is layered: built-in defaults, then the snapshot a previous
run left in the workdir (``config.json``), then ``--config`` (TOML or JSON),
then command-line flags. The merged result is written back to
``config.json`` before the subcommand runs.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__, pipeline

log = logging.getLogger("amilpath")

SUBCOMMANDS = ("tile", "build-bags", "train", "predict", "evaluate", "compare-auc",
               "heatmap", "nuclei", "feature-importance", "synth")


def read_config_file(path):
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


def _merge(base, update):
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(conf, pairs):
    """``--set model.epochs=10`` style overrides (values parsed as JSON when possible)."""
    for pair in pairs or ():
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        node = conf
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _parse_value(value)
    return conf


def resolve_config(args):
    workdir = Path(args.workdir or os.environ.get("AMILPATH_WORKDIR") or "amilpath_work")
    conf = {}
    snapshot = workdir / "config.json"
    if snapshot.exists():
        conf = _merge(conf, json.loads(snapshot.read_text()))
    if args.config:
        conf = _merge(conf, read_config_file(args.config))
    flags = {}
    for name in ("manifest", "annotations", "clinical", "seed", "patch_size", "level", "test_size", "val_size",
                 "aggregation", "threshold", "alpha", "n_classes"):
        value = getattr(args, name, None)
        if value is not None:
            flags[name] = value
    if getattr(args, "no_stratify", False):
        flags["stratify"] = False
    if getattr(args, "merge_logits", False):
        flags["merge_logits"] = True
    bag = {k: getattr(args, k) for k in ("N", "M") if getattr(args, k, None) is not None}
    if getattr(args, "attach_clinical", False):
        bag["attach_clinical"] = True
    model = {}
    for name in ("embedder", "epochs", "lr_max", "weight_decay", "t0", "t_mult", "batch_bags",
                 "hidden_dim", "toy_size"):
        value = getattr(args, name, None)
        if value is not None:
            model[name] = value
    if getattr(args, "class_weights", False):
        model["class_weights"] = True
    if getattr(args, "standardize", False):
        model["standardize"] = True
    if getattr(args, "pretrained", False):
        model["pretrained"] = True
    if getattr(args, "freeze_backbone", False):
        model["finetune_backbone"] = False
    conf = _merge(conf, {**flags, "bag": bag, "model": model})
    conf = apply_overrides(conf, args.set)
    conf["workdir"] = str(workdir)
    known = {f.name for f in fields(pipeline.RunConfig)}
    unknown = set(conf) - known
    if unknown:
        raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
    for key in ("manifest", "annotations", "clinical"):
        if conf.get(key) and not Path(conf[key]).exists():
            raise FileNotFoundError(f"{key} path does not exist: {conf[key]}")
    return pipeline.RunConfig(**conf)


def build_parser():
    parser = argparse.ArgumentParser(prog="amilpath", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"amilpath {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", help="artifact directory (default: $AMILPATH_WORKDIR or ./amilpath_work)")
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p.add_argument("--n", type=int, default=60)
    p.add_argument("--out", help="output directory (default: <workdir>/synth)")
    p.add_argument("--null", action="store_true", help="no label-dependent signal")
    p.add_argument("--density-gap", type=float)
    p.add_argument("--elongation-gap", type=float)
    p.add_argument("--age-gap", type=float)
    p.add_argument("--slide-size", type=int)
    p.add_argument("--region-min", type=int, help="default: half the slide size when --slide-size is given")
    p.add_argument("--region-max", type=int, help="default: 5/8 of the slide size when --slide-size is given")

    p = sub.add_parser("tile", parents=[common], help="tile annotated regions into patches")
    p.add_argument("--manifest")
    p.add_argument("--annotations")
    p.add_argument("--clinical")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--level", type=int, help="pyramid level (only 0 is supported)")

    p = sub.add_parser("build-bags", parents=[common], help="split cohorts and sample bags")
    p.add_argument("--N", type=int, help="instances per bag")
    p.add_argument("--M", type=int, help="bags per slide")
    p.add_argument("--attach-clinical", action="store_true")
    p.add_argument("--test-size", type=_size)
    p.add_argument("--val-size", type=_size)
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--n-classes", type=int, choices=(2, 3))

    p = sub.add_parser("train", parents=[common], help="train the attention MIL model")
    p.add_argument("--embedder")
    p.add_argument("--pretrained", action="store_true")
    p.add_argument("--freeze-backbone", action="store_true")
    p.add_argument("--toy-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr-max", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--t0", type=int)
    p.add_argument("--t-mult", type=int)
    p.add_argument("--batch-bags", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--class-weights", action="store_true")
    p.add_argument("--standardize", action="store_true",
                   help="scale instance features with training-bag statistics")

    p = sub.add_parser("predict", parents=[common], help="slide-level predictions for a cohort")
    p.add_argument("--cohort", default="test", choices=pipeline.COHORTS)
    p.add_argument("--model")
    p.add_argument("--aggregation", choices=("mean", "max", "median"))
    p.add_argument("--merge-logits", action="store_true")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("evaluate", parents=[common], help="metrics with confidence intervals")
    p.add_argument("--cohort", default="test", choices=pipeline.COHORTS)
    p.add_argument("--predictions")
    p.add_argument("--threshold", type=float)
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("compare-auc", parents=[common], help="DeLong test between two prediction files")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--truth", help="CSV slide_id,label (default: labels of --cohort in the workdir)")
    p.add_argument("--cohort", default="test", choices=pipeline.COHORTS)
    p.add_argument("--unpaired", action="store_true")

    p = sub.add_parser("heatmap", parents=[common], help="attention overlay for one slide")
    p.add_argument("slide_id")
    p.add_argument("--cohort", default="test", choices=pipeline.COHORTS)
    p.add_argument("--model")
    p.add_argument("--downsample", type=int, default=16)
    p.add_argument("--alpha-blend", type=float, default=0.5)

    p = sub.add_parser("nuclei", parents=[common], help="segment nuclei and build feature bags")
    p.add_argument("--max-patches", type=int)
    p.add_argument("--bins", type=int, default=10)

    p = sub.add_parser("feature-importance", parents=[common], help="rank morphometric features")
    p.add_argument("--mode", choices=("weights", "raw"), default="weights")
    p.add_argument("--p-adjust", choices=("holm", "none"), default="holm")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=300, dest="fi_epochs",
                   help="training epochs of the feature-attention model")
    return parser


def _size(text):
    value = float(text)
    return int(value) if value >= 1 and value.is_integer() else value


def cmd_synth(cfg, args):
    from .synthetic import SyntheticConfig, generate_synthetic_corpus

    out = Path(args.out or Path(cfg.workdir, "synth"))
    over = {k: getattr(args, k) for k in ("density_gap", "elongation_gap", "age_gap", "slide_size",
                                          "region_min", "region_max")
            if getattr(args, k) is not None}
    if args.slide_size is not None:
        over.setdefault("region_min", args.slide_size // 2)
        over.setdefault("region_max", args.slide_size * 5 // 8)
    sc = SyntheticConfig(n_slides=args.n, seed=cfg.seed, **over)
    paths = generate_synthetic_corpus(out, config=sc.null() if args.null else sc)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))


def cmd_tile(cfg, args):
    print(pipeline.tile(cfg))


def cmd_build_bags(cfg, args):
    for name, path in pipeline.build_bags(cfg).items():
        print(name, path)


def cmd_train(cfg, args):
    est = pipeline.train(cfg)
    print(f"best epoch {est.history_.best_epoch}, validation AUC {est.history_.best_val_auc}")


def cmd_predict(cfg, args):
    path, _ = pipeline.predict(cfg, args.cohort, args.model)
    print(path)


def cmd_evaluate(cfg, args):
    from .stats_eval import render_table

    report = pipeline.evaluate(cfg, args.cohort, args.predictions)
    print(render_table([((args.cohort,), report)], extra_header=("Cohort",)), end="")


def _truth(cfg, args):
    if args.truth:
        import pandas as pd

        df = pd.read_csv(args.truth, dtype={"slide_id": str})
        return dict(zip(df["slide_id"], df["label"].astype(int)))
    return pipeline.true_labels(cfg, args.cohort)


def cmd_compare_auc(cfg, args):
    from .inference import read_predictions
    from .stats_eval import delong_compare, delong_unpaired

    truth = _truth(cfg, args)
    a, b = read_predictions(args.a), read_predictions(args.b)

    def pos(df):
        return 1.0 - df.iloc[:, 1].to_numpy()  # p(any N+) = 1 - p_N0

    if args.unpaired:
        ya = np.array([int(truth[s] > 0) for s in a["slide_id"]])
        yb = np.array([int(truth[s] > 0) for s in b["slide_id"]])
        res = delong_unpaired(pos(a), ya, pos(b), yb)
    else:
        b = b.set_index("slide_id").loc[a["slide_id"]].reset_index()
        y = np.array([int(truth[s] > 0) for s in a["slide_id"]])
        res = delong_compare(pos(a), pos(b), y)
    print(json.dumps(res.to_dict(), indent=1))


def cmd_heatmap(cfg, args):
    from PIL import Image

    from . import bagging
    from .estimator import AttentionMILClassifier
    from .interpret import heatmap_export, render_overlay

    est = AttentionMILClassifier.load(args.model or Path(cfg.workdir, "model.ckpt"))
    bags = [b for b in bagging.read_bags(Path(cfg.workdir, "bags", f"{args.cohort}.jsonl"))
            if b.slide_id == args.slide_id]
    if not bags:
        raise ValueError(f"slide {args.slide_id} has no bags in cohort {args.cohort}")
    weights = est.attention(pipeline.to_bag_data(bags))
    tiled = pipeline.read_patch_index(cfg)[args.slide_id]
    layer = heatmap_export(args.slide_id, bags, weights, tiled, cfg.patch_size)
    record = next(r for r in pipeline.load_records(cfg) if r.slide_id == args.slide_id)
    out = Path(cfg.workdir, "heatmaps")
    out.mkdir(parents=True, exist_ok=True)
    with Image.open(record.image_uri) as im:
        render_overlay(im, layer, args.downsample, args.alpha_blend).save(out / f"{args.slide_id}.png")
    layer.save_json(out / f"{args.slide_id}.json")
    print(f"{out / args.slide_id}.png coverage={layer.coverage:.3f}")


def cmd_nuclei(cfg, args):
    from . import bagging, ingest
    from .interpret import save_feature_bags, write_nucleus_csv
    from .interpret.feature_bags import NucleusHistogramTransformer, measure_slide
    from .interpret.heatmap import patch_origin

    index = pipeline.read_patch_index(cfg)
    labels = {r.slide_id: ingest.label_code(r.label, 2) for r in pipeline.load_records(cfg)}
    cohort_file = Path(cfg.workdir, "cohorts.csv")
    train_ids = set(bagging.read_cohorts(cohort_file)["train"]) if cohort_file.exists() else set()
    slides, rows = [], []
    for sid in sorted(index):
        patches = {patch_origin(p): p for p in index[sid]}
        sm, r = measure_slide(sid, patches, labels.get(sid), max_patches=args.max_patches, seed=cfg.seed)
        slides.append(sm)
        rows.extend(r)
    out = Path(cfg.workdir, "nuclei")
    out.mkdir(parents=True, exist_ok=True)
    write_nucleus_csv(out / "nuclei.csv", rows)
    t = NucleusHistogramTransformer(args.bins).fit([s for s in slides if s.slide_id in train_ids] or slides)
    npz, idx = save_feature_bags(out / "feature_bags", t.transform(slides), t)
    print(f"{len(rows)} nuclei from {len(slides)} slides -> {npz}")


def cmd_feature_importance(cfg, args):
    from .interpret import load_feature_bags, rank_feature_importance

    bags, _ = load_feature_bags(Path(cfg.workdir, "nuclei", "feature_bags.npz"))
    report = rank_feature_importance(bags, mode=args.mode, n_folds=args.folds, seed=cfg.seed,
                                     p_adjust=args.p_adjust, epochs=args.fi_epochs)
    out = Path(cfg.workdir, "nuclei")
    (out / "importance.json").write_text(json.dumps(report.to_dict(), indent=1))
    (out / "importance.txt").write_text(report.render() + "\n")
    print(report.render())
    print(report.summary())


COMMANDS = {
    "synth": cmd_synth,
    "tile": cmd_tile,
    "build-bags": cmd_build_bags,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "compare-auc": cmd_compare_auc,
    "heatmap": cmd_heatmap,
    "nuclei": cmd_nuclei,
    "feature-importance": cmd_feature_importance,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        cfg = resolve_config(args)
    except (ValueError, FileNotFoundError) as exc:
        parser.print_usage(sys.stderr)
        print(f"amilpath: error: {exc}", file=sys.stderr)
        return 2
    workdir = Path(cfg.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    try:
        with FileLock(str(workdir / ".lock"), timeout=0):
            cfg.save()
            log.info("%s: config snapshot %s", args.command, workdir / "config.json")
            COMMANDS[args.command](cfg, args)
    except Timeout:
        print(f"amilpath: error: another run holds the lock on {workdir}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report and exit 1
        log.debug("traceback", exc_info=True)
        print(f"amilpath: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
