"""Command line for the xrvt pipeline: split, augment, train, cv, eval, predict, verify.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import checkpoint, config
from .augment import AugmentPlan, augment_dataset
from .baselines import KnnConfig, KNNClassifier, MajorityClassifier
from .dataset import (class_distribution, load_image, load_manifest, manifest_classes,
                      save_image, scan_tree, stratified_split_indices, write_manifest)
from .errors import ConfigError, DivergedError, XrvtError
from .metrics import report
from .models import build, forward, freeze, freeze_except, predict
from .tensor import no_grad, softmax
from .train import cross_validate, train_loop

log = logging.getLogger("xrvt")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_IMAGE_SIZE = 32


class UsageError(Exception):
    """Bad arguments detected after parsing (missing file, bad combination)."""


def _need_file(path, what):
    if path is None or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


@contextmanager
def _counted_warnings():
    """Collect warnings, echo them to stderr, and expose the count."""
    box = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        yield box
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    box.append(len(caught))


def _print_counts(title, labels, names):
    counts = class_distribution(labels, len(names))
    print(f"{title}: {int(counts.sum())}")
    for name, n in zip(names, counts):
        print(f"  {name}: {int(n)}")


def _write_report(rep, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(rep.to_json())
    (out / "report.txt").write_text(rep.to_text())
    (out / "confusion.csv").write_text(rep.confusion.to_csv())


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_split(args) -> int:
    classes, paths = scan_tree(args.data)
    if not classes or not paths:
        raise XrvtError(f"no class directories with images under {args.data}")
    index = {c: i for i, c in enumerate(classes)}
    labels = np.array([index[p.split("/", 1)[0]] for p in paths], dtype=np.int64)
    train, test = stratified_split_indices(labels, len(classes), args.test_frac, args.seed)
    d = Path(args.out) / "splits" / str(args.seed)
    write_manifest([paths[i] for i in train], d / "train.txt")
    write_manifest([paths[i] for i in test], d / "test.txt")
    write_manifest(classes, d / "classes.txt")
    (d / "root.txt").write_text(str(Path(args.data).resolve()) + "\n")
    _print_counts("train", labels[train], classes)
    _print_counts("test", labels[test], classes)
    print(f"wrote {d}")
    return EXIT_OK


def cmd_augment(args) -> int:
    manifest = _need_file(args.manifest, "manifest")
    plan = AugmentPlan(mode=args.mode, seed=args.seed)
    with _counted_warnings() as skipped:
        ds = load_manifest(manifest, args.root, args.size, np.float32)
    out = Path(args.out) / "augmented"
    aug = augment_dataset(ds, plan, workers=args.workers)
    for item in aug.images:
        save_image(item.pixels, out / item.source)
    write_manifest(aug.sources, out / "manifest.txt")
    write_manifest(aug.class_names, out / "classes.txt")
    if skipped[0]:
        print(f"skipped {skipped[0]} unreadable source image(s)", file=sys.stderr)
    print(f"{len(ds)} originals x {plan.multiplicity + 1} = {len(aug)} images -> {out / 'manifest.txt'}")
    return EXIT_OK


def _run_settings(args, class_names):
    values = config.load(args.config) if args.config else {}
    rs = config.settings(values, kind=args.model, seed=args.seed, source=args.config or "<defaults>")
    if "num_classes" in values and rs.spec.num_classes != len(class_names):
        raise ConfigError(f"config num_classes={rs.spec.num_classes} but the data has "
                          f"{len(class_names)} classes")
    rs.spec = dataclasses.replace(rs.spec, num_classes=len(class_names)).validate()
    return rs


def _prepare(rs):
    def apply(model):
        for pattern in rs.freeze:
            freeze(model, pattern)
        if rs.freeze_except:
            freeze_except(model, rs.freeze_except)
        return model
    return apply


def _load_for_training(args):
    manifest = _need_file(args.manifest, "manifest")
    rs = _run_settings(args, manifest_classes(manifest, args.root))
    with _counted_warnings():
        ds = load_manifest(manifest, args.root, (rs.spec.height, rs.spec.width), rs.spec.np_dtype)
    if len(ds) == 0:
        raise XrvtError(f"manifest {manifest} lists no readable images")
    return ds, rs


def cmd_train(args) -> int:
    ds, rs = _load_for_training(args)
    valid = None
    if args.valid_manifest:
        valid = load_manifest(_need_file(args.valid_manifest, "validation manifest"), args.root,
                              (rs.spec.height, rs.spec.width), rs.spec.np_dtype, ds.class_names)
    model = _prepare(rs)(build(rs.spec))

    def progress(epoch, hist):
        log.info("epoch %d loss %.6f acc %.4f", epoch, hist.train_loss[-1], hist.train_acc[-1])

    model, hist = train_loop(model, ds, valid, rs.train, on_epoch=progress)
    model.metadata["class_names"] = list(ds.class_names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(model, out / "checkpoint.xrvt")
    (out / "history.csv").write_text(hist.to_csv())
    print(f"trained {rs.spec.kind} for {len(hist)} epochs: loss {hist.train_loss[-1]:.6f}, "
          f"train accuracy {hist.train_acc[-1]:.4f}")
    print(f"wrote {out / 'checkpoint.xrvt'}")
    return EXIT_OK


def cmd_cv(args) -> int:
    ds, rs = _load_for_training(args)
    result = cross_validate(rs.spec, ds, args.folds, rs.train, prepare=_prepare(rs))
    out = Path(args.out) / "cv"
    y = ds.labels
    rows = ["fold,accuracy"]
    for f in result.folds:
        rep = report(f.predictions, y[f.valid_indices], ds.class_names)
        d = out / f"fold{f.fold}"
        _write_report(rep, d)
        (d / "history.csv").write_text(f.history.to_csv())
        rows.append(f"{f.fold},{f.accuracy!r}")
        print(f"fold {f.fold}: accuracy {f.accuracy:.4f} ({len(f.valid_indices)} images)")
    rows.append(f"mean,{result.mean_accuracy!r}")
    (out / "summary.csv").write_text("\n".join(rows) + "\n")
    print(f"mean accuracy over {args.folds} folds: {result.mean_accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = _need_file(args.manifest, "manifest")
    if args.checkpoint:
        model = checkpoint.load(_need_file(args.checkpoint, "checkpoint"))
        names = model.metadata.get("class_names")
        spec = model.spec
        ds = load_manifest(manifest, args.root, (spec.height, spec.width), spec.np_dtype, names)
        if len(ds.class_names) != spec.num_classes:
            raise XrvtError(f"checkpoint has {spec.num_classes} classes, data has {len(ds.class_names)}")
        preds = predict(model, ds.pixels(spec.np_dtype)) if len(ds) else np.zeros(0, np.int64)
    else:
        train_file = _need_file(args.train_manifest, "training manifest")
        train = load_manifest(train_file, args.root, args.size, np.float64)
        ds = load_manifest(manifest, args.root, args.size, np.float64, train.class_names)
        if args.model == "knn":
            clf = KNNClassifier(KnnConfig(args.k)).fit(train.pixels(), train.labels, len(train.class_names))
            preds = clf.predict(ds.pixels()) if len(ds) else np.zeros(0, np.int64)
        else:
            preds = MajorityClassifier().fit(train.labels, len(train.class_names)).predict(ds.images)
    rep = report(preds, ds.labels, ds.class_names)
    _write_report(rep, Path(args.out))
    print(rep.to_text(), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = checkpoint.load(_need_file(args.checkpoint, "checkpoint"))
    spec = model.spec
    img = load_image(_need_file(args.image, "image"), (spec.height, spec.width), spec.np_dtype)
    with no_grad():
        probs = softmax(forward(model, img[None]), axis=-1).data[0]
    names = model.metadata.get("class_names") or [f"class{i}" for i in range(spec.num_classes)]
    best = int(np.argmax(probs))
    print(names[best])
    for name, p in zip(names, probs):
        print(f"  {name}: {p:.6f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    if args.inject_fault:
        with verify.injected_fault(args.inject_fault):
            checks = verify.run_all(args.seed)
    else:
        checks = verify.run_all(args.seed)
    for c in checks:
        print(c.line(), flush=True)
    failed = [c.name for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_OK if not failed else EXIT_FAIL


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xrvt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", help="stratified train/test manifests from a class tree")
    s.add_argument("--data", required=True, help="root with one directory per class")
    s.add_argument("--test-frac", type=float, default=0.25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    a = sub.add_parser("augment", help="write originals plus augmented variants")
    a.add_argument("--manifest", required=True)
    a.add_argument("--mode", choices=("full", "reduced"), default="reduced")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--root", help="directory manifest paths are relative to")
    a.add_argument("--size", type=int, default=DEFAULT_IMAGE_SIZE, help="square image side")
    a.add_argument("--workers", type=int, default=1)
    a.set_defaults(func=cmd_augment)

    for name, func, helptext in (("train", cmd_train, "train one model"),
                                 ("cv", cmd_cv, "stratified k-fold cross-validation")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--manifest", required=True)
        t.add_argument("--model", choices=("cnn", "resnet", "vit"), required=True)
        t.add_argument("--config", help="key = value settings file")
        t.add_argument("--out", required=True)
        t.add_argument("--root")
        t.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        if name == "train":
            t.add_argument("--valid-manifest")
        else:
            t.add_argument("--folds", type=int, default=10)
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="score a model or baseline on a manifest")
    e.add_argument("--manifest", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--model", choices=("knn", "majority"))
    e.add_argument("--train-manifest", help="training data for knn/majority")
    e.add_argument("--k", type=int, default=30)
    e.add_argument("--size", type=int, default=DEFAULT_IMAGE_SIZE)
    e.add_argument("--root")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="classify one image")
    r.add_argument("--image", required=True)
    r.add_argument("--checkpoint", required=True)
    r.set_defaults(func=cmd_predict)

    v = sub.add_parser("verify", help="gradient checks and oracle equivalences")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--inject-fault", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    if args.command == "eval" and args.model and not args.train_manifest:
        print("xrvt eval: --model needs --train-manifest", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"xrvt {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedError as exc:
        print(f"xrvt {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (XrvtError, OSError) as exc:
        print(f"xrvt {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
