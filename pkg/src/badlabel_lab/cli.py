"""Command-line entry point: ``badlabel-lab <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data/file error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import datasets, dividemix, metrics, nn, noise, training
from .config import RunConfig, describe_keys
from .errors import ConfigError, DataError, LabError

log = logging.getLogger("badlabel_lab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _add_set(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="badlabel-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen-data", help="write a dataset directory")
    p.add_argument("--kind", choices=["synthetic3", "mnist-idx"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1000, help="training samples per class (test gets half)")
    p.add_argument("--std", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.add_argument("--limit", type=int)

    p = sub.add_parser("gen-noise", help="corrupt the training labels of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--kind", choices=["symmetric", "asymmetric", "idn", "badlabel"], required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="BadLabel crafting epochs")
    p.add_argument("--alpha", type=float, help="BadLabel flag step size")
    p.add_argument("--lr", type=float, help="BadLabel crafting learning rate")
    p.add_argument("--arch", help="hidden widths of the crafting network, e.g. 64,64")
    _add_set(p)

    p = sub.add_parser("inspect", help="audit a noisy label file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--noise", required=True)
    p.add_argument("--transition-matrix", metavar="OUT")
    p.add_argument("--loss-dist", metavar="OUT")
    p.add_argument("--model", help="checkpoint used for per-sample losses")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--auc", action="store_true")

    p = sub.add_parser("train", help="train on noisy labels")
    p.add_argument("--dataset", required=True)
    p.add_argument("--noise", required=True)
    p.add_argument("--method", choices=["standard", "robust-dividemix"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-bayes-gmm", action="store_true")
    p.add_argument("--no-perturbation", action="store_true")
    p.add_argument("--no-filtering", action="store_true")
    _add_set(p)

    p = sub.add_parser("eval", help="test accuracy of one checkpoint or a pair")
    p.add_argument("--model", required=True, help="CKPT or CKPT1,CKPT2")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["test", "train"], default="test")

    sub.add_parser("config-keys", help="list every config key with its default")
    return parser


def _resolve(args, overrides: dict) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = value.strip()
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    return cfg


def _labels_for(path, train: datasets.Dataset) -> datasets.NoisyLabels:
    labels = datasets.load_labels(path, train.n_classes)
    if len(labels) != len(train) or not np.array_equal(np.sort(labels.index), np.arange(len(train))):
        raise DataError(f"{path}: indices do not cover the {len(train)} training samples")
    if not np.array_equal(labels.clean[np.argsort(labels.index)], train.y):
        raise DataError(f"{path}: clean labels disagree with the dataset")
    order = np.argsort(labels.index)
    return datasets.NoisyLabels(labels.index[order], labels.clean[order], labels.noisy[order],
                                labels.n_classes, labels.kind, labels.ratio, labels.seed)


def cmd_gen_data(args) -> int:
    if args.kind == "synthetic3":
        spec = datasets.SyntheticSpec(std=args.std, n_train_per_class=args.n,
                                      n_test_per_class=args.n // 2, seed=args.seed)
        train, test = datasets.gen_synthetic(spec)
        meta = {"kind": "synthetic3", "std": args.std, "n_per_class": args.n, "seed": args.seed}
    else:
        if not (args.images and args.labels):
            raise ConfigError("mnist-idx needs --images and --labels")
        train = datasets.load_idx(args.images, args.labels, args.limit)
        test = None
        if args.test_images and args.test_labels:
            test = datasets.load_idx(args.test_images, args.test_labels, args.limit)
            test.split = "test"
        meta = {"kind": "mnist-idx", "limit": args.limit}
    datasets.save_dataset_dir(args.out, train, test, **meta)
    print(f"wrote {len(train)} train" + (f" / {len(test)} test" if test else "") + f" rows to {args.out}")
    return 0


def cmd_gen_noise(args) -> int:
    train, _ = datasets.load_dataset_dir(args.dataset)
    cfg = _resolve(args, {
        "seed": args.seed, "badlabel.epochs": args.epochs, "badlabel.alpha": args.alpha,
        "badlabel.lr": args.lr, "badlabel.hidden": args.arch,
    })
    seed = cfg["seed"]
    if args.kind == "badlabel":
        labels, _ = noise.craft_badlabel(train, args.ratio, cfg.badlabel())
    elif args.kind == "idn":
        labels = noise.apply_idn(train, args.ratio, seed, std=cfg["idn.std"])
    else:
        labels = noise.make_noise(args.kind, train, args.ratio, seed)
    out = Path(args.out)
    datasets.save_labels(out, labels)
    cfg.write(f"{out}.config")
    print(f"{args.kind}: flipped {int(labels.flipped.sum())} of {len(labels)} "
          f"(rate {noise.noise_rate(labels):.4f}) -> {out}")
    return 0


def cmd_inspect(args) -> int:
    train, _ = datasets.load_dataset_dir(args.dataset)
    labels = _labels_for(args.noise, train)
    M = noise.transition_matrix(labels)
    report = {"kind": labels.kind, "n": len(labels), "noise_rate": noise.noise_rate(labels)}
    if args.transition_matrix:
        noise.write_transition_csv(args.transition_matrix, M)
    if args.loss_dist or args.auc:
        if not args.model:
            raise ConfigError("--loss-dist and --auc need --model")
        model = nn.load_checkpoint(args.model)
        losses = nn.per_sample_loss(model, train.X, labels.noisy)
        clean = ~labels.flipped
        if args.loss_dist:
            metrics.write_histogram_csv(args.loss_dist, metrics.loss_histogram(losses, clean, args.bins))
        if args.auc:
            report["auc"] = metrics.separability_auc(losses, clean)
    print(json.dumps(report, sort_keys=True))
    print("transition matrix (rows clean, columns noisy):")
    for c, row in enumerate(M):
        print(f"  {c}: " + " ".join(f"{v:.3f}" for v in row))
    return 0


def cmd_train(args) -> int:
    train, test = datasets.load_dataset_dir(args.dataset)
    labels = _labels_for(args.noise, train)
    cfg = _resolve(args, {
        "seed": args.seed,
        "rdm.use_bayes_gmm": False if args.no_bayes_gmm else None,
        "rdm.use_perturbation": False if args.no_perturbation else None,
        "rdm.use_filtering": False if args.no_filtering else None,
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.txt")
    test_pair = (test.X, test.y) if test is not None else None
    if args.method == "standard":
        model, run_metrics = training.train_standard(
            train.X, labels.noisy, cfg.standard(), test=test_pair, n_classes=train.n_classes)
        nn.save_checkpoint(model, out / "model.ckpt")
    else:
        pair, run_metrics = dividemix.run(
            train.X, labels.noisy, cfg.divide(), test=test_pair,
            clean_mask=~labels.flipped, n_classes=train.n_classes, n_jobs=args.n_jobs)
        for k, model in enumerate(pair.models, start=1):
            nn.save_checkpoint(model, out / f"model{k}.ckpt")
    run_metrics.write_csv(out / "metrics.csv")
    summary = {"method": args.method, "epochs": len(run_metrics.records)}
    if test is not None:
        summary["best"], summary["last"] = metrics.track(run_metrics)
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    train, test = datasets.load_dataset_dir(args.dataset)
    ds = train if args.split == "train" else test
    if ds is None:
        raise DataError(f"{args.dataset}: no {args.split} split")
    paths = [p for p in args.model.split(",") if p]
    if not 1 <= len(paths) <= 2:
        raise ConfigError("--model takes one checkpoint or two separated by a comma")
    models = [nn.load_checkpoint(p) for p in paths]
    if len(models) == 2:
        pair = dividemix.PairState(models, [], [])
        pred = dividemix.joint_predict(pair, ds.X)
    else:
        pred = nn.predict_proba(models[0], ds.X).argmax(axis=1)
    acc = float(np.mean(pred == ds.y))
    print(json.dumps({"accuracy": acc, "n": len(ds), "split": args.split}))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "gen-noise": cmd_gen_noise,
    "inspect": cmd_inspect,
    "train": cmd_train,
    "eval": cmd_eval,
    "config-keys": lambda args: print(describe_keys()) or 0,
}


def _thread_limit() -> int | None:
    raw = os.environ.get("BADLABEL_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"BADLABEL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"BADLABEL_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.n_jobs = _thread_limit() or 1
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        # BADLABEL_THREADS caps worker threads; BLAS stays single-threaded so
        # floating-point results never depend on it
        with threadpool_limits(limits=1, user_api="blas"):
            return COMMANDS[args.command](args)
    except LabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
