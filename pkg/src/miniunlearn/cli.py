"""``mini-unlearn`` command line: train, unlearn, retrain, evaluate, ablate-k."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datasets as dsets
from .errors import ConfigError, DataError, UnlearnError, UsageError
from .experiments import ablate_k, mia_experiment
from .hvp_lbfgs import DEFAULT_M
from .objective import Dataset, LossConfig, mean_loss, test_accuracy
from .storage import (
    FORMAT_VERSION,
    load_log,
    now_iso,
    read_array,
    save_log,
    write_array,
    write_json,
)
from .trainer import TrainConfig, init_training, retrain_oracle
from .unlearner import UnlearnSet, unlearn

log = logging.getLogger("miniunlearn")

THREADS_ENV = "MINI_UNLEARN_THREADS"
EVAL_COLUMNS = ("model", "population", "n", "accuracy", "precision", "recall", "attack_auc",
                "positives", "negatives", "attack_seed", "dataset_fingerprint")
ABLATE_COLUMNS = ("k", "accuracy", "delta_norm", "err_vs_full", "dist_to_retrain")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- data sources

def _pair(text: str, cast=float) -> tuple:
    parts = [s.strip() for s in text.split(",")]
    if len(parts) != 2:
        raise UsageError(f"expected two comma-separated values, got {text!r}")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError:
        raise UsageError(f"bad value in {text!r}") from None


def data_description(args) -> dict | None:
    """Canonical, JSON-serializable description of the dataset flags."""
    kinds = [k for k in ("synthetic", "libsvm", "csv", "mnist_pair") if getattr(args, k, None) is not None]
    if not kinds:
        return None
    kind = kinds[0]
    desc = {"source": kind.replace("_", "-"), "split_seed": args.split_seed}
    if kind == "synthetic":
        desc["spec"] = args.synthetic
        desc["row_l2_normalize"] = False  # the generator fixes row norms itself
    elif kind == "mnist_pair":
        desc["digits"] = list(_pair(args.mnist_pair, int))
        desc["path"] = str(Path(args.mnist_path).resolve()) if args.mnist_path else None
        desc["row_l2_normalize"] = not args.no_normalize
    else:
        desc["path"] = str(Path(getattr(args, kind)).resolve())
        desc["row_l2_normalize"] = not args.no_normalize
        desc["classes"] = list(_pair(args.classes)) if args.classes else None
        desc["positive_class"] = args.positive_class
        if kind == "csv":
            desc["label_column"] = args.label_column
        else:
            desc["n_features"] = args.n_features
    holdout = args.holdout_fraction
    if holdout is None:
        holdout = 0.2 if kind == "mnist_pair" else 0.0
    desc["holdout_fraction"] = holdout
    return desc


def load_data(desc: dict, loss_kind: str = "logistic") -> tuple[Dataset, Dataset | None]:
    """Materialize ``(train, holdout)`` from a description."""
    src = desc["source"]
    holdout = float(desc.get("holdout_fraction", 0.0))
    seed = int(desc.get("split_seed", 0))
    if src == "mnist-pair":
        return dsets.load_mnist_pair(tuple(desc["digits"]), desc.get("path"), desc["row_l2_normalize"],
                                     holdout, seed)
    if src == "synthetic":
        ds = dsets.generate_synthetic(dsets.SyntheticSpec.parse(desc["spec"]))
    elif src in ("libsvm", "csv"):
        binary = loss_kind == "logistic" and desc.get("positive_class") is None
        if src == "libsvm":
            ds = dsets.load_libsvm(desc["path"], desc.get("n_features"), desc.get("classes"), binary)
        else:
            ds = dsets.load_csv(desc["path"], desc.get("label_column", 0), desc.get("classes"), binary)
        if desc.get("positive_class") is not None:
            # One-vs-rest binarization for multi-class files.
            ds = Dataset(ds.features, (ds.labels == float(desc["positive_class"])).astype(np.float64))
        if desc.get("row_l2_normalize", True):
            ds = dsets.normalize_rows(ds)
    else:
        raise ConfigError(f"unknown data source {src!r}")
    if holdout > 0:
        train, test = dsets.train_test_split(ds, holdout, seed)
        return replace(train, sample_ids=None), test
    return ds, None


def _add_data_args(p: argparse.ArgumentParser, required: bool) -> None:
    g = p.add_argument_group("dataset")
    src = g.add_mutually_exclusive_group(required=required)
    src.add_argument("--synthetic", metavar="SPEC", help="e.g. n=500,p=10,seed=3,noise=0.1,kind=logistic")
    src.add_argument("--libsvm", metavar="PATH")
    src.add_argument("--csv", metavar="PATH", help="headerless numeric CSV")
    src.add_argument("--mnist-pair", metavar="A,B", help="binary MNIST digits, e.g. 0,1")
    g.add_argument("--mnist-path", metavar="PATH", help="MNIST libsvm file (default: bundled sample)")
    g.add_argument("--label-column", type=int, default=0)
    g.add_argument("--n-features", type=int)
    g.add_argument("--classes", metavar="NEG,POS", help="keep only these two labels")
    g.add_argument("--positive-class", type=float, help="one-vs-rest: this label is 1, others 0")
    g.add_argument("--no-normalize", action="store_true", help="skip per-row L2 normalization")
    g.add_argument("--holdout-fraction", type=float, help="held-out test share (mnist default 0.2)")
    g.add_argument("--split-seed", type=int, default=0)


def _add_unlearn_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("unlearn set")
    which = g.add_mutually_exclusive_group()
    which.add_argument("--unlearn-indices", metavar="FILE", help="row indices, whitespace separated")
    which.add_argument("--unlearn-ratio", type=float)
    g.add_argument("--seed", type=int, default=0, help="seed for --unlearn-ratio draws")


def _dataset_for(args, manifest: dict) -> tuple[Dataset, Dataset | None, dict]:
    desc = data_description(args) or manifest.get("data")
    if not desc:
        raise UsageError("no dataset flags given and the log manifest records none")
    train, test = load_data(desc, manifest["loss"])
    return train, test, desc


def read_indices(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"unlearn index file {path} not found")
    values = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        for tok in line.split("#", 1)[0].replace(",", " ").split():
            try:
                values.append(int(tok))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad index {tok!r}") from None
    return np.asarray(values, dtype=np.int64)


def _unlearn_set(args, n: int) -> tuple[UnlearnSet, dict]:
    if args.unlearn_indices:
        u = UnlearnSet(read_indices(args.unlearn_indices), n)
        return u, {"indices_file": str(Path(args.unlearn_indices).resolve()), "count": len(u)}
    if args.unlearn_ratio is None:
        raise UsageError("one of --unlearn-indices or --unlearn-ratio is required")
    u = UnlearnSet.from_ratio(args.unlearn_ratio, n, args.seed)
    return u, {"ratio": args.unlearn_ratio, "seed": args.seed, "count": len(u)}


def _threads(args) -> int:
    if args.threads is not None:
        t = args.threads
    else:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            t = int(raw)
        except ValueError:
            raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if t < 1:
        raise UsageError("thread count must be >= 1")
    return t


def _load_model(path) -> np.ndarray:
    path = Path(path)
    if path.is_dir():
        for name in ("w_star.f64", "w.f64", "final_w.f64"):
            if (path / name).is_file():
                return read_array(path / name)
        raise DataError(f"{path}: no w_star.f64, w.f64 or final_w.f64")
    return read_array(path)


def _write_rows(rows: list[dict], columns, fmt: str, out) -> None:
    if fmt == "json":
        text = "".join(json.dumps({c: r.get(c) for c in columns}, sort_keys=False) + "\n" for r in rows)
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: ("" if r.get(c) is None else _fmt(r[c])) for c in columns})
        text = buf.getvalue()
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    desc = data_description(args)
    loss_kind = args.loss or (dsets.SyntheticSpec.parse(desc["spec"]).kind if desc["source"] == "synthetic"
                              else "logistic")
    train, _ = load_data(desc, loss_kind)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      history_k=args.k, seed=args.train_seed, loss=LossConfig(loss_kind, args.l2),
                      strict=args.strict)
    w, tlog = init_training(train, cfg)
    save_log(tlog, args.out, train.n, train.p, desc)
    _emit({"out": str(args.out), "steps_logged": tlog.k, "n": train.n, "p": train.p,
           "train_loss": mean_loss(w, train, cfg.loss)})
    return 0


def _run_manifest(command: str, extra: dict) -> dict:
    return {"format_version": FORMAT_VERSION, "command": command, "created_at": now_iso(), **extra}


def cmd_unlearn(args) -> int:
    tlog, man = load_log(args.log)
    train, _, _ = _dataset_for(args, man)
    uset, udesc = _unlearn_set(args, train.n)
    threads = _threads(args)
    res = unlearn(tlog, train, uset, args.k, mode=args.mode, backing=args.backing, m=args.m,
                  conjugate=args.conjugate_pairs, threads=threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_array(out / "delta_w.f64", res.delta_w)
    write_array(out / "w_star.f64", res.unlearned_w)
    write_array(out / "unlearned.u32", uset.indices, "<u4")
    result = {"k": res.k_used, "mode": res.mode, "backing": res.backing, "m": args.m,
              "conjugate_pairs": args.conjugate_pairs, "r": _num(res.r_estimate), "bound": _num(res.bound),
              "delta_norm": float(np.linalg.norm(res.delta_w)), "unlearn": udesc,
              "dataset_fingerprint": tlog.dataset_fingerprint}
    write_json(out / "result.json", result)
    # Timing and thread count vary between runs; they live in the manifest.
    write_json(out / "manifest.json", _run_manifest("unlearn", {"seconds": res.seconds, "threads": threads,
                                                                "log": str(Path(args.log).resolve())}))
    _emit({"out": str(out), **result, "seconds": res.seconds})
    return 0


def _num(x: float):
    return None if not np.isfinite(x) else float(x)


def cmd_retrain(args) -> int:
    tlog, man = load_log(args.log)
    train, _, _ = _dataset_for(args, man)
    tlog.check_dataset(train)
    uset, udesc = _unlearn_set(args, train.n)
    started = time.perf_counter()
    w = retrain_oracle(train, uset, tlog.config)
    seconds = time.perf_counter() - started
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_array(out / "w.f64", w)
    write_array(out / "unlearned.u32", uset.indices, "<u4")
    result = {"unlearn": udesc, "dataset_fingerprint": tlog.dataset_fingerprint,
              "train_loss": mean_loss(w, train, tlog.config.loss)}
    write_json(out / "result.json", result)
    write_json(out / "manifest.json", _run_manifest("retrain", {"seconds": seconds,
                                                                "log": str(Path(args.log).resolve())}))
    _emit({"out": str(out), **result, "seconds": seconds})
    return 0


def _test_set(args, desc: dict, holdout: Dataset | None, loss_kind: str, p: int) -> Dataset | None:
    if not args.test:
        return holdout
    classes = list(_pair(args.classes)) if args.classes else desc.get("classes")
    if desc["source"] == "mnist-pair" and classes is None:
        classes = desc["digits"]
    tdesc = {"source": "csv" if Path(args.test).suffix == ".csv" else "libsvm",
             "path": str(Path(args.test).resolve()), "holdout_fraction": 0.0, "n_features": p,
             "row_l2_normalize": desc.get("row_l2_normalize", True), "label_column": args.label_column,
             "classes": classes, "positive_class": args.positive_class or desc.get("positive_class")}
    return load_data(tdesc, loss_kind)[0]


def cmd_evaluate(args) -> int:
    tlog, man = load_log(args.log)
    train, holdout, desc = _dataset_for(args, man)
    tlog.check_dataset(train)
    cfg = tlog.config
    test = _test_set(args, desc, holdout, cfg.loss.kind, train.p)
    models = {"original": np.asarray(tlog.final_w)}
    for spec in args.model or []:
        name, sep, path = spec.partition("=")
        if not sep or not name:
            raise UsageError(f"--model expects NAME=PATH, got {spec!r}")
        w = _load_model(path)
        if w.size != train.p:
            raise DataError(f"model {name!r} has {w.size} parameters, dataset has p={train.p}")
        models[name] = w
    base = {"attack_seed": None, "dataset_fingerprint": tlog.dataset_fingerprint}
    rows = []
    if test is None and args.unlearn_ratio is None and not args.unlearn_indices:
        raise UsageError("nothing to evaluate: no test set and no unlearn set")
    if cfg.loss.kind != "logistic":
        raise UsageError("evaluate reports accuracy and attack metrics for logistic models only")
    if test is not None:
        if test.p != train.p:
            raise DataError(f"test set has p={test.p}, training set p={train.p}")
        for name, w in models.items():
            rows.append({**base, "model": name, "population": "test", "n": test.n,
                         "accuracy": test_accuracy(w, test, cfg.loss)})
    if args.unlearn_ratio is not None or args.unlearn_indices:
        if test is None:
            raise UsageError("attack metrics need a holdout set (--holdout-fraction at train time or --test)")
        uset, _ = _unlearn_set(args, train.n)
        if len(uset) == 0:
            raise ConfigError("unlearned population is empty")
        reports, _, split = mia_experiment(tlog, train, test, uset, models, args.attack_seed)
        pops = {"unlearned": train.subset(uset.indices), "retained": train.subset(split.eval_retained)}
        for name, w in models.items():
            rep = reports[name]
            for pop, (prec, rec) in (("unlearned", (rep.precision_unlearned, rep.recall_unlearned)),
                                     ("retained", (rep.precision_retained, rep.recall_retained))):
                c = rep.counts[pop]
                rows.append({**base, "model": name, "population": pop, "n": pops[pop].n,
                             "accuracy": test_accuracy(w, pops[pop], cfg.loss), "precision": prec,
                             "recall": rec, "attack_auc": rep.attack_auc, "positives": c["positives"],
                             "negatives": c["negatives"], "attack_seed": args.attack_seed})
    _write_rows(rows, EVAL_COLUMNS, args.format, args.out)
    return 0


def cmd_ablate_k(args) -> int:
    tlog, man = load_log(args.log)
    train, holdout, desc = _dataset_for(args, man)
    tlog.check_dataset(train)
    uset, _ = _unlearn_set(args, train.n)
    try:
        ks = [int(s) for s in args.ks.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--ks expects comma-separated integers, got {args.ks!r}") from None
    if not ks:
        raise UsageError("--ks is empty")
    test = holdout if tlog.config.loss.kind == "logistic" else None
    ref = retrain_oracle(train, uset, tlog.config) if args.with_retrain else None
    kw = dict(mode=args.mode, backing=args.backing, m=args.m, conjugate=args.conjugate_pairs,
              threads=_threads(args))
    rows = ablate_k(tlog, train, uset, ks, test=test, reference_w=ref, **kw)
    _write_rows(rows, ABLATE_COLUMNS, args.format, args.out)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mini-unlearn", description="Unlearning from the last k SGD steps.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train with SGD and persist the last-k history")
    _add_data_args(p, required=True)
    p.add_argument("--epochs", type=int, required=True, help="number of SGD steps")
    p.add_argument("--batch-size", type=int, required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--l2", type=float, default=0.005)
    p.add_argument("--k", type=int, required=True, help="history steps to keep")
    p.add_argument("--seed", dest="train_seed", type=int, default=0, help="batch sampling seed")
    p.add_argument("--loss", choices=("logistic", "quadratic"))
    p.add_argument("--strict", action="store_true", help="reject eta*L >= 1 instead of warning")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    def with_log(p):
        p.add_argument("--log", required=True, help="training log directory")
        _add_data_args(p, required=False)
        _add_unlearn_args(p)

    def with_engine(p):
        p.add_argument("--mode", choices=("horner", "parallel"), default="horner")
        p.add_argument("--backing", choices=("auto", "exact", "lbfgs"), default="auto")
        p.add_argument("--m", type=int, default=DEFAULT_M, help="secant pairs for lbfgs backing")
        p.add_argument("--conjugate-pairs", action="store_true")
        p.add_argument("--threads", type=int, help=f"parallel task pool size (env {THREADS_ENV})")

    p = sub.add_parser("unlearn", help="compute the unlearning correction")
    with_log(p)
    with_engine(p)
    p.add_argument("--k", type=int, help="steps of history to use (default: all logged)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("retrain", help="retrain without the unlearned rows (same batch draws)")
    with_log(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("evaluate", help="accuracy and membership-inference metrics")
    with_log(p)
    p.add_argument("--model", action="append", metavar="NAME=PATH",
                   help="model artifact directory or .f64 file; repeatable")
    p.add_argument("--test", metavar="PATH", help="test file (.csv or libsvm)")
    p.add_argument("--attack-seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-k", help="accuracy and error against k")
    with_log(p)
    with_engine(p)
    p.add_argument("--ks", default="2,4,6,8,10")
    p.add_argument("--with-retrain", action="store_true", help="add distance to the retrained model")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate_k)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            warnings.showwarning = _warn_json
            return args.func(args)
    except UnlearnError as exc:
        _error(exc.code, str(exc))
        return exc.exit_code
    except OSError as exc:
        _error("io", str(exc))
        return 3


def _error(code: str, message: str) -> None:
    sys.stderr.write(json.dumps({"code": code, "error": message}) + "\n")


def _warn_json(message, category, filename, lineno, file=None, line=None):
    sys.stderr.write(json.dumps({"code": "warning", "warning": str(message)}) + "\n")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
