"""Command-line entry point: prepare, train, eval and report.

Each command reads an optional JSON config (``--config``); flags override
file values and the merged result is echoed into the output directory as
``config.json``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .data_io import (Dataset, ImbalanceSpec, augment_mirror_rotate, load_idx,
                      make_imbalanced, save_idx, synth_blobs)
from .dualhead_net import (NetworkConfig, embed_all, load_checkpoint, predict_proba,
                           save_checkpoint)
from .evaluation import evaluate_posteriors, knn_posteriors, logistic_probe, pr_curve
from .trainer import TrainPlan, train_dos, train_stl

DEFAULTS = {
    "seed": 0,
    "data": {
        "source": "synth",
        # synthetic blobs
        "n_classes": 10, "train_per_class": 600, "test_per_class": 100,
        "dims": [1, 28, 28], "separation": 3.0, "spread": 1.0, "latent_dim": 16,
        "centroid_seed": None,
        # IDX files (source = "idx")
        "train_images": None, "train_labels": None,
        "test_images": None, "test_labels": None,
    },
    "imbalance": {"mode": "random-classes", "minority_count": 4, "p": 0.9,
                  "overall_rate": 0.0},
    "augment": 1,
    "network": {"learning_rate": 0.05, "alpha": 0.02},
    "plan": {"k_mnr": 5, "k_mjr": 0, "r": None, "rounds": 3, "epochs_per_round": 1,
             "stl_epochs": 5, "baseline_epochs": None},
    "eval": {"knn_k": 5, "probe": True},
}

TRAIN_FILES = ("train-images.idx", "train-labels.idx")
TEST_FILES = ("test-images.idx", "test-labels.idx")
EVALUATORS = ("softmax", "knn", "lr")


class ConfigError(ValueError):
    pass


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg = merge(cfg, json.load(fh))
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from None
    flags = {
        "seed": ("seed",), "k_mnr": ("plan", "k_mnr"), "k_mjr": ("plan", "k_mjr"),
        "r": ("plan", "r"), "rounds": ("plan", "rounds"), "alpha": ("network", "alpha"),
        "reduction_rate": ("imbalance", "p"), "minority_count": ("imbalance", "minority_count"),
        "precision": ("network", "precision"), "mode": ("mode",),
    }
    for name, path in flags.items():
        value = getattr(args, name, None)
        if value is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    if cfg.get("seed") is None:
        raise ConfigError("a seed is required")
    return cfg


def echo_config(cfg: dict, out: Path) -> None:
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# -- prepare ----------------------------------------------------------------
def _source_datasets(cfg: dict) -> tuple:
    data, seed = cfg["data"], int(cfg["seed"])
    if data["source"] == "synth":
        n = int(data["n_classes"])
        kw = dict(dims=tuple(data["dims"]), separation=float(data["separation"]),
                  spread=float(data["spread"]), latent_dim=data["latent_dim"],
                  centroid_seed=seed if data["centroid_seed"] is None
                  else int(data["centroid_seed"]))
        train = synth_blobs(n, [int(data["train_per_class"])] * n, seed=seed, **kw)
        test = synth_blobs(n, [int(data["test_per_class"])] * n, seed=seed + 1_000_003, **kw)
        return train, test
    if data["source"] == "idx":
        paths = [data[k] for k in ("train_images", "train_labels", "test_images",
                                   "test_labels")]
        missing = [p for p in paths if not p or not Path(p).exists()]
        if missing:
            raise ConfigError(f"IDX paths not found: {missing}")
        train = load_idx(paths[0], paths[1])
        test = load_idx(paths[2], paths[3], n_classes=train.n_classes)
        return train, test
    raise ConfigError(f"unknown data source {data['source']!r}")


def cmd_prepare(args) -> None:
    cfg = load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = _source_datasets(cfg)
    imb = cfg["imbalance"]
    spec = ImbalanceSpec(mode=imb["mode"], minority_count=int(imb["minority_count"]),
                         p=float(imb["p"]), overall_rate=float(imb["overall_rate"]),
                         seed=int(cfg["seed"]))
    train = make_imbalanced(train, spec)
    if int(cfg["augment"]) > 1:
        train = augment_mirror_rotate(train, int(cfg["augment"]), int(cfg["seed"]))
    save_idx(train, out / TRAIN_FILES[0], out / TRAIN_FILES[1])
    save_idx(test, out / TEST_FILES[0], out / TEST_FILES[1])
    manifest = train.manifest(seed=cfg["seed"])
    manifest += f"test_samples: {len(test)}\n"
    (out / "manifest.txt").write_text(manifest)
    echo_config(cfg, out)


def read_prepared(data_dir) -> tuple:
    """``(train, test)`` from a prepared directory, minority flags restored."""
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.txt"
    if not manifest.exists():
        raise ConfigError(f"{data_dir} is not a prepared dataset (no manifest.txt)")
    fields = dict(line.split(": ", 1) for line in manifest.read_text().splitlines()
                  if ": " in line)
    n_classes = int(fields["classes"])
    minority = () if fields["minority_classes"] == "-" else \
        tuple(int(c) for c in fields["minority_classes"].split(","))
    train = load_idx(data_dir / TRAIN_FILES[0], data_dir / TRAIN_FILES[1], n_classes)
    test = load_idx(data_dir / TEST_FILES[0], data_dir / TEST_FILES[1], n_classes)
    train.minority_classes = test.minority_classes = minority
    return train, test


# -- train ------------------------------------------------------------------
def network_config(cfg: dict, dataset: Dataset) -> NetworkConfig:
    net = dict(cfg["network"])
    net.setdefault("input_shape", list(dataset.input_shape))
    net.setdefault("n_classes", dataset.n_classes)
    try:
        return NetworkConfig(**net)
    except TypeError as err:
        raise ConfigError(f"bad network config: {err}") from None


def train_plan(cfg: dict, dataset: Dataset) -> TrainPlan:
    p = cfg["plan"]
    r = None
    if p.get("r") is not None:
        r = {c: (int(p["r"]) if c in dataset.minority_classes else 1)
             for c in range(dataset.n_classes)}
    return TrainPlan(k_mnr=int(p["k_mnr"]), k_mjr=int(p["k_mjr"]), r_per_class=r,
                     rounds=int(p["rounds"]), epochs_per_round=int(p["epochs_per_round"]),
                     stl_epochs=int(p["stl_epochs"]), seed=int(cfg["seed"])).validate()


def cmd_train(args) -> None:
    cfg = load_config(args)
    mode = cfg.get("mode") or "dos"
    if mode not in ("stl", "dos"):
        raise ConfigError(f"unknown mode {mode!r}")
    cfg["mode"] = mode
    train, _ = read_prepared(args.data)
    cfg["data_dir"] = str(args.data)
    prepared = Path(args.data) / "config.json"
    if prepared.exists():
        cfg["imbalance"] = json.loads(prepared.read_text()).get("imbalance", cfg["imbalance"])
    config = network_config(cfg, train)
    plan = train_plan(cfg, train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    model = out / "model.dosm"
    partial = out / "model.dosm.partial"
    with open(out / "progress.log", "w") as log:
        def progress(record):
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()
        try:
            if mode == "stl":
                epochs = cfg["plan"].get("baseline_epochs")
                if epochs is None:
                    epochs = plan.stl_epochs + plan.rounds * plan.epochs_per_round
                params = train_stl(config, train, int(epochs), plan.seed, progress=progress)
            else:
                params = train_dos(config, train, plan, progress=progress)
            save_checkpoint(partial, config, params)
            os.replace(partial, model)
        except BaseException:
            for p in (partial, model):
                if p.exists():
                    p.unlink()
            raise


# -- eval -------------------------------------------------------------------
def _fmt(v) -> str:
    return "nan" if np.isnan(v) else f"{float(v):.9g}"


def write_posteriors(path, posteriors, truths) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label"] + [f"p{c}" for c in range(posteriors.shape[1])])
        for i, (row, y) in enumerate(zip(posteriors, truths)):
            w.writerow([i, int(y)] + [_fmt(v) for v in row])


def write_pr_curves(path, posteriors, truths) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "recall", "precision", "threshold"])
        for c in range(posteriors.shape[1]):
            if not np.any(truths == c):
                continue
            for rec, prec, thr in zip(*pr_curve(posteriors[:, c], truths == c)):
                w.writerow([c, _fmt(rec), _fmt(prec), _fmt(thr)])


def cmd_eval(args) -> None:
    cfg = load_config(args)
    config, params = load_checkpoint(args.model)
    train, test = read_prepared(args.data)
    if test.input_shape != config.input_shape or test.n_classes != config.n_classes:
        raise ConfigError(f"checkpoint expects {config.input_shape} with "
                          f"{config.n_classes} classes, data has {test.input_shape} "
                          f"with {test.n_classes}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    posteriors, timings = {}, {}
    start = time.perf_counter()
    posteriors["softmax"] = predict_proba(config, params, test.x)
    timings["softmax"] = time.perf_counter() - start
    start = time.perf_counter()
    train_v = embed_all(config, params, train.x)
    test_v = embed_all(config, params, test.x)
    timings["embed"] = time.perf_counter() - start
    start = time.perf_counter()
    posteriors["knn"] = knn_posteriors(train_v, train.y, test_v, int(cfg["eval"]["knn_k"]),
                                       n_classes=config.n_classes)
    timings["knn"] = time.perf_counter() - start
    if cfg["eval"]["probe"]:
        start = time.perf_counter()
        posteriors["lr"] = logistic_probe(train_v, train.y, test_v, config.n_classes)
        timings["lr"] = time.perf_counter() - start
    tables = []
    for name, post in posteriors.items():
        report = evaluate_posteriors(name, post, test.y, config.n_classes,
                                     test.minority_classes)
        report.timings = {"seconds": timings[name]}
        (out / f"metrics-{name}.csv").write_text(report.to_csv())
        write_posteriors(out / f"posteriors-{name}.csv", post, test.y)
        write_pr_curves(out / f"pr-{name}.csv", post, test.y)
        tables.append(report.to_table())
    (out / "metrics.txt").write_text("\n".join(tables))


# -- report -----------------------------------------------------------------
def read_progress(run: Path) -> list:
    path = run / "progress.log"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def group_f1_auprc(path: Path) -> tuple:
    """``(minority f1, majority f1, minority auprc, majority auprc)`` means."""
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for column in ("f1", "auprc"):
        for group in ("minority", "majority"):
            vals = [float(r[column]) for r in rows if r["group"] == group]
            out.append(float(np.nanmean(vals)) if vals else float("nan"))
    return tuple(out)


def overhead_ratio(runs: list) -> tuple:
    """``(mean DOS round seconds, mean STL epoch seconds, ratio)``.

    STL epoch timings come from STL-mode runs when present, otherwise from the
    initialization epochs of DOS runs.
    """
    stl_runs = [recs for mode, recs in runs if mode == "stl"] or [recs for _, recs in runs]
    stl = [r["seconds"] for recs in stl_runs for r in recs if r["kind"] == "stl_epoch"]
    dos = [r["seconds"] for _, recs in runs for r in recs if r["kind"] == "dos_round"]
    if not stl or not dos:
        return None
    a, b = float(np.mean(dos)), float(np.mean(stl))
    return a, b, a / b


def run_key(cfg: dict) -> tuple:
    mode = cfg.get("mode", "?")
    k = cfg.get("plan", {}).get("k_mnr", "-") if mode == "dos" else "-"
    return mode, cfg.get("imbalance", {}).get("p", "-"), k


def cmd_report(args) -> None:
    groups, runs, skipped = {}, [], []
    for run in map(Path, args.runs):
        cfg_path = run / "config.json"
        if not cfg_path.exists():
            skipped.append(f"{run}: no config.json")
            continue
        cfg = json.loads(cfg_path.read_text())
        runs.append((cfg.get("mode", "?"), read_progress(run)))
        for name in EVALUATORS:
            path = run / f"metrics-{name}.csv"
            if not path.exists():
                skipped.append(f"{run}: no metrics-{name}.csv")
                continue
            groups.setdefault(run_key(cfg) + (name,), []).append(group_f1_auprc(path))
    for note in skipped:
        print(f"warning: skipped {note}", file=sys.stderr)
    if not groups and not runs:
        raise ConfigError("no completed runs to report")
    lines = [f"{'mode':<5} {'p':>6} {'k':>3} {'evaluator':<9} {'runs':>4} {'mnr_f1':>7} "
             f"{'mjr_f1':>7} {'mnr_auprc':>9} {'mjr_auprc':>9}"]
    for (mode, p, k, name), rows in sorted(groups.items(), key=lambda kv: str(kv[0])):
        means = np.nanmean(np.array(rows), axis=0)
        lines.append(f"{mode:<5} {str(p):>6} {str(k):>3} {name:<9} {len(rows):>4} "
                     + " ".join(f"{v:{w}.3f}" for v, w in zip(means, (7, 7, 9, 9))))
    ratio = overhead_ratio(runs)
    lines.append("")
    if ratio is None:
        lines.append("overhead: n/a (needs STL epoch and DOS round timings)")
    else:
        lines.append(f"mean DOS round: {ratio[0]:.3f}s; mean STL epoch: {ratio[1]:.3f}s; "
                     f"overhead ratio: {ratio[2]:.3f}")
    lines += [f"skipped: {note}" for note in skipped]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
    sys.stdout.write(text)


# -- entry point --------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deep-oversampling",
                                     description="Deep over-sampling experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("prepare", help="build the imbalanced dataset")
    common(p)
    p.add_argument("--reduction-rate", type=float, help="removal fraction p for minority classes")
    p.add_argument("--minority-count", type=int)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a baseline (stl) or DOS model")
    common(p)
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--mode", choices=("stl", "dos"))
    p.add_argument("--k-mnr", type=int)
    p.add_argument("--k-mjr", type=int)
    p.add_argument("--r", type=int, help="over-sampling size for minority classes")
    p.add_argument("--rounds", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the prepared test set")
    common(p)
    p.add_argument("--model", required=True, help="checkpoint (.dosm)")
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare runs and report the run-time overhead")
    p.add_argument("runs", nargs="+", help="run directories (train and eval outputs)")
    p.add_argument("--out", help="directory for report.txt")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError, FloatingPointError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
