"""Command-line experiment runner.

``depict run`` trains one strategy on one dataset for one or more seeds and
writes, under the output directory::

    config.txt            resolved configuration (key=value lines)
    metrics.jsonl         one JSON record per epoch, tagged with the seed
    summary.json          per-seed results plus mean and standard deviation
    seed-<s>/model.ckpt   trained parameters
    seed-<s>/<stage>.svg  PCA scatter of the embedding (initial, intermediate, final)

``depict check`` runs the gradient and target-oracle self checks and
``depict eval`` scores a saved checkpoint on a dataset.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from . import trainer as tr
from .data import load_dataset
from .metrics import accuracy, nmi, pca_project

logger = logging.getLogger("depict")

SYNTHETIC_KEYS = ("n", "k", "image_side", "separation", "noise", "jitter", "background", "seed")
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(tr.TrainConfig))
DEFAULTS = {
    "dataset": "synthetic",
    "strategy": "mda",
    "out": "runs/latest",
    "seeds": "1",
    "seed": "0",
    "data_dir": "",
    "labeled_fraction": "0.1",
    "plots": "true",
    "synthetic.n": "1000",
    "synthetic.k": "4",
    "synthetic.image_side": "16",
}


class UsageError(Exception):
    pass


def parse_config_text(text: str) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _known_key(key):
    if key in DEFAULTS:
        return True
    section, _, name = key.partition(".")
    return (section == "train" and name in TRAIN_KEYS) or (
        section == "synthetic" and name in SYNTHETIC_KEYS
    )


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"expected a boolean, got {value!r}")
        return value.lower() in ("true", "1", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def train_config(cfg: dict, seed: int) -> tr.TrainConfig:
    defaults = tr.TrainConfig()
    kwargs = {}
    for name in TRAIN_KEYS:
        key = f"train.{name}"
        if key in cfg:
            try:
                kwargs[name] = _coerce(cfg[key], getattr(defaults, name))
            except ValueError as exc:
                raise UsageError(f"{key}: {exc}") from None
    kwargs["seed"] = seed
    try:
        return tr.TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def synthetic_params(cfg: dict, seed: int) -> dict:
    params = {"seed": seed}
    for name in SYNTHETIC_KEYS:
        key = f"synthetic.{name}"
        if key in cfg:
            params[name] = float(cfg[key]) if name in ("separation", "noise", "background") else int(cfg[key])
    return params


# ---------------------------------------------------------------- plotting

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _colour(i):
    if i < len(PALETTE):
        return PALETTE[i]
    # golden-angle hues beyond the fixed palette
    hue = (i * 137.508) % 360
    return f"hsl({hue:.1f},65%,45%)"


def emit_scatter(points, labels, path, title=None, size=480):
    """Write an SVG scatter plot with one colour per distinct label.

    The file is a pure function of its inputs, so repeated calls produce
    identical bytes.
    """
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot plot an empty label set")
    if points.ndim != 2 or points.shape[1] != 2 or len(points) != len(labels):
        raise ValueError(f"need N x 2 points and N labels, got {points.shape} and {labels.shape}")
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")
    margin = 20.0
    lo, hi = points.min(axis=0), points.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    xy = margin + (points - lo) / span * (size - 2 * margin)
    xy[:, 1] = size - xy[:, 1]
    classes = {v: i for i, v in enumerate(np.unique(labels))}
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    if title:
        safe = str(title).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        parts.append(f'<text x="{margin}" y="14" font-family="sans-serif" font-size="12">{safe}</text>')
    for (x, y), lab in zip(xy, labels):
        parts.append(f'<circle class="marker" cx="{x:.2f}" cy="{y:.2f}" r="2.5" '
                     f'fill="{_colour(classes[lab])}" fill-opacity="0.7"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
    return Path(path)


# ---------------------------------------------------------------- running

STAGE_TITLES = {
    "initial": "initial embedding",
    "intermediate": "after reconstruction-only training",
    "final": "after clustering",
}


def _run_seed(cfg, seed, out_dir: Path, log_file):
    config = train_config(cfg, seed)
    dataset = load_dataset(cfg["dataset"], cfg["data_dir"] or None,
                           **(synthetic_params(cfg, seed) if cfg["dataset"].lower() == "synthetic" else {}))
    images, true = dataset.images, dataset.labels
    k = dataset.n_classes
    if not k:
        raise UsageError("number of clusters unknown: dataset has no class count")
    if dataset.name in ae._ARCHITECTURES:
        arch = ae.arch_for_dataset(dataset.name, k)
    else:
        arch = ae.arch_for_shape(images.shape[1:], k)
    model = ae.DepictModel.initialize(arch, tr.Streams(seed).init)
    plots = _coerce(cfg["plots"], True)

    def sink(record):
        log_file.write(json.dumps({"seed": seed, **record}) + "\n")
        log_file.flush()
        logger.info("seed %d %s epoch %d loss %.5f acc %s nmi %s", seed, record["stage"],
                    record["epoch"], record["total"], record["acc"], record["nmi"])

    started = time.perf_counter()
    strategy = cfg["strategy"]
    common = dict(true_labels=true, log_sink=sink, snapshots=plots)
    if strategy == "mda":
        state = tr.train_mda(model, images, config, **common)
    elif strategy == "sda":
        state = tr.train_sda(model, images, config, **common)
    elif strategy == "rda":
        state = tr.train_rda(model, images, config, **common)
    elif strategy == "embedding-only":
        state, _ = tr.train_embedding_only(model, images, config, **common)
    else:
        if true is None:
            raise UsageError("semi-supervised runs need a labelled dataset")
        fraction = float(cfg["labeled_fraction"])
        if not 0.0 < fraction <= 1.0:
            raise UsageError("labeled_fraction must lie in (0, 1]")
        n_labeled = max(1, int(round(fraction * len(images))))
        idx = np.sort(np.random.default_rng(seed).permutation(len(images))[:n_labeled])
        state = tr.train_semi_supervised(model, images, idx, true[idx], config, **common)
    seconds = time.perf_counter() - started

    seed_dir = out_dir / f"seed-{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    ae.save_checkpoint(model, seed_dir / "model.ckpt")
    if plots:
        colour_by = true if true is not None else state.labels
        for stage, z in state.snapshots.items():
            emit_scatter(pca_project(z), colour_by, seed_dir / f"{stage}.svg", STAGE_TITLES[stage])
    result = {
        "seed": seed,
        "strategy": strategy,
        "dataset": dataset.name,
        "n_samples": len(images),
        "n_clusters": k,
        "epochs": state.epoch,
        "converged": bool(state.converged),
        "runtime_seconds": seconds,
    }
    if true is not None:
        result["acc"] = accuracy(state.labels, true)
        result["nmi"] = nmi(state.labels, true)
    return result


def _aggregate(results, key):
    values = [r[key] for r in results if key in r]
    if not values:
        return None
    return {"mean": statistics.fmean(values),
            "stdev": statistics.stdev(values) if len(values) > 1 else 0.0}


def run_experiment(cfg: dict) -> dict:
    if cfg["strategy"] not in tr.STRATEGIES:
        raise UsageError(f"unknown strategy {cfg['strategy']!r}; choose from {', '.join(tr.STRATEGIES)}")
    try:
        n_seeds, first = int(cfg["seeds"]), int(cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if n_seeds < 1:
        raise UsageError("seeds must be >= 1")
    for key in cfg:
        if not _known_key(key):
            raise UsageError(f"unknown configuration key {key!r}")
    for seed in range(first, first + n_seeds):
        train_config(cfg, seed)  # validate before any work
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text("".join(f"{k}={v}\n" for k, v in sorted(cfg.items())))
    results = []
    with open(out_dir / "metrics.jsonl", "w") as log_file:
        for seed in range(first, first + n_seeds):
            results.append(_run_seed(cfg, seed, out_dir, log_file))
    summary = {"runs": results}
    for key in ("acc", "nmi", "runtime_seconds"):
        agg = _aggregate(results, key)
        if agg is not None:
            summary[key] = agg
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def run_checks(out=None) -> bool:
    """Gradient checks on a reduced network and the target-oracle comparison."""
    out = out or sys.stdout
    from . import nn
    from .clustering import estimate_targets, softmax, targets_oracle

    ok = True
    rng = np.random.default_rng(0)
    arch = ae.ArchitectureSpec((1, 8, 8), (nn.ConvSpec(2, (4, 4), 2, 0), nn.ConvSpec(2, (3, 3), 2, 1)), 3)
    model = ae.DepictModel.initialize(arch, rng)
    for name, value in model.params.items():
        if name.endswith(".bias"):
            # off zero, so a fully dropped layer does not land on the leaky-ReLU kink
            value[...] = rng.normal(0, 0.1, value.shape)
    x = rng.uniform(-1, 1, (2, 1, 8, 8))
    q = rng.dirichlet(np.ones(3), 2)
    clean = ae.clean_encode(model, x)

    def loss():
        value, _ = ae.joint_loss_and_grads(model, x, 0.1, np.random.default_rng(1), targets=q,
                                           clean_layers=clean)
        return value.total

    _, grads = ae.joint_loss_and_grads(model, x, 0.1, np.random.default_rng(1), targets=q,
                                       clean_layers=clean)
    worst = 0.0
    for name, param in model.params.items():
        numeric = nn.numerical_gradient(lambda _: loss(), param)
        worst = max(worst, nn.tensor_relative_error(grads[name], numeric))
    passed = worst <= 1e-5
    ok &= passed
    print(f"{'PASS' if passed else 'FAIL'} gradient check: worst relative error {worst:.2e}", file=out)

    p = softmax(rng.standard_normal((50, 3)))
    gap = float(np.max(np.abs(estimate_targets(p) - targets_oracle(p))))
    passed = gap <= 1e-2
    ok &= passed
    print(f"{'PASS' if passed else 'FAIL'} target update vs oracle (N=50): max gap {gap:.2e}", file=out)
    return ok


def evaluate_checkpoint(path, dataset_name, data_dir=None) -> dict:
    model = ae.load_checkpoint(path)
    dataset = load_dataset(dataset_name, data_dir)
    if tuple(dataset.images.shape[1:]) != model.arch.input_shape:
        raise ValueError(f"dataset images {dataset.images.shape[1:]} do not fit model input "
                         f"{model.arch.input_shape}")
    labels = tr.hard_assignments(tr.predict_proba(model, dataset.images))
    report = {"dataset": dataset.name, "n_samples": len(labels),
              "cluster_sizes": np.bincount(labels, minlength=model.n_clusters).tolist()}
    if dataset.labels is not None:
        report["acc"] = accuracy(labels, dataset.labels)
        report["nmi"] = nmi(labels, dataset.labels)
    return report


# ---------------------------------------------------------------- argv

def _parser():
    parser = argparse.ArgumentParser(prog="depict", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train and evaluate",
                         epilog="Any other --key VALUE pair overrides a config entry, e.g. "
                                "--train.max_epochs 50, --synthetic.noise 0.5 or --labeled_fraction 0.05.")
    run.add_argument("--config", type=Path)
    run.add_argument("--seed", type=int)
    run.add_argument("--seeds", type=int)
    run.add_argument("--strategy")
    run.add_argument("--dataset")
    run.add_argument("--data-dir")
    run.add_argument("--out")
    sub.add_parser("check", help="run gradient and oracle self checks")
    ev = sub.add_parser("eval", help="score a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--data-dir")
    return parser


def _dotted_overrides(extra):
    out = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise UsageError(f"unrecognised argument {arg!r}")
        if "=" in arg:
            key, value = arg[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"{arg} needs a value")
            key, value = arg[2:], extra[i + 1]
            i += 2
        out[key] = value
    return out


def main(argv=None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        if args.command != "run" and extra:
            raise UsageError(f"unrecognised arguments: {' '.join(extra)}")
        if args.command == "check":
            return 0 if run_checks() else 1
        if args.command == "eval":
            print(json.dumps(evaluate_checkpoint(args.checkpoint, args.dataset, args.data_dir), indent=2))
            return 0
        cfg = dict(DEFAULTS)
        if args.config is not None:
            try:
                cfg.update(parse_config_text(args.config.read_text()))
            except OSError as exc:
                raise UsageError(f"cannot read config: {exc}") from None
        cfg.update(_dotted_overrides(extra))
        for key, value in (("seed", args.seed), ("seeds", args.seeds), ("strategy", args.strategy),
                           ("dataset", args.dataset), ("data_dir", args.data_dir), ("out", args.out)):
            if value is not None:
                cfg[key] = str(value)
        summary = run_experiment(cfg)
        print(json.dumps({k: v for k, v in summary.items() if k != "runs"}, indent=2))
        return 0
    except UsageError as exc:
        print(f"depict: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface any failure as one line
        print(f"depict: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
