"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line (also collected
in the terminal summary). Training runs are cached so criteria that compare
strategies share them."""

import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_acceptance
from depict import autoencoder as ae
from depict import clustering as cl
from depict import nn
from depict import trainer as tr
from depict.data import load_mnist, synthetic_blobs
from depict.metrics import accuracy, hungarian, nmi

pytestmark = pytest.mark.slow

SEEDS = range(5)
N, K, SIDE = 1000, 4, 16


def synthetic(seed):
    return synthetic_blobs(N, K, image_side=SIDE, seed=seed)


def held_out(seed):
    # an independent draw from the same generator
    return synthetic_blobs(N, K, image_side=SIDE, seed=seed + 1000)


_RUNS = {}


def run(strategy, seed):
    key = (strategy, seed)
    if key in _RUNS:
        return _RUNS[key]
    data = synthetic(seed)
    config = tr.TrainConfig(seed=seed)
    model = ae.DepictModel.initialize(ae.arch_for_shape(data.images.shape[1:], K), tr.Streams(seed).init)
    started = time.perf_counter()
    if strategy == "semi":
        idx = np.sort(np.random.default_rng(seed).permutation(N)[: N // 10])
        state = tr.train_semi_supervised(model, data.images, idx, data.labels[idx], config)
    else:
        train = {"mda": tr.train_mda, "sda": tr.train_sda, "rda": tr.train_rda}[strategy]
        state = train(model, data.images, config)
    result = {
        "seconds": time.perf_counter() - started,
        "history": [h.as_dict() for h in state.history],
        "labels": state.labels.copy(),
        "acc": accuracy(state.labels, data.labels),
        "nmi": nmi(state.labels, data.labels),
        "model": model,
    }
    _RUNS[key] = result
    return result


# ---------------------------------------------------------------- 1

def _fd(fun, grad, x, per_coordinate=True):
    return nn.gradient_check(fun, lambda _: grad, x, per_coordinate=per_coordinate)


def _layer_errors(rng):
    """Worst relative error per layer type on one random instance."""
    errs = {}
    spec = nn.ConvSpec(2, (3, 3), 2, 1)
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal(2)
    out = nn.conv2d_forward(x, w, b, spec)
    g = rng.standard_normal(out.shape)
    gx, gw, gb = nn.conv2d_backward(g, x, w, spec)
    errs["conv"] = max(
        _fd(lambda v: np.sum(g * nn.conv2d_forward(v, w, b, spec)), gx, x),
        _fd(lambda v: np.sum(g * nn.conv2d_forward(x, v, b, spec)), gw, w),
        _fd(lambda v: np.sum(g * nn.conv2d_forward(x, w, v, spec)), gb, b),
    )
    h = rng.standard_normal(out.shape)
    wt = rng.standard_normal((2, 2, 3, 3))
    bt = rng.standard_normal(2)
    up = nn.conv2d_transpose_forward(h, wt, bt, spec)
    gu = rng.standard_normal(up.shape)
    hx, hw, hb = nn.conv2d_transpose_backward(gu, h, wt, spec)
    errs["conv_transpose"] = max(
        _fd(lambda v: np.sum(gu * nn.conv2d_transpose_forward(v, wt, bt, spec)), hx, h),
        _fd(lambda v: np.sum(gu * nn.conv2d_transpose_forward(h, v, bt, spec)), hw, wt),
        _fd(lambda v: np.sum(gu * nn.conv2d_transpose_forward(h, wt, v, spec)), hb, bt),
    )
    xd, wd, bd = rng.standard_normal((3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
    gd = rng.standard_normal((3, 5))
    dx, dw, db = nn.dense_backward(gd, xd, wd)
    errs["dense"] = max(
        _fd(lambda v: np.sum(gd * nn.dense_forward(v, wd, bd)), dx, xd),
        _fd(lambda v: np.sum(gd * nn.dense_forward(xd, v, bd)), dw, wd),
        _fd(lambda v: np.sum(gd * nn.dense_forward(xd, wd, v)), db, bd),
    )
    # keep samples away from the leaky-ReLU kink
    xa = rng.uniform(0.01, 2, (4, 6)) * rng.choice([-1, 1], (4, 6))
    ga = rng.standard_normal(xa.shape)
    errs["leaky_relu"] = _fd(lambda v: np.sum(ga * nn.leaky_relu(v)), nn.leaky_relu_backward(ga, xa), xa)
    errs["tanh"] = _fd(lambda v: np.sum(ga * np.tanh(v)), nn.tanh_backward(ga, np.tanh(xa)), xa)
    seed = int(rng.integers(1 << 30))
    _, mask = nn.dropout(xa, 0.3, np.random.default_rng(seed))
    errs["dropout"] = _fd(lambda v: np.sum(ga * nn.dropout(v, 0.3, np.random.default_rng(seed))[0]),
                          ga * mask, xa)
    return errs


def _composition_error(seed):
    arch = ae.ArchitectureSpec((1, 8, 8), (nn.ConvSpec(2, (4, 4), 2, 0), nn.ConvSpec(2, (3, 3), 2, 1)), 3)
    rng = np.random.default_rng(seed)
    model = ae.DepictModel.initialize(arch, rng)
    for name, value in model.params.items():
        if name.endswith(".bias"):
            value[...] = rng.normal(0, 0.1, value.shape)
    x = rng.uniform(-1, 1, (3, 1, 8, 8))
    q = rng.dirichlet(np.ones(3), 3)
    clean = ae.clean_encode(model, x)

    def loss(name, value):
        saved = model.params[name]
        model.params[name] = value
        try:
            return ae.joint_loss_and_grads(model, x, 0.1, np.random.default_rng(seed), targets=q,
                                           clean_layers=clean)[0].total
        finally:
            model.params[name] = saved

    _, grads = ae.joint_loss_and_grads(model, x, 0.1, np.random.default_rng(seed), targets=q,
                                       clean_layers=clean)
    assert set(grads) == set(model.params)
    return max(_fd(lambda v, n=name: loss(n, v), grads[name], model.params[name].copy(),
                   per_coordinate=False) for name in grads)


def test_criterion_1_gradient_fidelity():
    started = time.perf_counter()
    worst = {}
    rng = np.random.default_rng(0)
    for _ in range(20):
        for layer, err in _layer_errors(rng).items():
            worst[layer] = max(worst.get(layer, 0.0), err)
    worst["composition"] = max(_composition_error(s) for s in range(20))
    seconds = time.perf_counter() - started
    passed = max(worst.values()) <= 1e-5 and seconds < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_acceptance(1, passed, f"20 instances each, worst relative error {detail}; {seconds:.1f}s")
    assert passed


# ---------------------------------------------------------------- 2

def test_criterion_2_target_oracle():
    started = time.perf_counter()
    rng = np.random.default_rng(0)
    gaps = {}
    for n, tol in ((50, 1e-2), (2000, 1e-3)):
        worst = 0.0
        for _ in range(3):
            # P is a softmax output everywhere in the model, so draw it as one
            p = cl.softmax(rng.standard_normal((n, 3)))
            worst = max(worst, float(np.max(np.abs(cl.estimate_targets(p) - cl.targets_oracle(p)))))
        gaps[n] = (worst, tol)
    seconds = time.perf_counter() - started
    passed = all(g <= tol for g, tol in gaps.values()) and seconds < 60
    detail = "; ".join(f"N={n} max gap {g:.1e} (tol {tol:g})" for n, (g, tol) in gaps.items())
    record_acceptance(2, passed, f"{detail}; {seconds:.1f}s")
    assert passed


# ---------------------------------------------------------------- 3

def _brute_accuracy(pred, true):
    best = 0
    p_vals, t_vals = np.unique(pred), np.unique(true)
    size = max(len(p_vals), len(t_vals))
    for perm in itertools.permutations(range(size)):
        hits = sum(np.sum((pred == pv) & (true == t_vals[perm[i]]))
                   for i, pv in enumerate(p_vals) if perm[i] < len(t_vals))
        best = max(best, hits)
    return best / len(pred)


def test_criterion_3_metrics():
    rng = np.random.default_rng(0)
    acc_ok = True
    for _ in range(100):
        n, k = int(rng.integers(1, 13)), int(rng.integers(1, 6))
        pred, true = rng.integers(0, k, n), rng.integers(0, k, n)
        acc_ok &= abs(accuracy(pred, true) - _brute_accuracy(pred, true)) < 1e-12
    hung_ok = True
    for size in range(1, 8):
        for _ in range(5):
            cost = rng.standard_normal((size, size))
            best = min(sum(cost[i, p[i]] for i in range(size)) for p in itertools.permutations(range(size)))
            hung_ok &= abs(cost[np.arange(size), hungarian(cost)].sum() - best) < 1e-9
    y = rng.integers(0, 5, 500)
    self_nmi = nmi(y, y)
    independent = nmi(np.repeat(np.arange(4), 250), np.tile(np.arange(5), 200))
    passed = acc_ok and hung_ok and abs(self_nmi - 1) < 1e-12 and independent < 0.02
    record_acceptance(3, passed, f"accuracy==brute force: {acc_ok}; hungarian==brute force: {hung_ok}; "
                                 f"nmi(y,y)={self_nmi:.6f}; nmi(independent)={independent:.2e}")
    assert passed


# ---------------------------------------------------------------- 4

def test_criterion_4_synthetic_end_to_end():
    runs = [run("mda", s) for s in SEEDS]
    acc = np.mean([r["acc"] for r in runs])
    score = np.mean([r["nmi"] for r in runs])
    seconds = sum(r["seconds"] for r in runs)
    passed = acc >= 0.95 and score >= 0.90 and seconds < 600
    record_acceptance(4, passed, f"MdA over 5 seeds: ACC {acc:.4f}, NMI {score:.4f}; total {seconds:.0f}s")
    assert passed


# ---------------------------------------------------------------- 5

def test_criterion_5_ablation_ordering():
    means = {s: float(np.mean([run(s, seed)["nmi"] for seed in SEEDS])) for s in ("mda", "rda", "sda")}
    passed = means["mda"] >= means["rda"] >= means["sda"] - 0.02
    record_acceptance(5, passed, "mean NMI MdA {mda:.4f}, RdA {rda:.4f}, SdA {sda:.4f}".format(**means))
    assert passed


# ---------------------------------------------------------------- 6

def _mnist_dir():
    for candidate in (os.environ.get("DEPICT_MNIST_DIR"), "data/mnist", str(Path.home() / "data" / "mnist")):
        if candidate and (Path(candidate) / "t10k-images-idx3-ubyte").exists():
            return candidate
    return None


def test_criterion_6_mnist_test(tmp_path):
    directory = _mnist_dir()
    if directory is None:
        record_acceptance(6, False, "MNIST-test IDX files not found (set DEPICT_MNIST_DIR); not run")
        pytest.skip("MNIST-test files unavailable")
    data = load_mnist(directory, "MNIST-test")
    config = tr.TrainConfig(max_epochs=150, seed=0)
    model = ae.DepictModel.initialize(ae.arch_for_dataset("MNIST-test"), tr.Streams(0).init)
    log = open(tmp_path / "mnist.jsonl", "w")
    started = time.perf_counter()
    state = tr.train_mda(model, data.images, config, true_labels=data.labels,
                         log_sink=lambda r: log.write(json.dumps(r) + "\n"))
    seconds = time.perf_counter() - started
    log.write(json.dumps({"runtime_seconds": seconds}) + "\n")
    log.close()
    acc, score = accuracy(state.labels, data.labels), nmi(state.labels, data.labels)
    passed = score >= 0.80 and acc >= 0.85 and seconds <= 4 * 3600
    record_acceptance(6, passed, f"MNIST-test ACC {acc:.4f}, NMI {score:.4f}; {seconds / 3600:.2f}h")
    assert passed


# ---------------------------------------------------------------- 7

def test_criterion_7_semi_supervised():
    errors = []
    for seed in SEEDS:
        model = run("semi", seed)["model"]
        test = held_out(seed)
        pred = tr.hard_assignments(tr.predict_proba(model, test.images))
        errors.append(float(np.mean(pred != test.labels)))
    semi = float(np.mean(errors))
    unsup = float(np.mean([1 - run("mda", s)["acc"] for s in SEEDS]))
    passed = semi < unsup
    record_acceptance(7, passed, f"10% labels held-out error {semi:.4f} vs unsupervised 1-ACC {unsup:.4f}")
    assert passed


# ---------------------------------------------------------------- 8

def _kl_to_uniform(f):
    return float(np.sum(f * np.log(f * len(f))))


def test_criterion_8_balance():
    rng = np.random.default_rng(0)
    wins = 0
    for _ in range(100):
        n, k = int(rng.integers(20, 500)), int(rng.integers(2, 11))
        logits = rng.standard_normal((n, k))
        logits[:, rng.integers(k)] += rng.uniform(2, 6)
        p = cl.softmax(logits)
        q = cl.estimate_targets(p)
        wins += _kl_to_uniform(q.mean(0)) < _kl_to_uniform(p.mean(0))
    passed = wins == 100
    record_acceptance(8, passed, f"{wins}/100 adversarial instances strictly more balanced")
    assert passed


# ---------------------------------------------------------------- 9

def test_criterion_9_reproducibility():
    first = run("mda", 0)
    _RUNS.pop(("mda", 0))
    try:
        second = run("mda", 0)
    finally:
        _RUNS[("mda", 0)] = first
    same = (first["history"] == second["history"]
            and np.array_equal(first["labels"], second["labels"])
            and first["acc"] == second["acc"] and first["nmi"] == second["nmi"])
    record_acceptance(9, same, f"two seed-0 MdA runs: {len(first['history'])} history records, "
                               f"bitwise identical: {same}")
    assert same
