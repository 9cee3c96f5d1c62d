"""Training strategies: joint (MdA), stacked (SdA), retrained (RdA),
reconstruction-only embedding, and the semi-supervised variant."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autoencoder as ae
from .clustering import (
    LossBreakdown,
    clustering_loss,
    empirical_frequency,
    estimate_targets,
    fit_softmax_head,
    init_assignments,
    kmeans,
    predict_soft_assignments,
)
from .metrics import accuracy, best_map, nmi

logger = logging.getLogger(__name__)

STRATEGIES = ("mda", "sda", "rda", "embedding-only", "semi-supervised")


class TrainingError(RuntimeError):
    pass


class CollapseWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    dropout_rate: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 100
    warmup_epochs: int = 20
    max_epochs: int = 300
    convergence_threshold: float = 0.001
    seed: int = 0
    clustering_weight: float = 1.0
    eval_batch_size: int = 250
    head_fit_iters: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.convergence_threshold < 1.0:
            raise ValueError("convergence_threshold must lie in (0, 1)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.warmup_epochs < 0 or self.max_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.head_fit_iters < 0:
            raise ValueError("head_fit_iters must be >= 0")

    @property
    def adam(self) -> dict:
        return dict(learning_rate=self.learning_rate, beta1=self.beta1,
                    beta2=self.beta2, epsilon=self.epsilon)


@dataclass
class TrainState:
    model: ae.DepictModel
    q: np.ndarray | None = None
    epoch: int = 0
    history: list = field(default_factory=list)
    labels: np.ndarray | None = None
    converged: bool = False
    records: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


class Streams:
    """Independent random streams derived from one seed."""

    def __init__(self, seed):
        init, drop, shuffle, cluster = np.random.SeedSequence(seed).spawn(4)
        self.init = np.random.default_rng(init)
        self.dropout = np.random.default_rng(drop)
        self.shuffle = np.random.default_rng(shuffle)
        self.cluster = np.random.default_rng(cluster)


def hard_assignments(p) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest cluster index."""
    return np.argmax(p, axis=1)


def predict_proba(model: ae.DepictModel, images, batch_size=250) -> np.ndarray:
    """Soft assignments from the clean pathway."""
    return predict_soft_assignments(ae.embed(model, images, batch_size), model.params["softmax.theta"])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _check_finite(value, stage, epoch):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss in {stage} at epoch {epoch}")


class _Log:
    def __init__(self, state: TrainState, sink: Callable | None, true_labels):
        self.state = state
        self.sink = sink
        self.true_labels = true_labels

    def emit(self, stage, epoch, losses: LossBreakdown, started, pred=None, changed=None):
        record = {"stage": stage, "epoch": epoch, **losses.as_dict()}
        record["nmi"] = record["acc"] = None
        if pred is not None and self.true_labels is not None:
            record["nmi"] = nmi(pred, self.true_labels)
            record["acc"] = accuracy(pred, self.true_labels)
        record["changed"] = changed
        record["seconds"] = time.perf_counter() - started
        self.state.records.append(record)
        logger.debug("%s", record)
        if self.sink is not None:
            self.sink(record)


def _recon_epochs(model, images, config, streams, epochs, log, stage, recon_layers=None,
                  dropout_rate=None):
    rate = config.dropout_rate if dropout_rate is None else dropout_rate
    for epoch in range(1, epochs + 1):
        started = time.perf_counter()
        total, count = 0.0, 0
        for idx in _batches(len(images), config.batch_size, streams.shuffle):
            loss, grads = ae.joint_loss_and_grads(
                model, images[idx], rate, streams.dropout, recon_layers=recon_layers
            )
            _check_finite(loss.reconstruction, stage, epoch)
            model.apply_gradients(grads, **config.adam)
            total += loss.reconstruction * len(idx)
            count += len(idx)
        losses = LossBreakdown(reconstruction=total / count)
        log.state.history.append(losses)
        log.emit(stage, epoch, losses, started)


def warmup(model, images, config: TrainConfig, streams=None, state=None, log_sink=None,
           true_labels=None):
    """Reconstruction-only training of the whole autoencoder for ``warmup_epochs``."""
    streams = streams or Streams(config.seed)
    state = state or TrainState(model)
    _recon_epochs(model, images, config, streams, config.warmup_epochs,
                  _Log(state, log_sink, true_labels), "warmup")
    return model


def _snapshot(state, name, model, images, config, enabled):
    if enabled:
        state.snapshots[name] = ae.embed(model, images, config.eval_batch_size)


def _cluster_epochs(model, images, config, streams, state, log, q, recon_layers,
                    stage, frozen_idx=None, frozen_rows=None):
    """Alternate minibatch parameter updates with full-data target refreshes."""
    k = q.shape[1]
    p = predict_proba(model, images, config.eval_batch_size)
    prev = hard_assignments(p)
    state.converged = False
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        ce_total = rec_total = 0.0
        for idx in _batches(len(images), config.batch_size, streams.shuffle):
            loss, grads = ae.joint_loss_and_grads(
                model, images[idx], config.dropout_rate, streams.dropout,
                targets=q[idx], recon_layers=recon_layers,
                clustering_weight=config.clustering_weight,
            )
            _check_finite(loss.total, stage, epoch)
            model.apply_gradients(grads, **config.adam)
            ce_total += loss.cross_entropy * len(idx)
            rec_total += loss.reconstruction * len(idx)
        p = predict_proba(model, images, config.eval_batch_size)
        pred = hard_assignments(p)
        changed = float(np.mean(pred != prev))
        prev = pred
        losses = clustering_loss(q, p)
        losses.reconstruction = rec_total / len(images)
        losses.cross_entropy = ce_total / len(images)
        _check_finite(losses.total, stage, epoch)
        q = estimate_targets(p)
        if frozen_idx is not None:
            q[frozen_idx] = frozen_rows
        f = empirical_frequency(q)
        if np.any(f < 1.0 / (10 * k)):
            warnings.warn(
                f"{stage} epoch {epoch}: cluster frequency {f.min():.4f} below 1/(10K)",
                CollapseWarning, stacklevel=2,
            )
        state.history.append(losses)
        state.epoch = epoch
        log.emit(stage, epoch, losses, started, pred, changed)
        if changed < config.convergence_threshold:
            state.converged = True
            break
    state.q = q
    state.labels = prev
    return state


def _initial_targets(model, images, k, config, streams, adjust=None):
    """k-means targets on the clean embedding; the softmax head is then fitted to them.

    ``adjust`` may rewrite the targets before the head is fitted.
    """
    z = ae.embed(model, images, config.eval_batch_size)
    q = init_assignments(z, k, streams.cluster)
    if adjust is not None:
        q = adjust(q)
    if config.head_fit_iters:
        theta = model.params["softmax.theta"]
        theta[...] = fit_softmax_head(z, q, theta, config.head_fit_iters)
    return q


def train_mda(model, images, config: TrainConfig, true_labels=None, log_sink=None,
              snapshots=False, skip_warmup=False) -> TrainState:
    """Joint training: all reconstruction layers plus the clustering loss."""
    streams = Streams(config.seed)
    state = TrainState(model)
    log = _Log(state, log_sink, true_labels)
    _snapshot(state, "initial", model, images, config, snapshots)
    if not skip_warmup:
        _recon_epochs(model, images, config, streams, config.warmup_epochs, log, "warmup")
    _snapshot(state, "intermediate", model, images, config, snapshots)
    q = _initial_targets(model, images, model.n_clusters, config, streams)
    _cluster_epochs(model, images, config, streams, state, log, q, None, "mda")
    _snapshot(state, "final", model, images, config, snapshots)
    return state


def _layerwise_pretrain(model, images, config, streams, state, log):
    L = model.arch.depth
    summary = []
    for l in range(1, L + 1):
        losses = []
        for epoch in range(1, config.warmup_epochs + 1):
            started = time.perf_counter()
            total = 0.0
            for idx in _batches(len(images), config.batch_size, streams.shuffle):
                inputs = ae.clean_encode(model, images[idx], upto=l - 1)[-1]
                loss, grads = ae.layerwise_loss_and_grads(
                    model, l, inputs, config.dropout_rate, streams.dropout
                )
                _check_finite(loss, f"layerwise-{l}", epoch)
                model.apply_gradients(grads, **config.adam)
                total += loss * len(idx)
            losses.append(total / len(images))
            record = LossBreakdown(reconstruction=losses[-1])
            state.history.append(record)
            log.emit(f"layerwise-{l}", epoch, record, started)
        summary.append({"layer": l, "losses": losses})
    state.extra["layerwise"] = summary


def _finetune(model, images, config, streams, state, log, stage, snapshots):
    _snapshot(state, "intermediate", model, images, config, snapshots)
    q = _initial_targets(model, images, model.n_clusters, config, streams)
    _cluster_epochs(model, images, config, streams, state, log, q, (), stage)
    _snapshot(state, "final", model, images, config, snapshots)
    return state


def train_sda(model, images, config: TrainConfig, true_labels=None, log_sink=None,
              snapshots=False) -> TrainState:
    """Greedy layer-wise denoising pretraining, then clustering-only fine-tuning."""
    streams = Streams(config.seed)
    state = TrainState(model)
    log = _Log(state, log_sink, true_labels)
    _snapshot(state, "initial", model, images, config, snapshots)
    _layerwise_pretrain(model, images, config, streams, state, log)
    return _finetune(model, images, config, streams, state, log, "sda", snapshots)


def train_rda(model, images, config: TrainConfig, true_labels=None, log_sink=None,
              snapshots=False) -> TrainState:
    """Layer-wise pretraining, clean whole-network retraining on the input
    reconstruction only, then clustering-only fine-tuning."""
    streams = Streams(config.seed)
    state = TrainState(model)
    log = _Log(state, log_sink, true_labels)
    _snapshot(state, "initial", model, images, config, snapshots)
    _layerwise_pretrain(model, images, config, streams, state, log)
    state.extra["retrain_dropout_rate"] = 0.0
    _recon_epochs(model, images, config, streams, config.warmup_epochs, log, "retrain",
                  recon_layers=(0,), dropout_rate=0.0)
    return _finetune(model, images, config, streams, state, log, "rda", snapshots)


def train_embedding_only(model, images, config: TrainConfig, true_labels=None, log_sink=None,
                         snapshots=False, epochs=None):
    """Reconstruction-only joint training followed by k-means on the embedding.

    Returns ``(state, labels)``. ``epochs`` defaults to ``warmup_epochs``.
    """
    streams = Streams(config.seed)
    state = TrainState(model)
    log = _Log(state, log_sink, true_labels)
    _snapshot(state, "initial", model, images, config, snapshots)
    epochs = config.warmup_epochs if epochs is None else epochs
    _recon_epochs(model, images, config, streams, epochs, log, "embedding")
    z = ae.embed(model, images, config.eval_batch_size)
    _snapshot(state, "final", model, images, config, snapshots)
    _, labels = kmeans(z, model.n_clusters, streams.cluster)
    state.labels = labels
    return state, labels


def align_targets(q, labeled_indices, labels):
    """Permute target columns so cluster ``j`` corresponds to class ``j``.

    The mapping is the best cluster-to-class map on the labelled subset.
    Returns ``(q_aligned, mapping)``.
    """
    k = q.shape[1]
    clusters = hard_assignments(q[labeled_indices])
    mapping = best_map(clusters, labels)
    used = set(mapping.values())
    free = iter(c for c in range(k) if c not in used)
    order = np.empty(k, dtype=int)
    for cluster in range(k):
        cls = mapping.get(cluster)
        if cls is None or cls >= k:
            cls = next(free)
        order[cls] = cluster
    return q[:, order], mapping


def train_semi_supervised(model, images, labeled_indices, labels, config: TrainConfig,
                          true_labels=None, log_sink=None, snapshots=False) -> TrainState:
    """MdA training with the targets of labelled samples fixed to their classes."""
    labeled_indices = np.asarray(labeled_indices, dtype=int)
    labels = np.asarray(labels, dtype=int)
    n, k = len(images), model.n_clusters
    if len(np.unique(labeled_indices)) != len(labeled_indices):
        raise ValueError("labeled_indices must be distinct")
    if len(labeled_indices) and (labeled_indices.min() < 0 or labeled_indices.max() >= n):
        raise ValueError("labeled_indices out of range")
    if len(labels) != len(labeled_indices):
        raise ValueError("one label per labelled index required")
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    if len(np.unique(labels)) < k:
        warnings.warn(f"labelled subset covers {len(np.unique(labels))} of {k} classes",
                      UserWarning, stacklevel=2)
    streams = Streams(config.seed)
    state = TrainState(model)
    log = _Log(state, log_sink, true_labels)
    _snapshot(state, "initial", model, images, config, snapshots)
    _recon_epochs(model, images, config, streams, config.warmup_epochs, log, "warmup")
    _snapshot(state, "intermediate", model, images, config, snapshots)
    frozen = np.zeros((len(labels), k))
    frozen[np.arange(len(labels)), labels] = 1.0

    def align_and_freeze(q):
        q, mapping = align_targets(q, labeled_indices, labels)
        q[labeled_indices] = frozen
        state.extra["label_map"] = mapping
        return q

    q = _initial_targets(model, images, k, config, streams, adjust=align_and_freeze)
    state.extra["frozen_rows"] = frozen
    _cluster_epochs(model, images, config, streams, state, log, q, None, "semi-supervised",
                    frozen_idx=labeled_indices, frozen_rows=frozen)
    _snapshot(state, "final", model, images, config, snapshots)
    return state


def minibatch_objective(model, images, q, dropout_rate, rng) -> float:
    """Cross-entropy on the noisy pathway plus all reconstruction terms."""
    loss, _ = ae.joint_loss_and_grads(model, images, dropout_rate, rng, targets=q)
    return loss.total
