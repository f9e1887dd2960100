"""Data-parallel mini-batch training over GraphFeature triples.

Workers are threads.  Each owns one shard of the training samples and talks
to a shared :class:`ParameterStore` through ``pull`` / ``push``.  In sync
mode a step is applied once every participating worker has pushed; the
gradients are averaged (weighted by sample count) in worker-id order, which
keeps runs reproducible whatever the thread interleaving.
"""
from __future__ import annotations

import csv
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import NumericsError, SchemaError, ShardError, UndefinedMetric
from .gnn.batch import VectorizedBatch, vectorize
from .gnn.model import GNNModel, ModelConfig, loss_and_grad
from .gnn.optim import AdamState, adam_step

log = logging.getLogger(__name__)

METRICS = ("accuracy", "micro_f1", "auc")
MAX_EPOCHS = 200


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 200
    workers: int = 1
    lr: float = 0.01
    seed: int = 0
    mode: str = "sync"
    eval_every: int = 1
    dropout: float = 0.5
    weight_decay: float = 5e-4
    metric: str = "accuracy"
    partitions: int = 1
    prefetch: bool = True

    def __post_init__(self):
        if self.workers < 1:
            raise SchemaError("workers must be >= 1")
        if self.batch_size < 1:
            raise SchemaError("batch_size must be >= 1")
        if not 1 <= self.epochs <= MAX_EPOCHS:
            raise SchemaError(f"epochs must be in 1..{MAX_EPOCHS}")
        if self.mode not in ("sync", "async"):
            raise SchemaError(f"unknown update mode {self.mode!r}")
        if self.metric not in METRICS:
            raise SchemaError(f"unknown metric {self.metric!r}")
        if not 0 <= self.dropout < 1:
            raise SchemaError("dropout must be in [0, 1)")


# ---------------------------------------------------------------------------
# parameter store

class ParameterStore:
    """Versioned parameters plus the optimizer that updates them."""

    def __init__(self, params: dict[str, np.ndarray], optimizer: AdamState, mode: str = "sync"):
        self._params = {k: v.copy() for k, v in params.items()}
        self._opt = optimizer
        self.mode = mode
        self.version = 0
        self._cond = threading.Condition()
        self._pending: dict[object, dict[int, tuple[dict, int]]] = {}
        self._aborted = False

    def pull(self) -> tuple[int, dict[str, np.ndarray]]:
        with self._cond:
            return self.version, {k: v.copy() for k, v in self._params.items()}

    def _apply(self, grads: dict[str, np.ndarray]) -> None:
        self._params = adam_step(self._params, grads, self._opt)
        self.version += 1

    def push(self, worker_id: int, grads: dict[str, np.ndarray], n_samples: int,
             step: int = 0, participants: int = 1) -> int:
        """Contribute gradients; returns the version that includes them.

        Sync mode blocks until all ``participants`` pushes for ``step`` are in.
        """
        with self._cond:
            if self._aborted:
                raise ShardError("parameter store aborted by a failing worker")
            if self.mode == "async":
                self._apply(grads)
                return self.version
            pending = self._pending.setdefault(step, {})
            pending[worker_id] = (grads, n_samples)
            if len(pending) == participants:
                total = sum(n for _, n in pending.values())
                avg = {}
                for wid in sorted(pending):
                    g, n = pending[wid]
                    for name, arr in g.items():
                        avg[name] = avg.get(name, 0.0) + arr * (n / total)
                del self._pending[step]
                self._apply(avg)
                self._cond.notify_all()
                return self.version
            start = self.version
            self._cond.wait_for(lambda: self.version > start or self._aborted)
            if self._aborted:
                raise ShardError("parameter store aborted by a failing worker")
            return self.version

    def abort(self) -> None:
        with self._cond:
            self._aborted = True
            self._pending.clear()
            self._cond.notify_all()

    def snapshot(self) -> dict[str, np.ndarray]:
        return self.pull()[1]


# ---------------------------------------------------------------------------
# two-stage pipeline

_DONE = object()


def prefetch_pipeline(reader: Iterable, vectorizer: Callable, compute: Callable,
                      depth: int = 2) -> Iterator:
    """Yield ``compute(vectorizer(item))`` for every item, preparing item i+1 in a
    background thread while item i is being computed."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    failure: list[BaseException] = []
    stop = threading.Event()

    def produce():
        try:
            for item in reader:
                if stop.is_set():
                    return
                q.put(vectorizer(item))
        except BaseException as exc:  # re-raised in the consumer
            failure.append(exc)
        finally:
            q.put(_DONE)

    th = threading.Thread(target=produce, daemon=True)
    th.start()
    try:
        while True:
            got = q.get()
            if got is _DONE:
                break
            yield compute(got)
        if failure:
            raise failure[0]
    finally:
        stop.set()
        while th.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                th.join(0.01)


def sequential_pipeline(reader: Iterable, vectorizer: Callable, compute: Callable) -> Iterator:
    for item in reader:
        yield compute(vectorizer(item))


# ---------------------------------------------------------------------------
# metrics

def _one_hot(labels, classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 2:
        return y.astype(np.float64)
    out = np.zeros((y.size, classes))
    out[np.arange(y.size), y] = 1.0
    return out


def auc_score(y_true: np.ndarray, score: np.ndarray) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    y_true = np.asarray(y_true, dtype=bool).ravel()
    score = np.asarray(score, dtype=np.float64).ravel()
    n_pos = int(y_true.sum())
    n_neg = y_true.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both positive and negative examples")
    ranks = rankdata(score)
    return float((ranks[y_true].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def metric_value(metric: str, probs: np.ndarray, labels, multilabel: bool) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    classes = probs.shape[1]
    if metric == "accuracy":
        if multilabel:
            return float(np.mean((probs >= 0.5) == _one_hot(labels, classes).astype(bool)))
        return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))
    truth = _one_hot(labels, classes).astype(bool)
    if metric == "micro_f1":
        pred = probs >= 0.5 if multilabel else _one_hot(probs.argmax(axis=1), classes).astype(bool)
        tp = np.sum(pred & truth)
        denom = 2 * tp + np.sum(pred & ~truth) + np.sum(~pred & truth)
        return 1.0 if denom == 0 else float(2 * tp / denom)
    if metric == "auc":
        if not multilabel and classes == 2:
            return auc_score(truth[:, 1], probs[:, 1])
        return auc_score(truth, probs)
    raise SchemaError(f"unknown metric {metric!r}")


def evaluate(model: GNNModel, samples, metric: str = "accuracy", partitions: int = 1) -> float:
    """Score ``model`` on triples (or an already vectorized batch)."""
    batch = samples if isinstance(samples, VectorizedBatch) else vectorize(list(samples))
    return metric_value(metric, model.predict(batch, partitions), batch.labels,
                        model.config.multilabel)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    model: GNNModel
    history: list[tuple[int, str, str, float]] = field(default_factory=list)
    best_epoch: int = 0
    steps: int = 0
    seconds: float = 0.0

    def write_history(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "split", "metric", "value"])
            for epoch, split, metric, value in self.history:
                w.writerow([epoch, split, metric, repr(float(value))])

    def losses(self) -> list[float]:
        return [v for _, split, m, v in self.history if split == "train" and m == "loss"]


def make_shards(n: int, workers: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Round-robin assignment of a seeded permutation of sample indices."""
    if n < workers:
        raise ShardError(f"{n} samples cannot fill {workers} shards")
    perm = rng.permutation(n)
    return [perm[w::workers] for w in range(workers)]


def _batches(shard: np.ndarray, size: int) -> list[np.ndarray]:
    return [shard[i:i + size] for i in range(0, len(shard), size)]


def train(samples: Sequence, model_config: ModelConfig, config: TrainConfig,
          val_samples: Sequence | None = None, init_seed: int | None = None) -> TrainResult:
    """Train from ``(target, label, GraphFeature)`` triples; keeps the best-validation model."""
    samples = list(samples)
    if not samples:
        raise ShardError("no training samples")
    model = GNNModel.init(model_config, config.seed if init_seed is None else init_seed)
    store = ParameterStore(model.params(), AdamState(lr=config.lr, weight_decay=config.weight_decay),
                           config.mode)
    val_batch = vectorize(list(val_samples)) if val_samples else None
    result = TrainResult(model)
    best = -np.inf
    best_params = store.snapshot()
    pipeline = prefetch_pipeline if config.prefetch else sequential_pipeline
    t0 = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        shards = make_shards(len(samples), config.workers,
                             np.random.default_rng([config.seed, epoch]))
        plans = [_batches(s, config.batch_size) for s in shards]
        n_steps = max(len(p) for p in plans)
        participants = [sum(1 for p in plans if len(p) > s) for s in range(n_steps)]
        losses: list[list[tuple[float, int]]] = [[] for _ in range(config.workers)]
        errors: list[BaseException] = []

        def run_worker(wid: int):
            local = model.copy()
            rng = np.random.default_rng([config.seed, epoch, wid])

            def compute(item):
                step, batch = item
                _, params = store.pull()
                local.set_params(params)
                logits, cache = local.forward(batch, partitions=config.partitions,
                                              dropout=config.dropout, rng=rng)
                loss, d_logits = loss_and_grad(logits, batch.labels, model_config.multilabel)
                grads = local.backward(cache, d_logits)
                n = len(batch.targets)
                store.push(wid, grads, n, step=(epoch, step), participants=participants[step])
                return loss, n

            reader = ((s, [samples[i] for i in idx]) for s, idx in enumerate(plans[wid]))
            try:
                for res in pipeline(reader, lambda it: (it[0], vectorize(it[1])), compute):
                    losses[wid].append(res)
            except BaseException as exc:
                errors.append(exc)
                store.abort()  # release peers waiting on this worker

        if config.workers == 1:
            run_worker(0)
        else:
            threads = [threading.Thread(target=run_worker, args=(w,)) for w in range(config.workers)]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
        if errors:
            raise next((e for e in errors if not isinstance(e, ShardError)), errors[0])
        result.steps += n_steps
        flat = [x for wl in losses for x in wl]
        epoch_loss = sum(l * n for l, n in flat) / sum(n for _, n in flat)
        if not np.isfinite(epoch_loss):
            raise NumericsError(f"non-finite training loss at epoch {epoch}")
        result.history.append((epoch, "train", "loss", epoch_loss))

        if val_batch is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
            snap = store.snapshot()
            model.set_params(snap)
            val = evaluate(model, val_batch, config.metric, config.partitions)
            result.history.append((epoch, "val", config.metric, val))
            if val > best:
                best, best_params, result.best_epoch = val, snap, epoch
        log.debug("epoch %d loss %.4f", epoch, epoch_loss)

    model.set_params(best_params if val_batch is not None else store.snapshot())
    result.seconds = time.perf_counter() - t0
    return result
