"""SGD training loop, evaluation metrics and the temporal-kernel ablation."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng as rngs
from . import tensor as tn
from .bones import DatasetManifest, JointSequence, SynthDataset, bone_features, iter_sequences
from .layers import NonFiniteError
from .models import Batch, Model, ModelConfig, build_model
from .skeleton import resolve_topology

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class ArrayDataset:
    """In-memory (N, C, T, S, M) joint and bone arrays with labels."""

    labels: np.ndarray
    joints: np.ndarray | None
    bones: np.ndarray | None
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def batch(self, idx) -> Batch:
        return Batch(
            self.labels[idx],
            None if self.joints is None else self.joints[idx],
            None if self.bones is None else self.bones[idx],
        )

    def subset(self, idx) -> "ArrayDataset":
        b = self.batch(idx)
        return ArrayDataset(b.labels, b.joints, b.bones, self.class_names)

    @classmethod
    def from_sequences(cls, sequences: Sequence[JointSequence], class_names, topology: str) -> "ArrayDataset":
        if not sequences:
            raise ValueError("empty dataset")
        topo = resolve_topology(topology)[0]
        joints = np.stack([s.data for s in sequences]).astype(np.float64)
        bones = bone_features(joints, topo, sequences[0].mode)
        labels = np.array([s.label for s in sequences], dtype=np.int64)
        return cls(labels, joints, bones, list(class_names))

    @classmethod
    def from_synth(cls, ds: SynthDataset) -> "ArrayDataset":
        return cls.from_sequences(ds.sequences, ds.class_names, ds.topology)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "ArrayDataset":
        """Load a saved dataset; bone-only datasets carry no joint arrays."""
        if manifest.kind == "joints":
            return cls.from_sequences(list(iter_sequences(manifest)), manifest.class_names, manifest.topology)
        if len(manifest) == 0:
            raise ValueError("empty dataset")
        bones = np.stack([s.data for s in iter_sequences(manifest)]).astype(np.float64)
        return cls(manifest.labels, None, bones, list(manifest.class_names))


def stratified_split(labels: np.ndarray, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic per-class split; returns (train_idx, test_idx)."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = rngs.stream(seed, "split")
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = max(1, int(round(test_fraction * len(idx))))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 30
    decay_epochs: tuple[int, ...] = (20,)
    decay_factor: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0
    # >1 shards each batch across threads; batch-norm statistics then come per shard
    workers: int = 1

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        self.decay_epochs = tuple(self.decay_epochs)

    def lr_at(self, epoch: int) -> float:
        """Step decay; ``epoch`` counts from 0."""
        drops = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr * self.decay_factor ** drops


class SGD:
    """Heavy-ball momentum: v <- mu v + g; theta <- theta - lr v."""

    def __init__(self, params: Sequence[tn.Parameter], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                v *= self.momentum
                v += g
                p.data -= lr * v
            else:
                p.data -= lr * g

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle order, a pure function of (seed, epoch)."""
    return rngs.stream(seed, "shuffle", epoch).permutation(n)


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    log_lines: list[str] = field(default_factory=list)


def _shard_pass(model: Model, batch: Batch):
    with tn.defer_running_stats() as stats:
        logits = model(batch, training=True)
        loss = tn.softmax_cross_entropy(logits, batch.labels)
    grads: dict[int, np.ndarray] = {}
    if math.isfinite(loss.item()):
        tn.backward(loss, leaf_grads=grads)
    return loss.item(), logits.data, grads, stats


def _parallel_step(model: Model, data: ArrayDataset, idx: np.ndarray, pool: ThreadPoolExecutor, workers: int):
    """Forward/backward over shards of one batch; reduce in shard order so the
    result does not depend on thread scheduling."""
    shards = [s for s in np.array_split(idx, workers) if len(s)]
    results = list(pool.map(lambda s: _shard_pass(model, data.batch(s)), shards))
    value = 0.0
    for shard, (loss, _, grads, stats) in zip(shards, results):
        w = len(shard) / len(idx)
        value += w * loss
        for p in model.parameters():
            g = grads.get(id(p))
            if g is not None:
                p.grad = w * g if p.grad is None else p.grad + w * g
        for update in stats:
            tn.update_running_stats(*update)
    return value, np.concatenate([r[1] for r in results])


def train(model: Model, data: ArrayDataset, cfg: TrainConfig,
          on_epoch: Callable[[int, float, float], None] | None = None) -> TrainResult:
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    result = TrainResult()
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        _run_epochs(model, data, cfg, opt, result, pool, on_epoch)
    finally:
        if pool is not None:
            pool.shutdown()
    return result


def _run_epochs(model, data, cfg, opt, result, pool, on_epoch) -> None:
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = epoch_order(len(data), cfg.seed, epoch)
        total, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = data.batch(idx)
            opt.zero_grad()
            try:
                if pool is None:
                    logits = model(batch, training=True)
                    loss = tn.softmax_cross_entropy(logits, batch.labels)
                    value, scores = loss.item(), logits.data
                else:
                    value, scores = _parallel_step(model, data, idx, pool, cfg.workers)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch + 1}, step {step + 1} (lr={lr:g}): {exc}") from exc
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch + 1}, step {step + 1} (lr={lr:g})")
            if pool is None:
                loss.backward()
            opt.step(lr)
            step += 1
            total += value * len(idx)
            correct += int((scores.argmax(axis=1) == batch.labels).sum())
            result.step_losses.append(value)
            result.log_lines.append(f"epoch={epoch + 1} step={step} loss={value:.6f} lr={lr:g}")
        epoch_loss = total / len(data)
        acc = correct / len(data)
        result.epoch_losses.append(epoch_loss)
        result.train_accuracy.append(acc)
        log.info("epoch %d loss %.4f acc %.3f lr %g", epoch + 1, epoch_loss, acc, lr)
        if on_epoch is not None:
            on_epoch(epoch + 1, epoch_loss, acc)


# -- evaluation ----------------------------------------------------------------

def predict(model: Model, data: ArrayDataset, batch_size: int = 32) -> np.ndarray:
    out = []
    with tn.no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            out.append(model(data.batch(idx), training=False).data)
    return np.concatenate(out)


def rank_classes(logits: np.ndarray) -> np.ndarray:
    """Classes by descending score; ties go to the lower class index."""
    return np.argsort(-logits, axis=1, kind="stable")


def top_k_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    if k < 1 or k > logits.shape[1]:
        raise ValueError(f"k={k} outside [1, {logits.shape[1]}]")
    top = rank_classes(logits)[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


@dataclass
class EvalReport:
    top1: float
    top5: float
    per_class: list[float]
    confusion: list[list[int]]
    class_names: list[str]

    def to_json(self) -> str:
        return json.dumps({"schema": "gecnn-eval", "version": 1, **asdict(self)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        if doc.get("schema") != "gecnn-eval":
            raise ValueError("not an evaluation report")
        if doc.get("version") != 1:
            raise ValueError(f"unsupported evaluation report version {doc.get('version')!r}")
        return cls(doc["top1"], doc["top5"], doc["per_class"], doc["confusion"], doc["class_names"])

    def per_class_table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "name", "samples", "accuracy"])
        for c, (name, acc) in enumerate(zip(self.class_names, self.per_class)):
            w.writerow([c, name, sum(self.confusion[c]), f"{acc:.4f}"])
        return buf.getvalue()


def evaluate_logits(logits: np.ndarray, labels: np.ndarray, class_names: Sequence[str]) -> EvalReport:
    C = logits.shape[1]
    pred = rank_classes(logits)[:, 0]
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    counts = confusion.sum(axis=1)
    per_class = np.where(counts > 0, np.diag(confusion) / np.maximum(counts, 1), 0.0)
    return EvalReport(
        top1=top_k_accuracy(logits, labels, 1),
        top5=top_k_accuracy(logits, labels, min(5, C)),
        per_class=[float(a) for a in per_class],
        confusion=confusion.tolist(),
        class_names=list(class_names),
    )


def evaluate(model: Model, data: ArrayDataset, batch_size: int = 32) -> EvalReport:
    return evaluate_logits(predict(model, data, batch_size), data.labels, data.class_names)


# -- temporal kernel ablation ------------------------------------------------

@dataclass
class AblationRow:
    kernel_size: int
    top1: float
    top5: float


def ablate_temporal_kernel(sizes: Sequence[int], base: ModelConfig, train_data: ArrayDataset,
                           test_data: ArrayDataset, train_cfg: TrainConfig) -> list[AblationRow]:
    """Train one model per kernel size with identical seeds and schedule."""
    for k in sizes:
        if k % 2 == 0 or k < 1:
            raise ValueError(f"temporal kernel sizes must be odd, got {k}")
    rows = []
    for k in sizes:
        model = build_model(replace(base, kernel_size=k))
        train(model, train_data, train_cfg)
        report = evaluate(model, test_data)
        log.info("kernel %d: top1 %.4f top5 %.4f", k, report.top1, report.top5)
        rows.append(AblationRow(k, report.top1, report.top5))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["temporal_kernel_size", "top1", "top5"])
    for r in rows:
        w.writerow([r.kernel_size, f"{r.top1:.4f}", f"{r.top5:.4f}"])
    return buf.getvalue()


def write_log(path, lines: Sequence[str]) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
