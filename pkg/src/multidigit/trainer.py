"""Mini-batch momentum SGD on the sequence negative log-likelihood."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evaluator
from .dataio import DatasetManifest, Pipeline, augment_batch, load_resized
from .network import Model, load_checkpoint, save_checkpoint
from .sequence_head import (
    SequenceLabel,
    label_arrays,
    nll_loss_and_grad_batch,
    predict_max_sequence_batch,
)

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.5
    decay_every: int = 10  # epochs
    epochs: int = 10
    max_steps: int | None = None
    dropout: bool = True
    augment: bool = True
    val_fraction: float = 0.1
    seed: int = 0
    checkpoint_dir: str | None = None
    coverage_target: float = 0.98
    eval_batch_size: int = 256

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")

    def rate_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // max(self.decay_every, 1))


@dataclass
class EpochStats:
    epoch: int
    steps: int
    train_loss: float
    val_accuracy: float
    val_coverage: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    cpu_time: float = 0.0
    best: dict[str, int] = field(default_factory=dict)  # metric -> epoch
    diverged: bool = False

    @property
    def best_accuracy(self) -> float:
        return max((e.val_accuracy for e in self.epochs), default=float("nan"))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "steps", "train_loss", "val_accuracy", "val_coverage", "seconds"])
            for e in self.epochs:
                w.writerow([e.epoch, e.steps, f"{e.train_loss:.6f}", f"{e.val_accuracy:.6f}", f"{e.val_coverage:.6f}", f"{e.seconds:.3f}"])


class SGD:
    """Momentum SGD: ``v <- mu * v - lr * g``; ``p <- p + v``."""

    def __init__(self, model: Model, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in model.params.items()}

    def apply(self, model: Model, grads: dict[str, np.ndarray], lr: float) -> None:
        for k, p in model.params.items():
            g = grads[k]
            if self.momentum:
                v = self.velocity[k]
                v *= self.momentum
                v -= lr * g
                p += v
            else:
                p -= lr * g
        model.bump()


def sgd_step(
    model: Model,
    images: np.ndarray,
    lengths: np.ndarray,
    chars: np.ndarray,
    optimizer: SGD,
    lr: float,
    rng: np.random.Generator | None = None,
    dropout: bool = True,
) -> float:
    """One update on the mean per-example NLL of a batch; returns that loss.

    The parameters are left untouched if the loss or any gradient is not
    finite.
    """
    if len(images) == 0:
        raise ValueError("empty batch")
    with np.errstate(over="ignore", invalid="ignore"):
        out = model.forward(images, train=True, rng=rng, dropout=dropout)
        if not (np.isfinite(out.length_logits).all() and np.isfinite(out.char_logits).all()):
            raise TrainingDiverged("non-finite logits")
        loss, d_len, d_chr, _ = nll_loss_and_grad_batch(out.length_logits, out.char_logits, lengths, chars)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss}")
        grads = model.backward(out.cache, d_len, d_chr)
    if not all(np.isfinite(g).all() for g in grads.values()):
        raise TrainingDiverged("non-finite gradient")
    optimizer.apply(model, grads, lr)
    return loss


# --------------------------------------------------------------------------
# splitting and evaluation


def validation_split(ids: list[str], fraction: float) -> tuple[list[int], list[int]]:
    """Deterministic train/validation split by a hash of each sample id."""
    train_idx, val_idx = [], []
    cut = int(round(fraction * 10_000))
    for i, sid in enumerate(ids):
        h = int.from_bytes(hashlib.sha1(sid.encode()).digest()[:4], "big") % 10_000
        (val_idx if h < cut else train_idx).append(i)
    return train_idx, val_idx


def transcribe_arrays(model: Model, images: np.ndarray, batch_size: int = 256):
    out = []
    for i in range(0, len(images), batch_size):
        head = model.forward(images[i : i + batch_size])
        out.extend(predict_max_sequence_batch(head.length_logp, head.char_logp))
    return out


def evaluate_arrays(model: Model, images: np.ndarray, labels: list[SequenceLabel], ids=None, batch_size: int = 256):
    preds = transcribe_arrays(model, images, batch_size)
    ids = ids or [str(i) for i in range(len(labels))]
    return [evaluator.EvalRecord(sid, t, lab) for sid, t, lab in zip(ids, preds, labels)]


# --------------------------------------------------------------------------
# training loop


@dataclass
class PreparedData:
    resized: np.ndarray
    lengths: np.ndarray
    chars: np.ndarray
    labels: list[SequenceLabel]
    ids: list[str]

    def __len__(self) -> int:
        return len(self.labels)


def prepare(manifest: DatasetManifest, pipeline: Pipeline, channels: int, indices=None) -> PreparedData:
    sub = manifest if indices is None else manifest.subset(indices)
    labels = sub.labels()
    lengths, chars = label_arrays(labels, manifest.max_len)
    return PreparedData(load_resized(sub, pipeline, channels), lengths, chars, labels, [s.id for s in sub.samples])


def _rng_state(rng: np.random.Generator) -> np.ndarray:
    return np.array(json.dumps(rng.bit_generator.state))


def _restore_rng(state: np.ndarray) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(str(state))
    return rng


def train(
    model: Model,
    manifest: DatasetManifest | None,
    config: TrainConfig,
    pipeline: Pipeline | None = None,
    resume_from=None,
    data: tuple[PreparedData, PreparedData] | None = None,
) -> TrainReport:
    """Train ``model`` in place.

    The validation split is carved out of ``manifest`` by id hash. After each
    epoch the model is scored on it; with ``checkpoint_dir`` set, the epoch
    state goes to ``last.npz`` and the best models by validation accuracy and
    by coverage at ``coverage_target`` go to ``best_accuracy.npz`` and
    ``best_coverage.npz``. ``resume_from`` continues from a ``last.npz``.
    ``data`` may pass already prepared (train, validation) sets.
    """
    cfg = model.config
    if cfg.max_len != (manifest.max_len if manifest is not None else cfg.max_len):
        raise ValueError("manifest max_len does not match the model")
    pipeline = pipeline or Pipeline.for_input(cfg.input_shape)
    if data is None:
        if manifest is None or len(manifest) == 0:
            raise ValueError("empty training manifest")
        train_idx, val_idx = validation_split([s.id for s in manifest.samples], config.val_fraction)
        if not val_idx:
            raise ValueError("validation split is empty")
        if not train_idx:
            raise ValueError("training split is empty")
        channels = cfg.input_shape[2]
        train_data = prepare(manifest, pipeline, channels, train_idx)
        val_data = prepare(manifest, pipeline, channels, val_idx)
    else:
        train_data, val_data = data
        if len(val_data) == 0:
            raise ValueError("validation split is empty")
    val_images = augment_batch(val_data.resized, pipeline, train=False)

    report = TrainReport()
    optimizer = SGD(model, config.momentum)
    rng = np.random.default_rng(config.seed)
    start_epoch, steps = 0, 0
    best = {"accuracy": -1.0, "coverage": -1.0}
    if resume_from is not None:
        loaded, meta, state = load_checkpoint(resume_from)
        for k in model.params:
            model.params[k][...] = loaded.params[k]
        model.bump()
        for k in optimizer.velocity:
            optimizer.velocity[k][...] = state[f"velocity/{k}"]
        rng = _restore_rng(state["rng"])
        start_epoch, steps = meta["epoch"] + 1, meta["steps"]
        best = meta["best_values"]
        report.best = dict(meta["best"])

    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    shared = {"pipeline": pipeline.to_dict()}
    if manifest is not None:
        shared["alphabet"] = manifest.alphabet
    t_wall, t_cpu = time.perf_counter(), time.process_time()
    n = len(train_data)
    bs = config.batch_size
    for epoch in range(start_epoch, config.epochs):
        if config.max_steps is not None and steps >= config.max_steps:
            break
        t0 = time.perf_counter()
        lr = config.rate_at(epoch)
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, bs):
            if config.max_steps is not None and steps >= config.max_steps:
                break
            idx = np.sort(order[i : i + bs])
            images = augment_batch(train_data.resized[idx], pipeline, rng, train=config.augment)
            try:
                loss = sgd_step(model, images, train_data.lengths[idx], train_data.chars[idx], optimizer, lr, rng, config.dropout)
            except TrainingDiverged as exc:
                log.error("epoch %d step %d: %s", epoch, steps, exc)
                report.diverged = True
                break
            losses.append(loss)
            steps += 1
        report.step_losses.extend(losses)
        if report.diverged:
            break
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                records = evaluate_arrays(model, val_images, val_data.labels, val_data.ids, config.eval_batch_size)
        except ValueError as exc:  # non-finite logits
            log.error("epoch %d evaluation: %s", epoch, exc)
            report.diverged = True
            break
        acc = evaluator.sequence_accuracy(records)
        cov = evaluator.coverage_at_accuracy(records, config.coverage_target)
        cov_value = cov[1] if cov is not None else 0.0
        stats = EpochStats(epoch, steps, float(np.mean(losses)) if losses else float("nan"), acc, cov_value, time.perf_counter() - t0)
        report.epochs.append(stats)
        log.info("epoch %d: loss %.4f  val acc %.4f  coverage@%.0f%% %.4f  (%.1fs)", epoch, stats.train_loss, acc, 100 * config.coverage_target, cov_value, stats.seconds)

        for metric, value in (("accuracy", acc), ("coverage", cov_value)):
            if value > best[metric]:
                best[metric] = value
                report.best[metric] = epoch
                if ckpt_dir is not None:
                    save_checkpoint(ckpt_dir / f"best_{metric}.npz", model, {"epoch": epoch, metric: value, **shared})
        if ckpt_dir is not None:
            state = {f"velocity/{k}": v for k, v in optimizer.velocity.items()}
            state["rng"] = _rng_state(rng)
            meta = {
                "epoch": epoch,
                "steps": steps,
                "best": report.best,
                "best_values": best,
                "train": asdict(config),
                **shared,
            }
            save_checkpoint(ckpt_dir / "last.npz", model, meta, state)
            save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.npz", model, meta, state)

    report.wall_clock = time.perf_counter() - t_wall
    report.cpu_time = time.process_time() - t_cpu
    return report
