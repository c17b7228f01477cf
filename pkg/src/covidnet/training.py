"""Adam, reduce-on-plateau learning rate, the epoch loop and checkpoints."""
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import arch, checkpoint
from . import tensor as T
from .data import AugmentationConfig, augment, patient_split, preprocess, rebalanced_index_batches
from .errors import CheckpointError, TrainingHalted

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "train_loss", "val_loss", "val_acc", "train_acc")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params, lr=2e-4, **kw):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, lr, **kw)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingHalted(f"non-finite gradient for {name!r} at step {t}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_p[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_p, replace(state, m=new_m, v=new_v, step=t)


@dataclass
class PlateauSchedule:
    lr: float = 2e-4
    factor: float = 0.7
    patience: int = 5
    min_lr: float = 0.0
    mode: str = "min"
    threshold: float = 1e-6
    best: float = math.inf
    epochs_since_improvement: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError(f"factor must be in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.mode not in ("min", "max"):
            raise ValueError(f"mode must be 'min' or 'max', got {self.mode!r}")
        if self.mode == "max" and self.best == math.inf:
            self.best = -math.inf

    def update(self, metric):
        """Feed one epoch's monitored value; returns the learning rate to use next."""
        if self.mode == "min":
            improved = metric <= self.best - self.threshold
        else:
            improved = metric >= self.best + self.threshold
        if improved:
            self.best = metric
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
            if self.epochs_since_improvement > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.epochs_since_improvement = 0
        return self.lr


def schedule_update(sched: PlateauSchedule, epoch_metric):
    return sched.update(epoch_metric)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    epochs: int = 22
    batch_size: int = 64
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    factor: float = 0.7
    patience: int = 5
    min_lr: float = 0.0
    monitor: str = "val_loss"
    val_fraction: float = 0.1
    augment: bool = True
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    eval_batch_size: int = 64
    warm_start: Optional[str] = None
    keep_epoch_checkpoints: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be nonnegative, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.monitor not in ("val_loss", "val_acc"):
            raise ValueError(f"monitor must be val_loss or val_acc, got {self.monitor!r}")


@dataclass
class TrainState:
    adam: AdamState
    schedule: PlateauSchedule
    epoch: int = 0
    best_val_loss: float = math.inf
    arch_config: Optional[arch.ArchConfig] = None


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float
    train_acc: float

    def line(self):
        vals = [int(self.epoch)] + [float(getattr(self, f)) for f in LOG_FIELDS[1:]]
        return "\t".join(repr(v) for v in vals)


@dataclass
class TrainResult:
    log: list
    params: dict
    best_params: dict
    state: TrainState


def loss_and_grads(graph, params, images, labels):
    leaves = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
    with T.Tape() as tape:
        probs = arch.forward(graph, leaves, images)
        loss = T.cross_entropy(probs, labels)
    grads = T.backward(tape, loss)
    return loss.item(), probs.data, {k: grads.array(t) for k, t in leaves.items()}


def evaluate_loss(graph, params, images, labels, batch_size=64):
    """Mean cross-entropy and accuracy without recording gradients."""
    if len(images) == 0:
        return math.nan, math.nan
    probs = arch.predict(graph, params, images, batch_size)
    loss = T.cross_entropy(T.Tensor(probs), labels).item()
    acc = float(np.mean(probs.argmax(axis=1) == labels))
    return loss, acc


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(params, state: TrainState, path, arch_config=None):
    tensors = {f"param/{k}": v for k, v in params.items()}
    tensors.update({f"adam.m/{k}": v for k, v in state.adam.m.items()})
    tensors.update({f"adam.v/{k}": v for k, v in state.adam.v.items()})
    a, s = state.adam, state.schedule
    meta = {
        "format": "covidnet-train",
        "epoch": str(state.epoch),
        "best_val_loss": float(state.best_val_loss).hex(),
        "adam.step": str(a.step),
        "adam.lr": float(a.lr).hex(),
        "adam.beta1": float(a.beta1).hex(),
        "adam.beta2": float(a.beta2).hex(),
        "adam.eps": float(a.eps).hex(),
        "sched.lr": float(s.lr).hex(),
        "sched.factor": float(s.factor).hex(),
        "sched.patience": str(s.patience),
        "sched.min_lr": float(s.min_lr).hex(),
        "sched.mode": s.mode,
        "sched.threshold": float(s.threshold).hex(),
        "sched.best": float(s.best).hex(),
        "sched.wait": str(s.epochs_since_improvement),
    }
    if arch_config is not None:
        meta.update({f"arch.{k}": v for k, v in arch_config.to_mapping().items()})
    checkpoint.write(path, tensors, meta)


def load_checkpoint(path):
    """Return ``(params, state)``; the architecture config is on ``state.arch_config``."""
    tensors, meta = checkpoint.read(path)
    try:
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
        m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m/")}
        v = {k[7:]: x for k, x in tensors.items() if k.startswith("adam.v/")}
        h = float.fromhex
        adam = AdamState(m, v, int(meta["adam.step"]), h(meta["adam.lr"]), h(meta["adam.beta1"]),
                         h(meta["adam.beta2"]), h(meta["adam.eps"]))
        sched = PlateauSchedule(h(meta["sched.lr"]), h(meta["sched.factor"]), int(meta["sched.patience"]),
                                h(meta["sched.min_lr"]), meta["sched.mode"], h(meta["sched.threshold"]),
                                h(meta["sched.best"]), int(meta["sched.wait"]))
        state = TrainState(adam, sched, int(meta["epoch"]), h(meta["best_val_loss"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: missing or invalid training state field {exc}") from None
    arch_items = {k[5:]: val for k, val in meta.items() if k.startswith("arch.")}
    state.arch_config = arch.ArchConfig.from_mapping(arch_items) if arch_items else None
    return params, state


def load_params(path):
    """Parameters and architecture config from a checkpoint, ignoring optimiser state."""
    params, state = load_checkpoint(path)
    return params, state.arch_config


# --- training loop ------------------------------------------------------------

def _load_images(manifest, loader, size):
    if loader is None:
        def loader(rec):
            return preprocess(manifest.resolve(rec), size)
    if len(manifest) == 0:
        return np.zeros((0, size, size)), np.zeros(0, dtype=np.int64)
    return np.stack([loader(r) for r in manifest]), manifest.labels


def train(graph, params, manifest, config: TrainConfig, loader: Callable = None, resume=None,
          log_path=None, on_epoch: Callable = None) -> TrainResult:
    """Train on ``manifest`` with class-rebalanced, augmented batches.

    A patient-disjoint validation split (``config.val_fraction``) drives the
    plateau schedule and best-checkpoint selection. Every random draw derives
    from ``(config.seed, epoch)``, so a run resumed from an epoch checkpoint
    continues exactly as the uninterrupted run would.
    """
    size = graph.config.input_size if graph.config else graph.infer_shapes()[graph.input_id][1]
    train_part, val_part = patient_split(manifest, config.val_fraction, config.seed)
    x_train, y_train = _load_images(train_part, loader, size)
    x_val, y_val = _load_images(val_part, loader, size)
    ckdir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)

    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if resume is not None:
        params, state = load_checkpoint(resume)
    else:
        if config.warm_start:
            warm, _ = load_params(config.warm_start)
            params.update({k: w for k, w in warm.items() if k in params and w.shape == params[k].shape})
        mode = "min" if config.monitor == "val_loss" else "max"
        state = TrainState(
            AdamState.zeros(params, config.lr),
            PlateauSchedule(config.lr, config.factor, config.patience, config.min_lr, mode),
        )
    best_params = dict(params)
    logs = []
    if log_path is not None:
        fresh = resume is None or not Path(log_path).exists() or Path(log_path).stat().st_size == 0
        if fresh:
            Path(log_path).write_text("\t".join(LOG_FIELDS) + "\n")

    for epoch in range(state.epoch, config.epochs):
        lr = state.schedule.lr
        state.adam = replace(state.adam, lr=lr)
        aug_rng = np.random.default_rng([config.seed, epoch, 1])
        batches = rebalanced_index_batches(y_train, config.batch_size, [config.seed, epoch, 0])
        loss_sum = correct = seen = 0
        for idx in batches:
            imgs = x_train[idx]
            if config.augment:
                imgs = np.stack([augment(im, config.augmentation, aug_rng) for im in imgs])
            labels = y_train[idx]
            loss, probs, grads = loss_and_grads(graph, params, imgs[:, None], labels)
            if not math.isfinite(loss):
                raise TrainingHalted(f"non-finite loss at epoch {epoch + 1}")
            params, state.adam = adam_step(params, grads, state.adam)
            loss_sum += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == labels))
            seen += len(idx)
        val_loss, val_acc = evaluate_loss(graph, params, x_val[:, None], y_val, config.eval_batch_size)
        if not math.isfinite(val_loss):
            raise TrainingHalted(f"non-finite validation loss at epoch {epoch + 1}")
        state.schedule.update(val_loss if config.monitor == "val_loss" else val_acc)
        entry = EpochLog(epoch + 1, lr, loss_sum / seen, val_loss, val_acc, correct / seen)
        logs.append(entry)
        state.epoch = epoch + 1
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            best_params = dict(params)
            if ckdir:
                save_checkpoint(params, state, ckdir / "best.ckpt", graph.config)
        if ckdir:
            if config.keep_epoch_checkpoints:
                save_checkpoint(params, state, ckdir / f"epoch{epoch + 1:03d}.ckpt", graph.config)
            save_checkpoint(params, state, ckdir / "last.ckpt", graph.config)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(entry.line() + "\n")
        logger.info("epoch %d lr %.3g train_loss %.4f val_loss %.4f val_acc %.3f",
                    entry.epoch, lr, entry.train_loss, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(entry)
    return TrainResult(logs, params, best_params, state)
