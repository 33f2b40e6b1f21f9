"""Desk-scale training loop: AdamW, cosine schedule with linear warmup, label
smoothing, mixup/cutmix, and per-epoch RNG substreams.

Everything here is deterministic given `TrainConfig.seed`: each epoch owns
four independent substreams (shuffle, augment, mixup, droppath), so the
history and the resulting checkpoint are bitwise reproducible regardless of
wall-clock order or platform.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import configio
from . import tensor as T
from .data import LabeledImage, batch_arrays
from .errors import ConfigError, NumericsError
from .model import Model, save_checkpoint
from .seeding import substream
from .tensor import Tensor

WARMUP_FLOOR = 1e-6   # warmup starts at this fraction of the base lr
COSINE_FLOOR = 1e-2   # cosine decays to this fraction of the base lr


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: int = 5
    label_smoothing: float = 0.1
    mixup_alpha: float = 0.0
    cutmix_alpha: float = 0.0
    seed: int = 0
    # random-crop is label-safe everywhere; horizontal flip is NOT safe for
    # position-dependent labels (quadrant tasks) and must be switched off there
    augment_crop: bool = True
    augment_flip: bool = True
    autoscale: bool = False
    world: int = 1
    # batch*world / denominator; 128x4 devices at the stock lr fixes this at 1024
    autoscale_denominator: int = 1024

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs {self.epochs} must be >= 0")
        if self.batch < 1:
            raise ConfigError(f"batch {self.batch} must be >= 1")
        for name in ("lr", "weight_decay", "mixup_alpha", "cutmix_alpha"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing {self.label_smoothing} outside [0, 1)")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.warmup_epochs < 0 or self.world < 1 or self.autoscale_denominator < 1:
            raise ConfigError("warmup_epochs/world/autoscale_denominator out of range")

    def effective_lr(self) -> float:
        if self.autoscale:
            return self.lr * (self.batch * self.world) / self.autoscale_denominator
        return self.lr

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch": self.batch, "lr": self.lr,
                "weight_decay": self.weight_decay, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps,
                "warmup_epochs": self.warmup_epochs,
                "label_smoothing": self.label_smoothing,
                "mixup_alpha": self.mixup_alpha, "cutmix_alpha": self.cutmix_alpha,
                "seed": self.seed, "augment_crop": self.augment_crop,
                "augment_flip": self.augment_flip,
                "autoscale": self.autoscale, "world": self.world,
                "autoscale_denominator": self.autoscale_denominator}

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        configio.check_keys(d, required={"epochs"},
                            optional={"batch", "lr", "weight_decay", "beta1", "beta2",
                                      "eps", "warmup_epochs", "label_smoothing",
                                      "mixup_alpha", "cutmix_alpha", "seed",
                                      "augment_crop", "augment_flip",
                                      "autoscale", "world", "autoscale_denominator"},
                            context="train config")
        cfg = TrainConfig(
            epochs=int(d["epochs"]), batch=int(d.get("batch", 32)),
            lr=float(d.get("lr", 5e-4)), weight_decay=float(d.get("weight_decay", 0.05)),
            beta1=float(d.get("beta1", 0.9)), beta2=float(d.get("beta2", 0.999)),
            eps=float(d.get("eps", 1e-8)), warmup_epochs=int(d.get("warmup_epochs", 5)),
            label_smoothing=float(d.get("label_smoothing", 0.1)),
            mixup_alpha=float(d.get("mixup_alpha", 0.0)),
            cutmix_alpha=float(d.get("cutmix_alpha", 0.0)), seed=int(d.get("seed", 0)),
            augment_crop=bool(d.get("augment_crop", True)),
            augment_flip=bool(d.get("augment_flip", True)),
            autoscale=bool(d.get("autoscale", False)), world=int(d.get("world", 1)),
            autoscale_denominator=int(d.get("autoscale_denominator", 1024)))
        cfg.validate()
        return cfg


# ----------------------------------------------------------------- optimizer

@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def for_params(params: dict[str, np.ndarray]) -> "AdamWState":
        return AdamWState(m={k: np.zeros_like(p) for k, p in params.items()},
                          v={k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, t: int, cfg: TrainConfig,
               lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place on the buffers.

    `lr` overrides the config value so the schedule can drive it per step.
    Weight decay multiplies the parameter directly (theta *= 1 - lr*wd) and is
    independent of the moment estimates.
    """
    if t < 1:
        raise ConfigError(f"step index t={t} must be >= 1")
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ConfigError(f"param/grad name mismatch: {sorted(missing)}")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericsError(f"non-finite gradients for {sorted(bad)}; step aborted")
    step_lr = cfg.effective_lr() if lr is None else lr
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, theta in params.items():
        g = grads[name]
        if cfg.weight_decay:
            theta *= 1.0 - step_lr * cfg.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        theta -= step_lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# -------------------------------------------------------------------- losses

def onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"label outside [0, {num_classes}): "
                         f"min={labels.min()}, max={labels.max()}")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def smooth_targets(labels: np.ndarray, num_classes: int, eps: float) -> np.ndarray:
    """(1-eps) on the true class plus eps/K spread over every class."""
    return onehot(labels, num_classes) * (1.0 - eps) + eps / num_classes


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of -sum(target * log_softmax(logits))."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ConfigError(f"target shape {targets.shape} != logits shape {logits.shape}")
    logp = T.log_softmax(logits, axis=-1)
    per_sample = T.tsum(logp * Tensor(-targets), axis=-1)
    return T.tmean(per_sample)


def smoothed_cross_entropy(logits: Tensor, labels: np.ndarray, eps: float) -> Tensor:
    if not 0.0 <= eps < 1.0:
        raise ConfigError(f"smoothing {eps} outside [0, 1)")
    return soft_cross_entropy(logits, smooth_targets(labels, logits.shape[-1], eps))


# --------------------------------------------------------------- mixup/cutmix

@dataclass(frozen=True)
class MixResult:
    images: np.ndarray
    targets: np.ndarray
    mode: str               # "none" | "mixup" | "cutmix"
    lam: float              # weight of the original sample in the target blend
    box: tuple[int, int, int, int] | None = None  # cutmix (y0, y1, x0, x1)


def mixup_cutmix(images: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
                 rng: np.random.Generator) -> MixResult:
    """Blend a batch with a shuffled copy of itself.

    One scheme is chosen per batch. For cutmix the target weight is recomputed
    from the pasted rectangle, so `lam` always equals the exact fraction of
    surviving original pixels. Draw order (perm, mode, lam, box corner) is part
    of the reproducibility contract.
    """
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    modes = [m for m, a in (("mixup", cfg.mixup_alpha), ("cutmix", cfg.cutmix_alpha))
             if a > 0]
    b = images.shape[0]
    if not modes or b < 2:
        return MixResult(images, targets, "none", 1.0)
    perm = rng.permutation(b)
    mode = modes[int(rng.integers(len(modes)))] if len(modes) > 1 else modes[0]
    alpha = cfg.mixup_alpha if mode == "mixup" else cfg.cutmix_alpha
    lam = float(rng.beta(alpha, alpha))
    if mode == "mixup":
        mixed = lam * images + (1.0 - lam) * images[perm]
        box = None
    else:
        h, w = images.shape[-2:]
        cut = math.sqrt(1.0 - lam)
        ch, cw = int(h * cut), int(w * cut)
        cy = int(rng.integers(h))
        cx = int(rng.integers(w))
        y0, y1 = max(0, cy - ch // 2), min(h, cy + (ch + 1) // 2)
        x0, x1 = max(0, cx - cw // 2), min(w, cx + (cw + 1) // 2)
        mixed = images.copy()
        mixed[:, :, y0:y1, x0:x1] = images[perm][:, :, y0:y1, x0:x1]
        lam = 1.0 - (y1 - y0) * (x1 - x0) / (h * w)
        box = (y0, y1, x0, x1)
    mixed_targets = lam * targets + (1.0 - lam) * targets[perm]
    return MixResult(mixed, mixed_targets, mode, lam, box)


# ------------------------------------------------------------------- schedule

def lr_at(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup from WARMUP_FLOOR*lr, then cosine decay to COSINE_FLOOR*lr."""
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        frac = step / warmup_steps
        return base_lr * (WARMUP_FLOOR + (1.0 - WARMUP_FLOOR) * frac)
    floor = base_lr * COSINE_FLOOR
    span = max(1, total_steps - 1 - warmup_steps)
    t = (step - warmup_steps) / span
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


# ----------------------------------------------------------------- train loop

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    lr: float

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "val_accuracy": self.val_accuracy, "lr": self.lr}


def loss_and_grads(model: Model, images: np.ndarray, targets: np.ndarray,
                   training: bool = False,
                   rng: np.random.Generator | None = None) -> tuple[float, dict]:
    """Forward + backward on one batch; returns (loss, name->grad copies)."""
    for p in model.params.values():
        p.tensor.zero_grad()
    logits, _ = model.forward(images, training=training, rng=rng)
    loss = soft_cross_entropy(logits, targets)
    loss.backward()
    grads = {}
    for name, p in model.params.items():
        if p.grad is None:
            raise NumericsError(f"parameter {name} received no gradient")
        grads[name] = p.grad.copy()
    return loss.item(), grads


def evaluate(model: Model, images: list[LabeledImage], batch: int) -> float:
    """Top-1 accuracy in eval mode (no augmentation, no rng)."""
    if not images:
        raise ConfigError("cannot evaluate on an empty set")
    correct = 0
    size = model.cfg.input_size
    for start in range(0, len(images), batch):
        xs, ys = batch_arrays(images[start:start + batch], size, train=False)
        logits, _ = model.forward(xs)
        correct += int((np.argmax(logits.data, axis=1) == ys).sum())
    return correct / len(images)


def train(model: Model, train_set: list[LabeledImage], val_set: list[LabeledImage],
          cfg: TrainConfig, out_dir: str | None = None) -> list[EpochRecord]:
    """Optimize `model` in place; returns one record per epoch.

    When `out_dir` is given, `best.ckpt` tracks the best validation accuracy
    (seeded with the initial weights, so a zero-epoch run still leaves a
    loadable checkpoint) and `history.jsonl` gets one line per epoch. A
    non-finite loss aborts with NumericsError; the last-good checkpoint and
    history lines are left on disk.
    """
    cfg.validate()
    if not train_set:
        raise ConfigError("empty training set")
    params = {name: p.data for name, p in model.params.items()}
    state = AdamWState.for_params(params)
    steps_per_epoch = max(1, math.ceil(len(train_set) / cfg.batch))
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    base_lr = cfg.effective_lr()
    size = model.cfg.input_size
    num_classes = model.cfg.num_classes

    history_path = ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "best.ckpt")
        history_path = os.path.join(out_dir, "history.jsonl")
        open(history_path, "w").close()
        save_checkpoint(ckpt_path, model)

    history: list[EpochRecord] = []
    best_acc = -1.0
    t = 0
    for epoch in range(1, cfg.epochs + 1):
        shuffle_rng = substream(cfg.seed, "shuffle", epoch)
        augment_rng = substream(cfg.seed, "augment", epoch)
        mix_rng = substream(cfg.seed, "mixup", epoch)
        droppath_rng = substream(cfg.seed, "droppath", epoch)
        order = shuffle_rng.permutation(len(train_set))
        loss_sum = 0.0
        step_lr = base_lr
        for start in range(0, len(train_set), cfg.batch):
            batch = [train_set[i] for i in order[start:start + cfg.batch]]
            xs, ys = batch_arrays(batch, size, train=True, rng=augment_rng,
                                  crop=cfg.augment_crop, flip=cfg.augment_flip)
            targets = smooth_targets(ys, num_classes, cfg.label_smoothing)
            mixed = mixup_cutmix(xs, targets, cfg, mix_rng)
            step_lr = lr_at(t, total_steps, base_lr, warmup_steps)
            t += 1
            loss, grads = loss_and_grads(model, mixed.images, mixed.targets,
                                         training=True, rng=droppath_rng)
            if not math.isfinite(loss):
                raise NumericsError(
                    f"non-finite training loss at epoch {epoch} step {t}; "
                    "last-good checkpoint retained")
            adamw_step(params, grads, state, t, cfg, lr=step_lr)
            loss_sum += loss * len(batch)
        record = EpochRecord(epoch=epoch, train_loss=loss_sum / len(train_set),
                             val_accuracy=evaluate(model, val_set, cfg.batch),
                             lr=step_lr)
        history.append(record)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(configio.dump_jsonl_line(record.as_dict()))
        if record.val_accuracy > best_acc:
            best_acc = record.val_accuracy
            if ckpt_path is not None:
                save_checkpoint(ckpt_path, model)
    return history
