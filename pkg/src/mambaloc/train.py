"""Seed-deterministic training loop for the localization model: batched
hybrid-loss descent, per-epoch validation F1/IoU, plateau rate decay, and
best-checkpoint saving.
"""

from __future__ import annotations

import dataclasses
import os
import time

import numpy as np

from .checkpoint import save_checkpoint
from .data import AUG_OPS, SampleRecord, augment
from .losses import hybrid_loss
from .metrics import pixel_scores
from .model import Model
from .optim import AdamW, PlateauScheduler
from .tensor import GradTape, Tensor


@dataclasses.dataclass
class TrainConfig:
    """Optimization hyperparameters; defaults follow the desk-scale setup."""

    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    patience: int = 3
    lr_factor: float = 0.5
    min_lr: float = 1e-6
    lambda_dice: float = 1.0
    lambda_focal: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    augment_ops: tuple = ()
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("train: epochs and batch_size must be >= 1")
        for op in self.augment_ops:
            if op not in AUG_OPS:
                raise ValueError(f"train: unknown augmentation {op!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _batch(pairs, indices, dtype):
    images = np.stack([pairs[i][0] for i in indices]).astype(dtype)
    masks = np.stack([pairs[i][1] for i in indices]).astype(dtype)[..., None]
    return Tensor(images), Tensor(masks)


def evaluate(model: Model, pairs, batch_size: int = 8):
    """Mean per-image F1 and IoU over (image, mask) pairs, eval mode."""
    model.eval()
    dtype = next(iter(model.named_parameters()))[1].data.dtype
    f1s, ious = [], []
    for start in range(0, len(pairs), batch_size):
        idx = range(start, min(start + batch_size, len(pairs)))
        images, _ = _batch(pairs, idx, dtype)
        probs = model(images).data
        for j, i in enumerate(idx):
            r = pixel_scores(probs[j, :, :, 0], pairs[i][1])
            f1s.append(r.f1)
            ious.append(r.iou)
    return float(np.mean(f1s)), float(np.mean(ious))


def train_model(model: Model, train_pairs, val_pairs, cfg: TrainConfig,
                seed: int, log=print, checkpoint_path: str | None = None):
    """Run the full schedule; returns the per-epoch history.

    Each history row carries epoch, train_loss, val_f1, val_iou, and lr.
    When ``checkpoint_path`` is set, the best-validation-F1 weights are
    saved there (final weights stay in ``model``).
    """
    if not train_pairs:
        raise ValueError("train: empty training set")
    if not val_pairs:
        raise ValueError("train: empty validation set")
    dtype = next(iter(model.named_parameters()))[1].data.dtype
    optimizer = AdamW(model.named_parameters(), lr=cfg.lr,
                      weight_decay=cfg.weight_decay)
    scheduler = PlateauScheduler(optimizer, factor=cfg.lr_factor,
                                 patience=cfg.patience, min_lr=cfg.min_lr)
    order_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB47C)))
    history = []
    best_f1 = -1.0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        if cfg.shuffle:
            order = order_rng.permutation(len(train_pairs))
        else:
            order = np.arange(len(train_pairs))
        epoch_pairs = train_pairs
        if cfg.augment_ops:
            epoch_pairs = []
            for i, (img, mask) in enumerate(train_pairs):
                rec = SampleRecord(image=img, mask=mask, meta={"index": i})
                out = augment(rec, cfg.augment_ops, seed=seed + epoch)
                epoch_pairs.append((out.image, out.mask))
        losses = []
        t0 = time.perf_counter()
        for start in range(0, len(order), cfg.batch_size):
            images, masks = _batch(epoch_pairs, order[start:start + cfg.batch_size], dtype)
            optimizer.zero_grad()
            with GradTape() as tape:
                probs = model(images)
                loss = hybrid_loss(probs, masks,
                                   lambda_dice=cfg.lambda_dice,
                                   lambda_focal=cfg.lambda_focal,
                                   alpha=cfg.focal_alpha, gamma=cfg.focal_gamma)
            tape.backward(loss)
            optimizer.step()
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        val_f1, val_iou = evaluate(model, val_pairs, cfg.batch_size)
        row = {"epoch": epoch, "train_loss": train_loss, "val_f1": val_f1,
               "val_iou": val_iou, "lr": optimizer.lr,
               "seconds": time.perf_counter() - t0}
        history.append(row)
        log(f"epoch={epoch} train_loss={train_loss:.6f} "
            f"val_f1={val_f1:.4f} val_iou={val_iou:.4f} lr={optimizer.lr:.2e}")
        improved = scheduler.step(val_f1)
        if improved and val_f1 > best_f1:
            best_f1 = val_f1
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, seed,
                                extra={"epoch": str(epoch), "val_f1": f"{val_f1:.6f}"})
    return history


def write_history(path: str, history):
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch\ttrain_loss\tval_f1\tval_iou\tlr\n")
        for row in history:
            f.write(f"{row['epoch']}\t{row['train_loss']:.12e}\t"
                    f"{row['val_f1']:.6f}\t{row['val_iou']:.6f}\t{row['lr']:.6e}\n")


def limit_threads(n: int):
    """Pin numpy's thread pools; 1 gives fully deterministic arithmetic."""
    os.environ.setdefault("OMP_NUM_THREADS", str(n))
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass
