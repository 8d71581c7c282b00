"""Fine-tuning loop: Adam on categorical cross-entropy, plateau LR schedule,
best-validation checkpointing.

The plateau rule monitors validation accuracy with strict improvement and a
zero min-delta: after `patience` epochs at the current learning rate without
beating the best accuracy seen earlier at that rate, the rate is multiplied
by `factor` (floored at `min_lr`). The improvement baseline resets whenever
the rate changes, so each rate segment is judged on its own.

Adam runs with the framework defaults beta=(0.9, 0.999), eps=1e-8; these are
recorded in run manifests. Targets are one-hot with no label smoothing and
no class weights; augmentation is the sole imbalance remedy.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .augment import AugmentationPolicy, apply_transform, sample_transform
from .errors import TrainingError
from .models import ModelConfig, ModelHandle
from .validation import check_image_batch, check_labels

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class EpochStat:
    epoch: int
    train_loss: float
    val_loss: float
    train_accuracy: float
    val_accuracy: float
    learning_rate: float


@dataclass
class TrainingResult:
    history: list[EpochStat]
    best_epoch: int
    best_checkpoint: Path | None
    seed: int
    best_state: dict | None = None


def select_best(history: list[EpochStat]) -> int:
    """Epoch with the highest validation accuracy; ties go to the earliest."""
    if not history:
        raise TrainingError("cannot select the best epoch from an empty history")
    best = history[0]
    for stat in history[1:]:
        if stat.val_accuracy > best.val_accuracy:
            best = stat
    return best.epoch


def plateau_lr_step(
    history: list[EpochStat],
    patience: int,
    factor: float,
    min_lr: float,
    current_lr: float,
) -> float:
    """Next learning rate under the reduce-on-plateau rule.

    Only epochs run at the current rate count; a reduction happens once the
    segment holds more than `patience` epochs and the last `patience` of
    them never strictly beat the best accuracy of the earlier segment part.
    """
    if patience < 1:
        raise TrainingError(f"patience must be >= 1, got {patience}")
    if not (0.0 < factor < 1.0):
        raise TrainingError(f"factor must be in (0, 1), got {factor}")

    segment = []
    for stat in history:
        if segment and stat.learning_rate != segment[-1].learning_rate:
            segment = []
        segment.append(stat)

    if len(segment) <= patience:
        return current_lr
    window = segment[-patience:]
    baseline = max(s.val_accuracy for s in segment[:-patience])
    if any(s.val_accuracy > baseline for s in window):
        return current_lr
    return max(current_lr * factor, min_lr)


def _evaluate(handle: ModelHandle, images: np.ndarray, labels: np.ndarray,
              batch_size: int) -> tuple[float, float]:
    """Mean cross-entropy and accuracy with dropout off and no augmentation."""
    net = handle.net
    net.eval()
    loss_fn = nn.CrossEntropyLoss(reduction="sum")
    total_loss = 0.0
    correct = 0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            xb = handle._to_tensor(images[start:start + batch_size])
            yb = torch.from_numpy(labels[start:start + batch_size])
            logits = net(xb)
            total_loss += float(loss_fn(logits, yb))
            correct += int((logits.argmax(dim=1) == yb).sum())
    n = len(images)
    return total_loss / n, correct / n


def train(
    handle: ModelHandle,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    config: ModelConfig,
    policy: AugmentationPolicy | None = None,
    out_dir: str | Path | None = None,
    log=None,
) -> TrainingResult:
    """Run the fine-tuning loop and return the full epoch history.

    Training batches are augmented on the fly when a policy is given;
    validation always sees raw images with dropout disabled. A checkpoint is
    written (or kept in memory when `out_dir` is None) every time validation
    accuracy strictly improves, so the surviving checkpoint is always the
    best epoch's.
    """
    if config.epochs < 1:
        raise TrainingError("no training epochs")
    train_images = check_image_batch(train_images)
    train_labels = check_labels(train_labels, num_classes=config.num_classes,
                                length=len(train_images))
    val_images = check_image_batch(val_images)
    val_labels = check_labels(val_labels, num_classes=config.num_classes,
                              length=len(val_images))
    if len(train_images) == 0 or len(val_images) == 0:
        raise TrainingError("training and validation sets must be nonempty")

    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)

    net = handle.net
    params = [p for p in net.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate,
                                 betas=ADAM_BETAS, eps=ADAM_EPS)
    loss_fn = nn.CrossEntropyLoss()

    history: list[EpochStat] = []
    best_acc = -math.inf
    best_state = None
    checkpoint_dir = Path(out_dir) / "checkpoint" if out_dir is not None else None
    current_lr = config.learning_rate

    for epoch in range(1, config.epochs + 1):
        net.train()
        order = rng.permutation(len(train_images))
        running_loss = 0.0
        running_correct = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = train_images[idx]
            if policy is not None:
                batch = np.stack([
                    apply_transform(img, sample_transform(policy, rng),
                                    fill_mode=policy.fill_mode, fill_value=policy.fill_value)
                    for img in batch
                ])
            xb = handle._to_tensor(batch)
            yb = torch.from_numpy(train_labels[idx])

            optimizer.zero_grad()
            logits = net(xb)
            loss = loss_fn(logits, yb)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss {float(loss)} at epoch {epoch}, "
                    f"batch starting at {start}"
                )
            loss.backward()
            optimizer.step()
            running_loss += float(loss.detach()) * len(idx)
            running_correct += int((logits.argmax(dim=1) == yb).sum())

        train_loss = running_loss / len(order)
        train_acc = running_correct / len(order)
        val_loss, val_acc = _evaluate(handle, val_images, val_labels, config.batch_size)

        history.append(EpochStat(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss,
            train_accuracy=train_acc, val_accuracy=val_acc, learning_rate=current_lr,
        ))
        if log is not None:
            log(history[-1])

        if val_acc > best_acc:
            best_acc = val_acc
            if checkpoint_dir is not None:
                handle.save_checkpoint(checkpoint_dir, epoch=epoch, val_accuracy=val_acc)
            else:
                best_state = copy.deepcopy(net.state_dict())

        new_lr = plateau_lr_step(history, config.lr_patience, config.lr_factor,
                                 config.min_lr, current_lr)
        if new_lr != current_lr:
            current_lr = new_lr
            for group in optimizer.param_groups:
                group["lr"] = current_lr

    return TrainingResult(
        history=history,
        best_epoch=select_best(history),
        best_checkpoint=checkpoint_dir,
        seed=config.seed,
        best_state=best_state,
    )


def write_history_csv(history: list[EpochStat], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "train_accuracy",
                         "val_accuracy", "learning_rate"])
        for stat in history:
            writer.writerow([
                stat.epoch, f"{stat.train_loss:.8f}", f"{stat.val_loss:.8f}",
                f"{stat.train_accuracy:.8f}", f"{stat.val_accuracy:.8f}",
                f"{stat.learning_rate:.10g}",
            ])
