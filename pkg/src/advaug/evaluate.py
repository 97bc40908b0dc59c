"""Evaluation metrics: accuracy, balanced multi-class accuracy, Dice.

All evaluation runs in eval mode through the main BN group only.
"""

from __future__ import annotations

import numpy as np
import torch


def predict(net, images, batch_size: int = 64) -> np.ndarray:
    """Argmax predictions in eval mode (main BN group)."""
    net.eval()
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    preds = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            logits = net(images[i:i + batch_size], "main")
            preds.append(logits.argmax(dim=1).numpy())
    return np.concatenate(preds)


def confusion_matrix(pred: np.ndarray, true: np.ndarray, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(true.ravel(), pred.ravel()):
        cm[t, p] += 1
    return cm


def accuracy(pred: np.ndarray, true: np.ndarray) -> float:
    return float((pred.ravel() == true.ravel()).mean())


def balanced_accuracy(pred: np.ndarray, true: np.ndarray, num_classes: int) -> float:
    """Mean per-class recall over classes present in the ground truth."""
    cm = confusion_matrix(pred, true, num_classes)
    support = cm.sum(axis=1)
    present = support > 0
    recalls = cm.diagonal()[present] / support[present]
    return float(recalls.mean())


def dice_scores(pred: np.ndarray, true: np.ndarray, num_classes: int) -> dict[int, float]:
    """Per-foreground-class Dice 2|A∩B|/(|A|+|B|), aggregated over all samples.

    A class absent from both prediction and ground truth counts as perfect
    agreement (1.0).
    """
    out = {}
    for k in range(1, num_classes):
        p = pred == k
        t = true == k
        denom = p.sum() + t.sum()
        out[k] = 1.0 if denom == 0 else float(2.0 * np.logical_and(p, t).sum() / denom)
    return out


def mean_dice(pred: np.ndarray, true: np.ndarray, num_classes: int) -> float:
    scores = dice_scores(pred, true, num_classes)
    return float(np.mean(list(scores.values())))


def evaluate_model(net, images, labels, task: str, num_classes: int) -> dict:
    """Metric dict for a trained target network on one split."""
    pred = predict(net, images)
    labels = np.asarray(labels)
    if task == "classification":
        return {
            "accuracy": accuracy(pred, labels),
            "bmca": balanced_accuracy(pred, labels, num_classes),
        }
    return {
        "pixel_accuracy": accuracy(pred, labels),
        "mean_dice": mean_dice(pred, labels, num_classes),
    }
