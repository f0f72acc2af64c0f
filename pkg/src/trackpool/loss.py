"""Margin-augmented softmax over scaled cosine logits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag


@dataclass(frozen=True)
class LossConfig:
    num_classes: int
    scale: float = 16.0
    margin: float = 0.35
    angular: bool = False  # s*cos(theta + m) instead of s*(cos(theta) - m)

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not 0.0 <= self.margin < 1.0:
            raise ValueError("margin must lie in [0, 1)")
        if self.num_classes < 1:
            raise ValueError("need at least one class")


def margin_logits(r: ag.Tensor, class_weights, labels: np.ndarray, cfg: LossConfig) -> ag.Tensor:
    """Scaled cosine logits with the margin applied to each row's target class."""
    cos = ag.matmul(ag.l2_normalize(r), ag.transpose(ag.l2_normalize(ag.lift(class_weights)), (1, 0)))
    onehot = np.zeros(cos.shape)
    onehot[np.arange(cos.shape[0]), labels] = 1.0
    if cfg.angular:
        shifted = ag.additive_angle(cos, cfg.margin)
        logits = cos * (1.0 - onehot) + shifted * onehot
    else:
        logits = cos - onehot * cfg.margin
    return logits * cfg.scale


def aam_loss_tensor(r: ag.Tensor, class_weights, labels, cfg: LossConfig, reduction: str = "mean") -> ag.Tensor:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.num_classes):
        raise ValueError(f"label out of range for {cfg.num_classes} classes: {labels.tolist()}")
    if np.shape(ag.lift(class_weights).value)[0] != cfg.num_classes:
        raise ValueError("class weight rows do not match num_classes")
    return ag.cross_entropy(margin_logits(r, class_weights, labels, cfg), labels, reduction)


def aam_loss(r, class_weights, label: int, cfg: LossConfig) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss for a single template ``r``; returns ``(loss, d_loss/d_r, d_loss/d_class_weights)``."""
    r_t = ag.Tensor(np.asarray(r, dtype=np.float64)[None], requires_grad=True)
    w_t = ag.Tensor(np.asarray(class_weights, dtype=np.float64), requires_grad=True)
    loss = aam_loss_tensor(r_t, w_t, [label], cfg)
    loss.backward()
    return float(loss.value), r_t.grad[0], w_t.grad
