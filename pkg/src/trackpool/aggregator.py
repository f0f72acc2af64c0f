"""Quality scoring head and quality-weighted pooling of a face track.

The scores come from the encoder output, but the pooled template is always a
convex combination of the original frame embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .linalg import ShapeError

SCORE_MODES = ("element", "component")


@dataclass
class QualityHead:
    wq: np.ndarray
    mode: str = "element"

    def __post_init__(self):
        self.wq = np.asarray(self.wq, dtype=np.float64)
        if self.mode not in SCORE_MODES:
            raise ValueError(f"score mode must be one of {SCORE_MODES}, got {self.mode!r}")
        d = self.wq.shape[0]
        want = (d, 1) if self.mode == "element" else (d, d)
        if self.wq.shape != want:
            raise ShapeError(f"{self.mode}-wise W_q must be {want}, got {self.wq.shape}")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


@dataclass
class AggregationResult:
    r: np.ndarray  # (d,)
    q: np.ndarray  # (n, 1) or (n, d); columns sum to 1
    s: np.ndarray  # raw scores, same shape as q


def head_shape(d: int, mode: str) -> tuple[int, int]:
    return (d, 1) if mode == "element" else (d, d)


def pool_tensor(f: np.ndarray, rmh: ag.Tensor, wq, mask: np.ndarray | None = None):
    """Batched differentiable pooling.

    ``f`` is (batch, n, d) original embeddings, ``rmh`` the encoder output of
    the same shape. Returns tensors ``(r, q, s)``.
    """
    s = ag.matmul(rmh, wq)
    frame_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, :, None]
    q = ag.softmax(s, axis=1, mask=frame_mask)
    r = ag.sum_(ag.mul(q, f), axis=1)
    return r, q, s


def score(rmh, head: QualityHead) -> np.ndarray:
    rmh = np.asarray(rmh, dtype=np.float64)
    if rmh.ndim != 2 or rmh.shape[1] != head.dim:
        raise ShapeError(f"encoder output must be (n, {head.dim}), got {rmh.shape}")
    return rmh @ head.wq


def aggregate(f, rmh, head: QualityHead, mask=None) -> AggregationResult:
    """Pool the original embeddings ``f`` with softmax-normalized quality scores.

    ``mask`` marks real (non-padded) frames; padded rows get zero weight.
    """
    f = np.asarray(f, dtype=np.float64)
    rmh = np.asarray(rmh, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("cannot aggregate an empty face track")
    if rmh.shape != f.shape:
        raise ShapeError(f"embeddings {f.shape} and encoder output {rmh.shape} differ")
    if f.shape[1] != head.dim:
        raise ShapeError(f"embeddings have dim {f.shape[1]}, quality head expects {head.dim}")
    batch_mask = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("cannot aggregate a track with every frame masked out")
        batch_mask = mask[None]
    r, q, s = pool_tensor(f[None], ag.Tensor(rmh[None]), head.wq, batch_mask)
    return AggregationResult(r=r.value[0], q=q.value[0], s=s.value[0])


def average_pool(f, mask=None) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("cannot average an empty face track")
    if mask is not None:
        f = f[np.asarray(mask, dtype=bool)]
        if f.shape[0] == 0:
            raise ValueError("cannot average a track with every frame masked out")
    return f.mean(axis=0)
