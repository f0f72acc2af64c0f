"""Training of the encoder and quality head with a margin softmax loss.

All randomness (splits, batch sampling, dropout, mask mixing) flows from one
seeded generator, so a run is reproducible bit for bit.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .aggregator import average_pool
from .data import MultiVideoSpec, TrackRecord, gen_multi_video, sessions_by_identity
from .encoder import EncoderConfig
from .loss import LossConfig, aam_loss_tensor
from .metrics import mean_intra_class_distance
from .model import ModelWeights, aggregate_tracks, forward_tensor, init_model, pad_tracks
from .multi_identity import DEFAULT_THRESHOLD, split_frames
from .optim import OptimizerState, radam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BatchSpec:
    templates_per_batch: int = 256
    identities_per_batch: int = 128
    frames_per_template: int = 32

    def __post_init__(self):
        if min(self.templates_per_batch, self.identities_per_batch, self.frames_per_template) < 1:
            raise ValueError("batch sizes must be positive")
        if self.templates_per_batch % self.identities_per_batch:
            raise ValueError(
                f"templates_per_batch {self.templates_per_batch} is not divisible by "
                f"identities_per_batch {self.identities_per_batch}"
            )

    @property
    def templates_per_identity(self) -> int:
        return self.templates_per_batch // self.identities_per_batch


@dataclass(frozen=True)
class ScheduledSampling:
    """Probability of using the ground-truth mask: cosine decay from 1 to 0 over ``horizon`` iterations."""

    horizon: int = 5000

    def probability(self, t: int) -> float:
        if t <= 0:
            return 1.0
        if t >= self.horizon:
            return 0.0
        return 0.5 * (1.0 + math.cos(math.pi * t / self.horizon))


@dataclass
class TrainConfig:
    max_iterations: int = 20000
    eval_every: int = 200
    patience: int = 5
    val_fraction: float = 0.2
    lr: float = 1e-3
    seed: int = 0
    score_mode: str = "element"
    log_every: int = 50


@dataclass
class TrainResult:
    model: ModelWeights
    history: list[dict] = field(default_factory=list)
    best_icpg: float = float("-inf")
    best_iteration: int = 0
    train_identities: list[str] = field(default_factory=list)
    val_identities: list[str] = field(default_factory=list)


def _sorted_choice(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    if n <= m:
        return np.arange(n)
    return np.sort(rng.choice(n, size=m, replace=False))


class IdentitySampler:
    """Identity-balanced template batches drawn from labelled sessions."""

    def __init__(self, tracks: list[TrackRecord], spec: BatchSpec):
        self.spec = spec
        self.by_id = sessions_by_identity(tracks)
        self.names = sorted(self.by_id)
        self.class_of = {name: i for i, name in enumerate(self.names)}
        if len(self.names) < spec.identities_per_batch:
            raise ValueError(
                f"dataset has {len(self.names)} identities; a batch needs {spec.identities_per_batch}"
            )

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def sample(self, rng: np.random.Generator) -> tuple[list[np.ndarray], np.ndarray]:
        spec = self.spec
        ids = rng.choice(len(self.names), size=spec.identities_per_batch, replace=False)
        templates, labels = [], []
        for cls in ids:
            sessions = self.by_id[self.names[cls]]
            for _ in range(spec.templates_per_identity):
                s = sessions[int(rng.integers(len(sessions)))]
                templates.append(s.embeddings[_sorted_choice(rng, len(s), spec.frames_per_template)])
                labels.append(cls)
        return templates, np.asarray(labels, dtype=np.int64)


def init_class_weights(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    w = rng.standard_normal((num_classes, dim))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def compute_gradients(
    model: ModelWeights,
    class_weights: np.ndarray,
    templates: list[np.ndarray],
    labels,
    loss_cfg: LossConfig,
    rng: np.random.Generator | None = None,
    reduction: str = "mean",
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients for every model parameter plus ``"classifier"``.

    Dropout is active only when ``rng`` is given.
    """
    params = {name: ag.Tensor(value, requires_grad=True) for name, value in model.params.items()}
    cls = ag.Tensor(class_weights, requires_grad=True)
    f, mask = pad_tracks(templates)
    r, _, _ = forward_tensor(model, params, f, mask, rng)
    loss = aam_loss_tensor(r, cls, labels, loss_cfg, reduction)
    loss.backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.value)) for name, t in params.items()}
    grads["classifier"] = cls.grad if cls.grad is not None else np.zeros_like(class_weights)
    return float(loss.value), grads


def make_validation_templates(tracks: list[TrackRecord], frames_per_template: int, seed) -> tuple[list[np.ndarray], list[str]]:
    """One fixed template per session, frames subsampled in order."""
    rng = np.random.default_rng(seed)
    templates, labels = [], []
    for t in tracks:
        templates.append(t.embeddings[_sorted_choice(rng, len(t), frames_per_template)])
        labels.append(t.identity)
    return templates, labels


def icpg(model: ModelWeights, templates: list[np.ndarray], labels) -> float:
    """Mean intra-class cosine distance under average pooling minus the same under the model."""
    avg = np.array([average_pool(t) for t in templates])
    sa = np.array([res.r for res in aggregate_tracks(model, templates)])
    return mean_intra_class_distance(avg, labels) - mean_intra_class_distance(sa, labels)


def split_identities(tracks: list[TrackRecord], val_fraction: float, rng: np.random.Generator):
    names = sorted(sessions_by_identity(tracks))
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    n_val = max(1, int(round(val_fraction * len(names))))
    if n_val >= len(names):
        raise ValueError("not enough identities for a train/validation split")
    perm = rng.permutation(len(names))
    val = sorted(names[i] for i in perm[:n_val])
    train = sorted(names[i] for i in perm[n_val:])
    val_set = set(val)
    return (
        [t for t in tracks if t.identity not in val_set],
        [t for t in tracks if t.identity in val_set],
        train,
        val,
    )


class _Trainer:
    """Shared optimization loop with ICPG early stopping."""

    def __init__(self, tracks, enc_cfg: EncoderConfig, batch_spec: BatchSpec, loss_cfg_kw: dict, cfg: TrainConfig, progress=None):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        train, val, self.train_names, self.val_names = split_identities(tracks, cfg.val_fraction, self.rng)
        self.train_tracks = train
        self.sampler = IdentitySampler(train, batch_spec)
        self.loss_cfg = LossConfig(num_classes=self.sampler.num_classes, **loss_cfg_kw)
        self.model = init_model(enc_cfg, cfg.score_mode, seed=int(self.rng.integers(2**31)))
        self.class_weights = init_class_weights(self.sampler.num_classes, enc_cfg.embed_dim, self.rng)
        self.opt = OptimizerState.for_params({**self.model.params, "classifier": self.class_weights}, lr=cfg.lr)
        self.val_templates, self.val_labels = make_validation_templates(
            val, batch_spec.frames_per_template, int(self.rng.integers(2**31))
        )
        self.progress = progress
        self.history: list[dict] = []

    def _emit(self, record: dict) -> None:
        self.history.append(record)
        if self.progress is not None:
            self.progress.write(json.dumps(record, sort_keys=True) + "\n")
            self.progress.flush()

    def step(self, templates, labels) -> float:
        loss, grads = compute_gradients(self.model, self.class_weights, templates, labels, self.loss_cfg, self.rng)
        params = {**self.model.params, "classifier": self.class_weights}
        radam_step(self.opt, params, grads)
        self.class_weights /= np.linalg.norm(self.class_weights, axis=1, keepdims=True)
        return loss

    def run(self, next_batch) -> TrainResult:
        cfg = self.cfg
        best = TrainResult(self.model.copy(), train_identities=self.train_names, val_identities=self.val_names)
        best.best_icpg = icpg(self.model, self.val_templates, self.val_labels)
        self._emit({"iteration": 0, "icpg": best.best_icpg})
        stale = 0
        running = []
        for it in range(1, cfg.max_iterations + 1):
            templates, labels = next_batch(it)
            running.append(self.step(templates, labels))
            if it % cfg.log_every == 0:
                self._emit({"iteration": it, "loss": float(np.mean(running))})
                running = []
            if it % cfg.eval_every == 0:
                score = icpg(self.model, self.val_templates, self.val_labels)
                self._emit({"iteration": it, "icpg": score})
                log.info("iteration %d icpg %.6g", it, score)
                if score > best.best_icpg:
                    best.model, best.best_icpg, best.best_iteration = self.model.copy(), score, it
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        log.info("early stop at iteration %d (best %d)", it, best.best_iteration)
                        break
        best.history = self.history
        return best


def train_single(
    tracks: list[TrackRecord],
    enc_cfg: EncoderConfig,
    batch_spec: BatchSpec = BatchSpec(),
    cfg: TrainConfig = TrainConfig(),
    loss_kw: dict | None = None,
    progress=None,
) -> TrainResult:
    """Train on identity-labelled sessions; returns the weights with the best validation ICPG."""
    trainer = _Trainer(tracks, enc_cfg, batch_spec, loss_kw or {}, cfg, progress)
    return trainer.run(lambda it: trainer.sampler.sample(trainer.rng))


def video_tracks(video, use_ground_truth: bool, threshold: float) -> tuple[list[np.ndarray], list[int]]:
    """Frame index groups of a multi-identity video and the majority ground-truth label of each."""
    if use_ground_truth:
        groups = [np.flatnonzero(video.labels == lab) for lab in range(video.true_k)]
    else:
        groups = split_frames(video.embeddings, threshold).tracks
    majority = [int(np.bincount(video.labels[g]).argmax()) for g in groups]
    return groups, majority


def train_multi(
    tracks: list[TrackRecord],
    enc_cfg: EncoderConfig,
    sampling: ScheduledSampling = ScheduledSampling(),
    video_spec: MultiVideoSpec = MultiVideoSpec(),
    videos_per_batch: int = 4,
    frames_per_template: int = 32,
    threshold: float = DEFAULT_THRESHOLD,
    cfg: TrainConfig = TrainConfig(),
    loss_kw: dict | None = None,
    progress=None,
) -> TrainResult:
    """Train on synthetic multi-identity videos built from the labelled sessions.

    Each video is split either with its ground-truth mask (probability given
    by ``sampling``) or with the predicted, post-processed mask; every
    resulting track is aggregated and classified as its majority identity.
    """
    batch_spec = BatchSpec(video_spec.max_identities, video_spec.max_identities, frames_per_template)
    trainer = _Trainer(tracks, enc_cfg, batch_spec, loss_kw or {}, cfg, progress)

    def next_batch(it):
        templates, labels = [], []
        for _ in range(videos_per_batch):
            video = gen_multi_video(trainer.train_tracks, video_spec, trainer.rng)
            use_gt = trainer.rng.random() < sampling.probability(it - 1)
            groups, majority = video_tracks(video, use_gt, threshold)
            for g, lab in zip(groups, majority):
                templates.append(video.embeddings[g])
                labels.append(trainer.sampler.class_of[video.identities[lab]])
        return templates, np.asarray(labels, dtype=np.int64)

    return trainer.run(next_batch)
