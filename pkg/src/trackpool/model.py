"""Learnable state of the aggregation network and the end-to-end forward pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .aggregator import AggregationResult, QualityHead, head_shape, pool_tensor
from .encoder import BLOCK_PARAMS, EncoderConfig, block_shapes, encode_tensor, init_block
from .linalg import ShapeError


@dataclass
class ModelWeights:
    """Encoder blocks plus quality head. ``params`` maps names like ``block0.wq`` to arrays."""

    config: EncoderConfig
    score_mode: str = "element"
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return parameter_names(self.config)

    def blocks(self, params=None) -> list[dict]:
        params = self.params if params is None else params
        return [
            {name: params[f"block{i}.{name}"] for name in BLOCK_PARAMS}
            for i in range(self.config.num_blocks)
        ]

    @property
    def head(self) -> QualityHead:
        return QualityHead(self.params["head.wq"], self.score_mode)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, self.score_mode, {k: v.copy() for k, v in self.params.items()})

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return expected_shapes(self.config, self.score_mode)

    def validate(self) -> None:
        want = self.expected_shapes()
        if set(want) != set(self.params):
            missing = sorted(set(want) - set(self.params))
            extra = sorted(set(self.params) - set(want))
            raise ShapeError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in want.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {self.params[name].shape}")


def parameter_names(cfg: EncoderConfig) -> list[str]:
    names = [f"block{i}.{name}" for i in range(cfg.num_blocks) for name in BLOCK_PARAMS]
    return names + ["head.wq"]


def expected_shapes(cfg: EncoderConfig, score_mode: str) -> dict[str, tuple[int, ...]]:
    shapes = {}
    per_block = block_shapes(cfg)
    for i in range(cfg.num_blocks):
        for name in BLOCK_PARAMS:
            shapes[f"block{i}.{name}"] = per_block[name]
    shapes["head.wq"] = head_shape(cfg.embed_dim, score_mode)
    return shapes


def init_model(cfg: EncoderConfig, score_mode: str = "element", seed=0, zero_head: bool = False) -> ModelWeights:
    rng = np.random.default_rng(seed)
    params = {}
    for i in range(cfg.num_blocks):
        for name, value in init_block(cfg, rng).items():
            params[f"block{i}.{name}"] = value
    d = cfg.embed_dim
    shape = head_shape(d, score_mode)
    limit = np.sqrt(6.0 / (d + shape[1]))
    params["head.wq"] = np.zeros(shape) if zero_head else rng.uniform(-limit, limit, size=shape)
    model = ModelWeights(cfg, score_mode, params)
    model.validate()
    return model


def forward_tensor(model: ModelWeights, params: dict, f: np.ndarray, mask=None, rng=None):
    """Encoder + pooling on a padded (batch, n, d) array; ``params`` may hold Tensors."""
    key_mask = None if mask is None else np.asarray(mask, dtype=bool)
    rmh = encode_tensor(ag.Tensor(f), model.config, model.blocks(params), key_mask, rng)
    return pool_tensor(f, rmh, params["head.wq"], key_mask)


def pad_tracks(tracks: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad a list of (n_i, d) tracks into a (batch, max n, d) array plus a frame mask."""
    if not tracks:
        raise ValueError("no tracks to pad")
    d = tracks[0].shape[1]
    n = max(t.shape[0] for t in tracks)
    batch = np.zeros((len(tracks), n, d))
    mask = np.zeros((len(tracks), n), dtype=bool)
    for i, t in enumerate(tracks):
        if t.ndim != 2 or t.shape[1] != d:
            raise ShapeError(f"track {i} has shape {t.shape}, expected (n, {d})")
        if t.shape[0] == 0:
            raise ValueError(f"track {i} is empty")
        batch[i, : t.shape[0]] = t
        mask[i, : t.shape[0]] = True
    return batch, mask


def aggregate_tracks(model: ModelWeights, tracks: list[np.ndarray], batch_size: int = 64) -> list[AggregationResult]:
    """Inference-mode aggregation of variable-length tracks."""
    tracks = [np.asarray(t, dtype=np.float64) for t in tracks]
    d = model.config.embed_dim
    for i, t in enumerate(tracks):
        if t.ndim != 2 or t.shape[1] != d:
            raise ShapeError(f"track {i} has shape {t.shape}, model expects dimension {d}")
    results = []
    for start in range(0, len(tracks), batch_size):
        chunk = tracks[start : start + batch_size]
        f, mask = pad_tracks(chunk)
        r, q, s = forward_tensor(model, model.params, f, mask)
        for i, t in enumerate(chunk):
            n = t.shape[0]
            results.append(AggregationResult(r=r.value[i], q=q.value[i, :n], s=s.value[i, :n]))
    return results


def aggregate_track(model: ModelWeights, track: np.ndarray) -> AggregationResult:
    return aggregate_tracks(model, [track])[0]
