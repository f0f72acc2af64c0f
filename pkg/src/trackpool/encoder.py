"""Multi-head self-attention encoder stack over a face track's embedding matrix.

Blocks are post-norm: ``x = LN(x + MHA(x))`` followed by
``x = LN(x + FFN(x))``. Sinusoidal positions are added once at the input.
Dropout is applied to the attention weights (``attention_dropout``) and to the
ReLU activations of the feed-forward layer (``relu_dropout``), and only when a
random generator is supplied (train mode).

Every function accepts a leading batch axis. Padded frames are described by a
boolean ``mask`` of shape ``(batch, n)``; padded keys never receive attention.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .linalg import LAYER_NORM_EPS, ShapeError, as_matrix, row_softmax

BLOCK_PARAMS = (
    "wq", "wk", "wv", "wo",
    "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
    "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
)


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int
    num_heads: int = 8
    num_blocks: int = 4
    ffn_hidden: int | None = None  # defaults to 4 * embed_dim
    attention_dropout: float = 0.3
    relu_dropout: float = 0.4
    use_positional_encoding: bool = True
    input_scale: float = 1.0

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_heads < 1:
            raise ValueError("embed_dim and num_heads must be positive")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        for name in ("attention_dropout", "relu_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {p}")
        if self.use_positional_encoding and self.embed_dim % 2:
            raise ValueError("positional encoding needs an even embed_dim")
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 4 * self.embed_dim)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


def block_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, h, dh, f = cfg.embed_dim, cfg.num_heads, cfg.head_dim, cfg.ffn_hidden
    return {
        "wq": (h, d, dh), "wk": (h, d, dh), "wv": (h, d, dh), "wo": (d, d),
        "ffn_w1": (d, f), "ffn_b1": (f,), "ffn_w2": (f, d), "ffn_b2": (d,),
        "ln1_gain": (d,), "ln1_bias": (d,), "ln2_gain": (d,), "ln2_bias": (d,),
    }


def init_block(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains."""
    d, dh, f = cfg.embed_dim, cfg.head_dim, cfg.ffn_hidden

    def glorot(shape, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    block = {}
    for name in ("wq", "wk", "wv"):
        block[name] = glorot((cfg.num_heads, d, dh), d, d)
    block["wo"] = glorot((d, d), d, d)
    block["ffn_w1"] = glorot((d, f), d, f)
    block["ffn_b1"] = np.zeros(f)
    block["ffn_w2"] = glorot((f, d), f, d)
    block["ffn_b2"] = np.zeros(d)
    for ln in ("ln1", "ln2"):
        block[f"{ln}_gain"] = np.ones(d)
        block[f"{ln}_bias"] = np.zeros(d)
    return block


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoidal table: column 2i holds sin(pos / 10000^(2i/d)), column 2i+1 the cosine."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if d % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.empty((n, d))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates)
    return table


def attention_head(fp, wq, wk, wv, mask=None) -> np.ndarray:
    """One head of scaled dot-product self-attention on a single (n, d) track.

    The logits are scaled by the square root of the head dimension
    (``wq.shape[1]``).
    """
    fp = as_matrix(fp, "Fp")
    wq, wk, wv = (as_matrix(w, name) for w, name in ((wq, "W_Q"), (wk, "W_K"), (wv, "W_V")))
    for w, name in ((wq, "W_Q"), (wk, "W_K"), (wv, "W_V")):
        if w.shape[0] != fp.shape[1]:
            raise ShapeError(f"{name} has {w.shape[0]} rows but Fp has {fp.shape[1]} columns")
    if wq.shape[1] != wk.shape[1]:
        raise ShapeError(f"W_Q {wq.shape} and W_K {wk.shape} project to different widths")
    q, k, v = fp @ wq, fp @ wk, fp @ wv
    logits = q @ k.T / math.sqrt(wq.shape[1])
    if mask is not None:
        valid = np.asarray(mask, dtype=bool)
        weights = np.zeros_like(logits)
        weights[:, valid] = row_softmax(logits[:, valid])
    else:
        weights = row_softmax(logits)
    return weights @ v


def _check_input(x: np.ndarray, cfg: EncoderConfig) -> None:
    if x.ndim != 3 or x.shape[2] != cfg.embed_dim:
        raise ShapeError(f"expected (batch, n, {cfg.embed_dim}) input, got {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("a face track needs at least one frame")


def multi_head_tensor(x: ag.Tensor, block: dict, cfg: EncoderConfig, key_mask=None, rng=None) -> ag.Tensor:
    scale = 1.0 / math.sqrt(cfg.head_dim)
    q = ag.einsum("bnd,hde->bhne", x, block["wq"])
    k = ag.einsum("bnd,hde->bhne", x, block["wk"])
    v = ag.einsum("bnd,hde->bhne", x, block["wv"])
    logits = ag.einsum("bhne,bhme->bhnm", q, k) * scale
    mask = None if key_mask is None else key_mask[:, None, None, :]
    weights = ag.softmax(logits, axis=-1, mask=mask)
    weights = ag.dropout(weights, cfg.attention_dropout, rng)
    heads = ag.einsum("bhnm,bhme->bhne", weights, v)
    wo = ag.reshape(ag.lift(block["wo"]), (cfg.num_heads, cfg.head_dim, cfg.embed_dim))
    return ag.einsum("bhne,hef->bnf", heads, wo)


def encoder_block_tensor(x: ag.Tensor, block: dict, cfg: EncoderConfig, key_mask=None, rng=None) -> ag.Tensor:
    attended = multi_head_tensor(x, block, cfg, key_mask, rng)
    x = ag.layer_norm(x + attended, block["ln1_gain"], block["ln1_bias"], LAYER_NORM_EPS)
    hidden = ag.relu(ag.matmul(x, block["ffn_w1"]) + block["ffn_b1"])
    hidden = ag.dropout(hidden, cfg.relu_dropout, rng)
    out = ag.matmul(hidden, block["ffn_w2"]) + block["ffn_b2"]
    return ag.layer_norm(x + out, block["ln2_gain"], block["ln2_bias"], LAYER_NORM_EPS)


def encode_tensor(x: ag.Tensor, cfg: EncoderConfig, blocks: list[dict], key_mask=None, rng=None) -> ag.Tensor:
    """Differentiable encoder over a (batch, n, d) input."""
    _check_input(x.value, cfg)
    if len(blocks) != cfg.num_blocks:
        raise ShapeError(f"config asks for {cfg.num_blocks} blocks, got weights for {len(blocks)}")
    if cfg.input_scale != 1.0:
        x = x * cfg.input_scale
    if cfg.use_positional_encoding:
        x = x + positional_encoding(x.shape[1], cfg.embed_dim)
    for block in blocks:
        x = encoder_block_tensor(x, block, cfg, key_mask, rng)
    return x


def _batched(f) -> tuple[np.ndarray, bool]:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 2:
        return f[None], True
    return f, False


def _check_blocks(blocks: list[dict], cfg: EncoderConfig) -> None:
    shapes = block_shapes(cfg)
    for i, block in enumerate(blocks):
        for name, shape in shapes.items():
            got = np.shape(block[name])
            if got != shape:
                raise ShapeError(f"block {i} {name}: expected shape {shape}, got {got}")


def multi_head(fp, block: dict, cfg: EncoderConfig, mask=None) -> np.ndarray:
    """Concatenated attention heads times ``W_o`` (no dropout)."""
    x, single = _batched(fp)
    _check_input(x, cfg)
    _check_blocks([block], cfg)
    key_mask = None if mask is None else np.asarray(mask, dtype=bool).reshape(x.shape[:2])
    out = multi_head_tensor(ag.Tensor(x), block, cfg, key_mask).value
    return out[0] if single else out


def encode(f, cfg: EncoderConfig, blocks: list[dict], mode: str = "infer", rng_seed=None, mask=None) -> np.ndarray:
    """Run the encoder stack on an (n, d) track or a (batch, n, d) padded batch.

    In ``"train"`` mode dropout is drawn from a generator seeded by ``rng_seed``
    (an int or an existing ``numpy.random.Generator``); ``"infer"`` ignores it.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x, single = _batched(f)
    _check_input(x, cfg)
    _check_blocks(blocks, cfg)
    rng = None
    if mode == "train":
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    key_mask = None if mask is None else np.asarray(mask, dtype=bool).reshape(x.shape[:2])
    out = encode_tensor(ag.Tensor(x), cfg, blocks, key_mask, rng).value
    return out[0] if single else out
