"""Track files, template files, checkpoints and synthetic embedding datasets.

Track file (JSON lines)::

    {"format": "trackpool-tracks", "version": 1}
    {"track_id": "t0", "identity": "alice", "frames": [{"i": 0, "e": [0.1, ...]}, ...]}

The header line is optional on read. Embeddings are written at float32
precision and promoted to float64 on read.

Checkpoint (binary, little-endian)::

    b"TRKPCKPT" | uint32 version | uint32 header_len | header JSON (utf-8)
    | float64 arrays, one per parameter, in header order, C order

The header holds the encoder config, the score mode, the embedding dimension
and the ``[name, shape]`` list of parameters.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .linalg import ShapeError
from .model import ModelWeights, expected_shapes, parameter_names

TRACKS_FORMAT = "trackpool-tracks"
TEMPLATES_FORMAT = "trackpool-templates"
FORMAT_VERSION = 1
CKPT_MAGIC = b"TRKPCKPT"
CKPT_VERSION = 1


class FormatError(ValueError):
    """Malformed track, template or checkpoint file."""


@dataclass
class TrackRecord:
    track_id: str
    identity: str | None
    frame_indices: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self):
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ShapeError(f"track {self.track_id}: embeddings must be (n, d), got {self.embeddings.shape}")
        if self.frame_indices.shape != (self.embeddings.shape[0],):
            raise ShapeError(f"track {self.track_id}: {self.frame_indices.size} indices for {self.embeddings.shape[0]} frames")
        if self.frame_indices.size > 1 and np.any(np.diff(self.frame_indices) <= 0):
            raise FormatError(f"track {self.track_id}: frame indices must be strictly increasing")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def _f32_list(values) -> str:
    return "[" + ",".join(str(v) for v in np.asarray(values, dtype=np.float32)) + "]"


def atomic_write(path, write) -> None:
    """Run ``write(tmp_path)`` and move the result into place; the temporary file is removed on failure."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def write_tracks(path, tracks: list[TrackRecord]) -> None:
    def write(tmp):
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"format": TRACKS_FORMAT, "version": FORMAT_VERSION}) + "\n")
            for t in tracks:
                frames = ",".join(
                    f'{{"i":{int(i)},"e":{_f32_list(e)}}}' for i, e in zip(t.frame_indices, t.embeddings)
                )
                fh.write(f'{{"track_id":{json.dumps(t.track_id)},"identity":{json.dumps(t.identity)},"frames":[{frames}]}}\n')

    atomic_write(path, write)


def _lines(path):
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                yield lineno, raw.decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError(f"{path}:{lineno}: not valid UTF-8 text") from None


def _iter_records(path, fmt: str):
    for lineno, line in _lines(path):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise FormatError(f"{path}:{lineno}: expected a JSON object")
        if "format" in obj:
            if obj["format"] != fmt:
                raise FormatError(f"{path}:{lineno}: expected format {fmt!r}, found {obj['format']!r}")
            if obj.get("version") != FORMAT_VERSION:
                raise FormatError(f"{path}:{lineno}: unsupported {fmt} version {obj.get('version')!r}")
            continue
        yield lineno, obj


def read_tracks(path) -> list[TrackRecord]:
    tracks: list[TrackRecord] = []
    dim = None
    for lineno, obj in _iter_records(path, TRACKS_FORMAT):
        try:
            track_id = obj["track_id"]
            identity = obj.get("identity")
            frames = obj["frames"]
            if not isinstance(track_id, str) or not (identity is None or isinstance(identity, str)):
                raise TypeError("track_id/identity must be strings")
            if not isinstance(frames, list) or not frames:
                raise ValueError("frames must be a non-empty list")
            indices = [int(fr["i"]) for fr in frames]
            emb = np.array([fr["e"] for fr in frames], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed track record ({exc})") from None
        if emb.ndim != 2 or not np.all(np.isfinite(emb)):
            raise FormatError(f"{path}:{lineno}: embeddings must be equal-length finite number lists")
        if dim is None:
            dim = emb.shape[1]
        elif emb.shape[1] != dim:
            raise FormatError(f"{path}:{lineno}: embedding dimension {emb.shape[1]} differs from {dim}")
        try:
            tracks.append(TrackRecord(track_id, identity, indices, emb))
        except (FormatError, ShapeError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return tracks


@dataclass
class TemplateRecord:
    template_id: str
    identity: str | None
    vector: np.ndarray


def write_templates(path, templates: list[TemplateRecord]) -> None:
    def write(tmp):
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"format": TEMPLATES_FORMAT, "version": FORMAT_VERSION}) + "\n")
            for t in templates:
                fh.write(
                    f'{{"template_id":{json.dumps(t.template_id)},"identity":{json.dumps(t.identity)},'
                    f'"template":{_f32_list(t.vector)}}}\n'
                )

    atomic_write(path, write)


def read_templates(path) -> list[TemplateRecord]:
    out = []
    dim = None
    for lineno, obj in _iter_records(path, TEMPLATES_FORMAT):
        try:
            vec = np.array(obj["template"], dtype=np.float64)
            rec = TemplateRecord(str(obj["template_id"]), obj.get("identity"), vec)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed template record ({exc})") from None
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise FormatError(f"{path}:{lineno}: template must be a finite number list")
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise FormatError(f"{path}:{lineno}: template dimension {vec.size} differs from {dim}")
        out.append(rec)
    return out


def save_checkpoint(model: ModelWeights, path, meta: dict | None = None) -> None:
    model.validate()
    names = model.names()
    header = {
        "config": model.config.to_dict(),
        "score_mode": model.score_mode,
        "embed_dim": model.config.embed_dim,
        "params": [[name, list(model.params[name].shape)] for name in names],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    def write(tmp):
        with open(tmp, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
            fh.write(blob)
            for name in names:
                fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())

    atomic_write(path, write)


def load_checkpoint(path, with_meta: bool = False):
    data = Path(path).read_bytes()
    prefix = len(CKPT_MAGIC) + 8
    if len(data) < prefix or data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a trackpool checkpoint")
    version, hlen = struct.unpack("<II", data[len(CKPT_MAGIC) : prefix])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < prefix + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[prefix : prefix + hlen].decode("utf-8"))
        cfg = EncoderConfig(**header["config"])
        score_mode = header["score_mode"]
        listed = [(str(n), tuple(int(x) for x in s)) for n, s in header["params"]]
        embed_dim = int(header["embed_dim"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    if embed_dim != cfg.embed_dim:
        raise FormatError(f"{path}: header dimension {embed_dim} disagrees with config {cfg.embed_dim}")
    try:
        want = expected_shapes(cfg, score_mode)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    order = parameter_names(cfg)
    if [n for n, _ in listed] != order:
        raise FormatError(f"{path}: parameter list does not match the configured architecture")
    for name, shape in listed:
        if want[name] != shape:
            raise FormatError(f"{path}: {name} has shape {shape}, config implies {want[name]}")
    offset = prefix + hlen
    params = {}
    for name, shape in listed:
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(data):
            raise FormatError(f"{path}: truncated while reading {name}")
        params[name] = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} unexpected trailing bytes")
    model = ModelWeights(cfg, score_mode, params)
    if with_meta:
        return model, header.get("meta", {})
    return model


@dataclass(frozen=True)
class SyntheticSpec:
    num_identities: int
    sessions_per_identity: int = 4
    frames_per_session: int = 32
    embed_dim: int = 64
    sigma: float = 0.1
    seed: int = 0
    quality_degradation: float = 0.0
    min_centroid_distance: float = 0.0  # cosine distance; rejection sampling when > 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.quality_degradation <= 1.0:
            raise ValueError("quality_degradation must lie in [0, 1]")
        if min(self.num_identities, self.sessions_per_identity, self.frames_per_session, self.embed_dim) < 1:
            raise ValueError("counts must be positive")


@dataclass
class SyntheticDataset:
    tracks: list[TrackRecord]
    centroids: np.ndarray
    degraded: list[np.ndarray] = field(default_factory=list)

    def identities(self) -> list[str]:
        return sorted({t.identity for t in self.tracks})


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _centroids(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    out = []
    tries = 0
    while len(out) < spec.num_identities:
        c = _unit(rng.standard_normal(spec.embed_dim))
        if spec.min_centroid_distance > 0 and out:
            if np.min(1.0 - np.asarray(out) @ c) < spec.min_centroid_distance:
                tries += 1
                if tries > 1000 * spec.num_identities:
                    raise ValueError("could not place centroids that far apart; lower min_centroid_distance")
                continue
        out.append(c)
    return np.asarray(out)


def gen_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Gaussian clusters around random unit centroids.

    Clean frames are ``normalize(c + sigma * g)``. Degraded frames use
    ``4 * sigma`` noise and are then scaled to norm 0.3, so embedding norm
    tracks frame quality.
    """
    rng = np.random.default_rng(spec.seed)
    centroids = _centroids(spec, rng)
    tracks, degraded = [], []
    n = spec.frames_per_session
    for ident, c in enumerate(centroids):
        for sess in range(spec.sessions_per_identity):
            bad = rng.random(n) < spec.quality_degradation
            noise = rng.standard_normal((n, spec.embed_dim))
            sig = np.where(bad, 4.0 * spec.sigma, spec.sigma)[:, None]
            emb = _unit(c + sig * noise)
            emb[bad] *= 0.3
            tracks.append(TrackRecord(f"id{ident:04d}_s{sess:02d}", f"id{ident:04d}", np.arange(n), emb))
            degraded.append(bad)
    return SyntheticDataset(tracks, centroids, degraded)


@dataclass(frozen=True)
class MultiVideoSpec:
    min_identities: int = 2
    max_identities: int = 64
    frames_sampled: int = 256

    def __post_init__(self):
        if not 1 <= self.min_identities <= self.max_identities:
            raise ValueError("need 1 <= min_identities <= max_identities")
        if self.frames_sampled < self.max_identities:
            raise ValueError("frames_sampled must be at least max_identities")


@dataclass
class MultiVideo:
    embeddings: np.ndarray  # (n, d), temporal order
    labels: np.ndarray  # (n,) integer identity per frame, numbered by first appearance
    identities: list[str]  # label -> identity name
    mask: np.ndarray  # (n, n) ground-truth relation

    @property
    def true_k(self) -> int:
        return len(np.unique(self.labels))


def sessions_by_identity(tracks: list[TrackRecord]) -> dict[str, list[TrackRecord]]:
    out: dict[str, list[TrackRecord]] = {}
    for t in tracks:
        if t.identity is None:
            raise ValueError(f"track {t.track_id} has no identity label")
        out.setdefault(t.identity, []).append(t)
    return out


def gen_multi_video(tracks: list[TrackRecord], spec: MultiVideoSpec, seed) -> MultiVideo:
    """Concatenate one session of each of k random identities and subsample frames in order."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    by_id = sessions_by_identity(tracks)
    names = sorted(by_id)
    if len(names) < spec.max_identities:
        raise ValueError(f"dataset has {len(names)} identities, spec may ask for {spec.max_identities}")
    k = int(rng.integers(spec.min_identities, spec.max_identities + 1))
    chosen = [names[i] for i in rng.choice(len(names), size=k, replace=False)]
    parts, labels = [], []
    for ident in chosen:
        sessions = by_id[ident]
        s = sessions[int(rng.integers(len(sessions)))]
        parts.append(s.embeddings)
        labels.append(np.full(len(s), ident, dtype=object))
    frames = np.concatenate(parts)
    names_per_frame = np.concatenate(labels)
    if frames.shape[0] > spec.frames_sampled:
        keep = np.sort(rng.choice(frames.shape[0], size=spec.frames_sampled, replace=False))
        frames, names_per_frame = frames[keep], names_per_frame[keep]
    order: dict[str, int] = {}
    ids = np.array([order.setdefault(name, len(order)) for name in names_per_frame], dtype=np.int64)
    return MultiVideo(frames, ids, list(order), ids[:, None] == ids[None, :])


def atomic_write_text(path, text: str) -> None:
    def write(tmp):
        Path(tmp).write_text(text, encoding="utf-8")

    atomic_write(path, write)
