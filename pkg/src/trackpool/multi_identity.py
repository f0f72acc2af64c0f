"""Splitting a multi-identity frame sequence into face tracks.

Frames are related by thresholded cosine distance, the relation is resolved
into disjoint groups by a greedy claim procedure ordered by embedding norm
(a proxy for frame quality), and each group is aggregated as its own track.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregator import AggregationResult
from .linalg import ShapeError, as_matrix
from .model import ModelWeights, aggregate_tracks

DEFAULT_THRESHOLD = 0.7
STRATEGIES = ("highest_norm", "biggest")


class TrackConsistencyError(RuntimeError):
    """Claimed frame sets overlap; the mask did not come from greedy_postprocess."""


@dataclass
class TrackSet:
    tracks: list[np.ndarray]  # ascending frame indices per track
    n: int

    @property
    def k(self) -> int:
        return len(self.tracks)

    def assignment(self) -> np.ndarray:
        """Track id per frame, -1 for unassigned frames."""
        out = np.full(self.n, -1, dtype=np.int64)
        for tid, members in enumerate(self.tracks):
            out[members] = tid
        return out


def frame_norms(x) -> np.ndarray:
    return np.linalg.norm(as_matrix(x, "X"), axis=1)


def build_mask(x, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Binary relation: 1 where the cosine distance of two frames is at most ``threshold``."""
    x = as_matrix(x, "X")
    if x.shape[0] == 0:
        raise ValueError("need at least one frame")
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"frame {int(zero[0])} has a zero embedding; cosine distance undefined")
    unit = x / norms[:, None]
    n = x.shape[0]
    mask = np.zeros((n, n), dtype=np.int8)
    iu, ju = np.triu_indices(n, k=1)
    dist = 1.0 - np.clip(np.einsum("ij,ij->i", unit[iu], unit[ju]), -1.0, 1.0)
    same = (dist <= threshold).astype(np.int8)
    mask[iu, ju] = same
    mask[ju, iu] = same
    np.fill_diagonal(mask, 1)
    return mask


def greedy_postprocess(mask, q_scores) -> np.ndarray:
    """Resolve a relation matrix into non-overlapping claims.

    Frames are visited from highest to lowest score (ties: lower index
    first). A visited frame copies its current row of the working mask into
    the output, then every frame it claimed is removed from the working mask
    (row and column zeroed).
    """
    work = np.array(mask, dtype=np.int8, copy=True)
    q = np.asarray(q_scores, dtype=np.float64).ravel()
    if work.ndim != 2 or work.shape[0] != work.shape[1]:
        raise ShapeError(f"mask must be square, got {work.shape}")
    if q.size != work.shape[0]:
        raise ShapeError(f"{q.size} scores for a {work.shape[0]}x{work.shape[0]} mask")
    out = np.zeros_like(work)
    for i in np.argsort(-q, kind="stable"):
        out[i] = work[i]
        claimed = np.flatnonzero(out[i])
        work[:, claimed] = 0
        work[claimed, :] = 0
    return out


def extract_tracks(processed) -> TrackSet:
    processed = np.asarray(processed)
    n = processed.shape[0]
    tracks = []
    owner = np.full(n, -1, dtype=np.int64)
    for row in range(n):
        members = np.flatnonzero(processed[row])
        if members.size == 0:
            continue
        clash = members[owner[members] >= 0]
        if clash.size:
            raise TrackConsistencyError(f"frame {int(clash[0])} is claimed by two rows")
        owner[members] = len(tracks)
        tracks.append(members)
    return TrackSet(tracks, n)


def split_frames(x, threshold: float = DEFAULT_THRESHOLD) -> TrackSet:
    x = as_matrix(x, "X")
    return extract_tracks(greedy_postprocess(build_mask(x, threshold), frame_norms(x)))


def aggregate_multi(
    x,
    model: ModelWeights,
    threshold: float = DEFAULT_THRESHOLD,
    frame_order=None,
) -> tuple[list[AggregationResult], TrackSet]:
    """Split a sequence into tracks and aggregate each one with ``model``.

    ``frame_order`` gives each row's temporal position; rows are assumed to be
    in temporal order when it is omitted.
    """
    x = as_matrix(x, "X")
    if frame_order is not None:
        frame_order = np.asarray(frame_order)
        if frame_order.shape != (x.shape[0],):
            raise ShapeError(f"{frame_order.size} frame positions for {x.shape[0]} frames")
    trackset = split_frames(x, threshold)
    if frame_order is not None:
        trackset = TrackSet([m[np.argsort(frame_order[m], kind="stable")] for m in trackset.tracks], trackset.n)
    results = aggregate_tracks(model, [x[m] for m in trackset.tracks])
    return results, trackset


def component_index(tracks: TrackSet, x, strategy: str = "highest_norm") -> int:
    """Index of the component kept when a session must yield a single template.

    ``highest_norm`` keeps the track holding the frame with the largest
    embedding norm; ``biggest`` keeps the track with the most frames. Ties go
    to the lower track id.
    """
    if tracks.k == 0:
        raise ValueError("no components to select from")
    if strategy == "biggest":
        return int(np.argmax([len(m) for m in tracks.tracks]))
    if strategy == "highest_norm":
        norms = frame_norms(x)
        return int(np.argmax([norms[m].max() for m in tracks.tracks]))
    raise ValueError(f"unknown selection strategy {strategy!r}; expected one of {STRATEGIES}")


def select_component(results: list, tracks: TrackSet, x, strategy: str = "highest_norm") -> AggregationResult:
    if not results:
        raise ValueError("no components to select from")
    if len(results) != tracks.k:
        raise ShapeError(f"{len(results)} results for {tracks.k} tracks")
    return results[component_index(tracks, x, strategy)]


def calibrate_threshold(videos, grid=None) -> tuple[float, float]:
    """Pick the mask threshold minimizing the identity-count error on labelled videos.

    ``videos`` is an iterable of ``(embeddings, true_k)``. Returns
    ``(threshold, mpe)``; ties go to the threshold closest to the default.
    """
    from .metrics import identity_count_mpe

    videos = list(videos)
    grid = np.round(np.arange(0.05, 1.0, 0.05), 2) if grid is None else np.asarray(grid, dtype=np.float64)
    truth = [k for _, k in videos]
    best = None
    for t in grid:
        pred = [split_frames(x, t).k for x, _ in videos]
        key = (identity_count_mpe(pred, truth), abs(t - DEFAULT_THRESHOLD))
        if best is None or key < best[0]:
            best = (key, float(t))
    return best[1], best[0][0]
