"""Verification and identification metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .linalg import cosine_similarity_matrix

log = logging.getLogger(__name__)

FAR_LEVELS = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class RocCurve:
    far: np.ndarray
    tar: np.ndarray
    thresholds: np.ndarray  # accept when score >= threshold; first entry is +inf
    auc: float

    def tar_at_far(self, level: float) -> float:
        """Best TAR among operating points whose FAR does not exceed ``level`` (no interpolation)."""
        ok = self.far <= level
        return float(self.tar[ok].max()) if ok.any() else 0.0


def roc(scores, is_match) -> RocCurve:
    """Sweep the acceptance threshold over every distinct score."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    is_match = np.asarray(is_match, dtype=bool).ravel()
    if scores.shape != is_match.shape:
        raise ValueError(f"{scores.size} scores for {is_match.size} labels")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos = int(is_match.sum())
    n_neg = is_match.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one matching and one non-matching pair")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    m = is_match[order]
    tp = np.cumsum(m)
    fp = np.cumsum(~m)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tar = np.r_[0.0, tp[ends] / n_pos]
    far = np.r_[0.0, fp[ends] / n_neg]
    thresholds = np.r_[np.inf, s[ends]]
    auc = float(np.sum(np.diff(far) * (tar[1:] + tar[:-1]) / 2.0))
    return RocCurve(far, tar, thresholds, auc)


def pair_scores(vectors, labels) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarity and same-label flag for every unordered pair."""
    labels = np.asarray(labels, dtype=object)
    sim = cosine_similarity_matrix(np.asarray(vectors, dtype=np.float64))
    iu, ju = np.triu_indices(len(labels), k=1)
    return sim[iu, ju], labels[iu] == labels[ju]


def rank1(probes, probe_labels, gallery, gallery_labels) -> float:
    """Fraction of probes whose most similar gallery template carries the probe's label."""
    gallery_labels = list(gallery_labels)
    if len(set(gallery_labels)) != len(gallery_labels):
        raise ValueError("gallery labels must be unique")
    probe_labels = list(probe_labels)
    if not probe_labels:
        raise ValueError("no probes")
    sim = cosine_similarity_matrix(np.asarray(probes, dtype=np.float64), np.asarray(gallery, dtype=np.float64))
    best = np.argmax(sim, axis=1)
    hits = sum(gallery_labels[j] == lab for j, lab in zip(best, probe_labels))
    return hits / len(probe_labels)


def identity_count_mpe(predicted_k, true_k) -> float:
    predicted_k = np.asarray(predicted_k, dtype=np.float64)
    true_k = np.asarray(true_k, dtype=np.float64)
    if predicted_k.shape != true_k.shape or predicted_k.size == 0:
        raise ValueError("predicted and true counts must be equal-length and non-empty")
    if np.any(true_k <= 0):
        raise ValueError("true identity counts must be positive")
    return float(np.mean(np.abs(predicted_k - true_k) / true_k) * 100.0)


def mean_intra_class_distance(vectors, labels) -> float:
    """Mean cosine distance over all same-label pairs; labels with one template are skipped."""
    labels = np.asarray(labels, dtype=object)
    vectors = np.asarray(vectors, dtype=np.float64)
    dists = []
    for lab in dict.fromkeys(labels.tolist()):
        idx = np.flatnonzero(labels == lab)
        if idx.size < 2:
            log.warning("identity %s has a single template; skipped in intra-class distance", lab)
            continue
        sim = cosine_similarity_matrix(vectors[idx])
        iu = np.triu_indices(idx.size, k=1)
        dists.append(1.0 - sim[iu])
    if not dists:
        raise ValueError("no identity has two or more templates")
    return float(np.mean(np.concatenate(dists)))


@dataclass
class EvalReport:
    tar_at_far: dict[float, float] = field(default_factory=dict)
    auc: float | None = None
    rank1: float | None = None
    icpg: float | None = None
    mpe: float | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def lines(self, prefix: str = "") -> list[str]:
        out = [f"{prefix}tar@far={far:g}={tar:.6f}" for far, tar in sorted(self.tar_at_far.items())]
        for key in ("auc", "rank1", "icpg", "mpe"):
            value = getattr(self, key)
            if value is not None:
                out.append(f"{prefix}{key}={value:.6f}")
        out.extend(f"{prefix}{k}={v:.6f}" for k, v in self.extra.items())
        return out


def verification_report(vectors, labels, far_levels=FAR_LEVELS) -> tuple[EvalReport, RocCurve]:
    scores, match = pair_scores(vectors, labels)
    curve = roc(scores, match)
    return EvalReport(tar_at_far={f: curve.tar_at_far(f) for f in far_levels}, auc=curve.auc), curve


def roc_csv(curve: RocCurve) -> str:
    rows = ["far,tar"] + [f"{f:.10g},{t:.10g}" for f, t in zip(curve.far, curve.tar)]
    return "\n".join(rows) + "\n"
