"""``trackpool`` command line: synth, train, aggregate, split, eval."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .aggregator import SCORE_MODES, average_pool
from .data import (
    FormatError,
    MultiVideoSpec,
    SyntheticSpec,
    TemplateRecord,
    TrackRecord,
    atomic_write_text,
    gen_multi_video,
    gen_synthetic,
    load_checkpoint,
    read_templates,
    read_tracks,
    save_checkpoint,
    write_templates,
    write_tracks,
)
from .encoder import EncoderConfig
from .linalg import ShapeError
from .metrics import EvalReport, identity_count_mpe, rank1, roc, roc_csv, verification_report
from .model import ModelWeights, aggregate_tracks
from .multi_identity import DEFAULT_THRESHOLD, STRATEGIES, aggregate_multi, component_index, split_frames
from .training import BatchSpec, ScheduledSampling, TrainConfig, train_multi, train_single

log = logging.getLogger("trackpool")


class CliError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("TRACKPOOL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _load_model(path) -> ModelWeights:
    if path is None:
        raise CliError("--ckpt is required unless --baseline-avg is given")
    if not Path(path).exists():
        raise CliError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _check_dims(tracks: list[TrackRecord], model: ModelWeights | None) -> None:
    if model is not None and tracks and tracks[0].dim != model.config.embed_dim:
        raise CliError(f"tracks have dimension {tracks[0].dim}, checkpoint expects {model.config.embed_dim}")


def _chunks(items, workers: int):
    size = max(1, -(-len(items) // max(1, workers)))
    return [items[i : i + size] for i in range(0, len(items), size)]


def _pool_tracks(tracks: list[TrackRecord], model: ModelWeights | None, workers: int) -> list[np.ndarray]:
    """One template per track, in input order."""
    if model is None:
        return [average_pool(t.embeddings) for t in tracks]

    def run(chunk):
        return [res.r for res in aggregate_tracks(model, [t.embeddings for t in chunk])]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(run, _chunks(tracks, workers)))
    return [r for part in parts for r in part]


def _split_track(track: TrackRecord, model: ModelWeights | None, threshold: float):
    if model is None:
        trackset = split_frames(track.embeddings, threshold)
        vectors = [average_pool(track.embeddings[m]) for m in trackset.tracks]
    else:
        results, trackset = aggregate_multi(track.embeddings, model, threshold, track.frame_indices)
        vectors = [res.r for res in results]
    return vectors, trackset


def _multi_templates(tracks, model, threshold, strategy, workers):
    """Per input track: all component templates, their frame sets and the selected component."""
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outputs = list(pool.map(lambda t: _split_track(t, model, threshold), tracks))
    rows = []
    for track, (vectors, trackset) in zip(tracks, outputs):
        chosen = component_index(trackset, track.embeddings, strategy)
        rows.append((track, vectors, trackset, chosen))
    return rows


def cmd_synth(args) -> None:
    spec = SyntheticSpec(
        num_identities=args.identities,
        sessions_per_identity=args.sessions,
        frames_per_session=args.frames,
        embed_dim=args.dim,
        sigma=args.sigma,
        seed=args.seed,
        quality_degradation=args.degraded,
        min_centroid_distance=args.min_centroid_distance,
    )
    data = gen_synthetic(spec)
    if args.kind == "single":
        write_tracks(args.out, data.tracks)
        return
    if args.truth is None:
        raise CliError("--kind multi needs --truth for the ground-truth file")
    vspec = MultiVideoSpec(args.min_identities, args.max_identities, args.frames_sampled)
    rng = np.random.default_rng(args.seed + 1)
    videos, truth = [], []
    for v in range(args.videos):
        video = gen_multi_video(data.tracks, vspec, rng)
        vid = f"video{v:05d}"
        videos.append(TrackRecord(vid, None, np.arange(len(video.labels)), video.embeddings))
        truth.append(
            {
                "track_id": vid,
                "true_k": video.true_k,
                "labels": video.labels.tolist(),
                "identities": video.identities,
                "mask": ["".join("1" if b else "0" for b in row) for row in video.mask],
            }
        )
    text = "".join(json.dumps(t, sort_keys=True) + "\n" for t in truth)
    atomic_write_text(args.truth, text)
    try:
        write_tracks(args.out, videos)
    except BaseException:
        Path(args.truth).unlink(missing_ok=True)
        raise


def _encoder_config(args, dim: int) -> EncoderConfig:
    return EncoderConfig(
        embed_dim=dim,
        num_heads=args.heads,
        num_blocks=args.blocks,
        ffn_hidden=args.ffn_hidden,
        attention_dropout=args.attention_dropout,
        relu_dropout=args.relu_dropout,
        use_positional_encoding=not args.no_pos_enc,
    )


def cmd_train(args) -> None:
    tracks = read_tracks(args.tracks)
    if not tracks:
        raise CliError(f"{args.tracks} holds no tracks")
    enc = _encoder_config(args, tracks[0].dim)
    cfg = TrainConfig(
        max_iterations=args.iterations,
        eval_every=args.eval_every,
        patience=args.patience,
        val_fraction=args.val_fraction,
        lr=args.lr,
        seed=args.seed,
        score_mode=args.score_mode,
        log_every=args.log_every,
    )
    loss_kw = {"scale": args.scale, "margin": args.margin, "angular": args.angular}
    progress = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        if args.multi:
            result = train_multi(
                tracks,
                enc,
                ScheduledSampling(args.horizon),
                MultiVideoSpec(args.min_identities, args.max_identities, args.frames_sampled),
                videos_per_batch=args.videos_per_batch,
                frames_per_template=args.frames_per_template,
                threshold=args.threshold,
                cfg=cfg,
                loss_kw=loss_kw,
                progress=progress,
            )
        else:
            batch = BatchSpec(args.templates_per_batch, args.identities_per_batch, args.frames_per_template)
            result = train_single(tracks, enc, batch, cfg, loss_kw, progress)
    except BaseException:
        if progress is not None:
            progress.close()
            Path(args.log).unlink(missing_ok=True)
        raise
    if progress is not None:
        progress.close()
    meta = {"best_icpg": result.best_icpg, "best_iteration": result.best_iteration, "seed": args.seed}
    save_checkpoint(result.model, args.out, meta)
    log.info("saved checkpoint %s (best icpg %.6g at iteration %d)", args.out, result.best_icpg, result.best_iteration)


def cmd_aggregate(args) -> None:
    tracks = read_tracks(args.tracks)
    model = None if args.baseline_avg else _load_model(args.ckpt)
    _check_dims(tracks, model)
    if not args.multi:
        vectors = _pool_tracks(tracks, model, args.workers)
        write_templates(args.out, [TemplateRecord(t.track_id, t.identity, v) for t, v in zip(tracks, vectors)])
        return
    if args.map is None:
        raise CliError("--multi needs --map for the template-to-frames mapping file")
    templates, mapping = [], []
    for track, vectors, trackset, chosen in _multi_templates(tracks, model, args.threshold, args.select, args.workers):
        for j, (vec, members) in enumerate(zip(vectors, trackset.tracks)):
            tid = f"{track.track_id}#{j}"
            templates.append(TemplateRecord(tid, track.identity if j == chosen else None, vec))
            mapping.append(
                {
                    "template_id": tid,
                    "track_id": track.track_id,
                    "component": j,
                    "frames": track.frame_indices[members].tolist(),
                    "selected": j == chosen,
                }
            )
    write_templates(args.out, templates)
    try:
        atomic_write_text(args.map, "".join(json.dumps(m, sort_keys=True) + "\n" for m in mapping))
    except BaseException:
        Path(args.out).unlink(missing_ok=True)
        raise


def cmd_split(args) -> None:
    tracks = read_tracks(args.tracks)
    truth = None
    if args.truth:
        truth = {}
        with open(args.truth, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                try:
                    rec = json.loads(line)
                    truth[rec["track_id"]] = int(rec["true_k"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    raise FormatError(f"{args.truth}:{lineno}: malformed ground-truth record") from None
    lines, pred, true = [], [], []
    for t in tracks:
        trackset = split_frames(t.embeddings, args.threshold)
        chosen = component_index(trackset, t.embeddings, args.select)
        lines.append(
            json.dumps(
                {
                    "track_id": t.track_id,
                    "k": trackset.k,
                    "tracks": [t.frame_indices[m].tolist() for m in trackset.tracks],
                    "selected": chosen,
                },
                sort_keys=True,
            )
        )
        if truth is not None:
            if t.track_id not in truth:
                raise CliError(f"no ground truth for {t.track_id}")
            pred.append(trackset.k)
            true.append(truth[t.track_id])
    atomic_write_text(args.out, "".join(line + "\n" for line in lines))
    if truth is not None:
        exact = float(np.mean(np.asarray(pred) == np.asarray(true)))
        report = f"mpe={identity_count_mpe(pred, true):.6f}\nexact_k={exact:.6f}\nvideos={len(pred)}\n"
        if args.report:
            atomic_write_text(args.report, report)
        else:
            sys.stdout.write(report)


def _identification(vectors, labels):
    gallery, gl, probes, pl = [], [], [], []
    seen = set()
    for v, lab in zip(vectors, labels):
        (probes if lab in seen else gallery).append(v)
        (pl if lab in seen else gl).append(lab)
        seen.add(lab)
    return rank1(probes, pl, gallery, gl) if probes else None


def _read_pairs(path, index):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = [p.strip() for p in line.strip().split(",")]
            if not parts[0] or parts[:2] == ["template_a", "template_b"]:
                continue
            if len(parts) < 2 or parts[0] not in index or parts[1] not in index:
                raise FormatError(f"{path}:{lineno}: expected two known template ids")
            pairs.append((index[parts[0]], index[parts[1]]))
    if not pairs:
        raise FormatError(f"{path}: no pairs")
    return pairs


def _evaluate(vectors, labels, pairs=None) -> tuple[EvalReport, object]:
    vectors = np.asarray(vectors)
    if pairs is None:
        report, curve = verification_report(vectors, labels)
    else:
        a = np.array([p[0] for p in pairs])
        b = np.array([p[1] for p in pairs])
        va, vb = vectors[a], vectors[b]
        scores = np.einsum("ij,ij->i", va, vb) / (np.linalg.norm(va, axis=1) * np.linalg.norm(vb, axis=1))
        match = np.array([labels[i] == labels[j] for i, j in pairs])
        curve = roc(scores, match)
        report = EvalReport(tar_at_far={f: curve.tar_at_far(f) for f in (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)}, auc=curve.auc)
    report.rank1 = _identification(vectors, labels)
    return report, curve


def cmd_eval(args) -> None:
    if (args.templates is None) == (args.tracks is None):
        raise CliError("give exactly one of --templates or --tracks")
    if args.templates:
        if args.compare:
            raise CliError("--compare needs --tracks")
        recs = read_templates(args.templates)
        ids = [r.template_id for r in recs]
        labels = [r.identity for r in recs]
        runs = {"": [r.vector for r in recs]}
    else:
        tracks = read_tracks(args.tracks)
        model = None if args.baseline_avg else _load_model(args.ckpt)
        _check_dims(tracks, model)
        ids = [t.track_id for t in tracks]
        labels = [t.identity for t in tracks]

        def pooled(m):
            if args.multi:
                rows = _multi_templates(tracks, m, args.threshold, args.select, args.workers)
                return [vectors[chosen] for _, vectors, _, chosen in rows]
            return _pool_tracks(tracks, m, args.workers)

        runs = {"": pooled(model)}
        if args.compare == "avg":
            if model is None:
                raise CliError("--compare avg needs a checkpoint to compare against")
            runs = {"sa.": runs[""], "avg.": pooled(None)}
    keep = [i for i, lab in enumerate(labels) if lab is not None]
    if len(keep) < 2:
        raise CliError("need at least two labelled templates")
    index = {ids[i]: n for n, i in enumerate(keep)}
    labels = [labels[i] for i in keep]
    pairs = _read_pairs(args.pairs, index) if args.pairs else None
    lines, curves, reports = [], {}, {}
    for prefix, vectors in runs.items():
        report, curve = _evaluate([vectors[i] for i in keep], labels, pairs)
        reports[prefix], curves[prefix] = report, curve
        lines += report.lines(prefix)
    if args.compare == "avg":
        sa, avg = reports["sa."], reports["avg."]
        delta = EvalReport(
            tar_at_far={f: sa.tar_at_far[f] - avg.tar_at_far[f] for f in sa.tar_at_far},
            auc=sa.auc - avg.auc,
            rank1=None if sa.rank1 is None else sa.rank1 - avg.rank1,
        )
        lines += delta.lines("delta.")
    text = "".join(line + "\n" for line in lines)
    outputs = []
    try:
        if args.roc:
            primary = curves.get("sa.", curves.get(""))
            atomic_write_text(args.roc, roc_csv(primary))
            outputs.append(args.roc)
        if args.out:
            atomic_write_text(args.out, text)
            outputs.append(args.out)
    except BaseException:
        for p in outputs:
            Path(p).unlink(missing_ok=True)
        raise
    if not args.out:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trackpool", description="Self-attention aggregation of face-track embeddings.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("synth", help="generate synthetic single- or multi-identity embedding data")
    common(s)
    s.add_argument("--kind", choices=("single", "multi"), default="single")
    s.add_argument("--out", required=True)
    s.add_argument("--truth", help="ground-truth JSONL for --kind multi")
    s.add_argument("--identities", type=int, default=200)
    s.add_argument("--sessions", type=int, default=4)
    s.add_argument("--frames", type=int, default=32)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--sigma", type=float, default=0.1)
    s.add_argument("--degraded", type=float, default=0.0, help="fraction of low-quality frames")
    s.add_argument("--min-centroid-distance", type=float, default=0.0)
    s.add_argument("--videos", type=int, default=100)
    s.add_argument("--min-identities", type=int, default=2)
    s.add_argument("--max-identities", type=int, default=64)
    s.add_argument("--frames-sampled", type=int, default=256)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the aggregator and write the best-ICPG checkpoint")
    common(t)
    t.add_argument("--tracks", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="progress records (JSON lines)")
    t.add_argument("--multi", action="store_true", help="train on synthetic multi-identity videos")
    t.add_argument("--heads", type=int, default=8)
    t.add_argument("--blocks", type=int, default=4)
    t.add_argument("--ffn-hidden", type=int, default=None)
    t.add_argument("--attention-dropout", type=float, default=0.3)
    t.add_argument("--relu-dropout", type=float, default=0.4)
    t.add_argument("--no-pos-enc", action="store_true")
    t.add_argument("--score-mode", choices=SCORE_MODES, default="element")
    t.add_argument("--scale", type=float, default=16.0)
    t.add_argument("--margin", type=float, default=0.35)
    t.add_argument("--angular", action="store_true", help="use cos(theta + m) for the target logit")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--iterations", type=int, default=20000)
    t.add_argument("--eval-every", type=int, default=200)
    t.add_argument("--patience", type=int, default=5)
    t.add_argument("--log-every", type=int, default=50, help="iterations between loss records")
    t.add_argument("--val-fraction", type=float, default=0.2)
    t.add_argument("--templates-per-batch", type=int, default=256)
    t.add_argument("--identities-per-batch", type=int, default=128)
    t.add_argument("--frames-per-template", type=int, default=32)
    t.add_argument("--horizon", type=int, default=5000)
    t.add_argument("--min-identities", type=int, default=2)
    t.add_argument("--max-identities", type=int, default=64)
    t.add_argument("--frames-sampled", type=int, default=256)
    t.add_argument("--videos-per-batch", type=int, default=4)
    t.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("aggregate", help="turn each track into a template")
    common(a)
    a.add_argument("--tracks", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--ckpt")
    a.add_argument("--baseline-avg", action="store_true", help="average pooling instead of the model")
    a.add_argument("--multi", action="store_true", help="split each track into identities first")
    a.add_argument("--map", help="sidecar JSONL mapping templates to frames (with --multi)")
    a.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    a.add_argument("--select", choices=STRATEGIES, default="highest_norm")
    a.set_defaults(func=cmd_aggregate)

    sp = sub.add_parser("split", help="decompose multi-identity tracks into face tracks")
    common(sp)
    sp.add_argument("--tracks", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--truth", help="ground-truth JSONL; reports MPE of the identity count")
    sp.add_argument("--report", help="write the MPE report here instead of stdout")
    sp.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    sp.add_argument("--select", choices=STRATEGIES, default="highest_norm")
    sp.set_defaults(func=cmd_split)

    e = sub.add_parser("eval", help="verification and identification metrics")
    common(e)
    e.add_argument("--templates")
    e.add_argument("--tracks")
    e.add_argument("--ckpt")
    e.add_argument("--baseline-avg", action="store_true")
    e.add_argument("--compare", choices=("avg",))
    e.add_argument("--multi", action="store_true", help="keep one component per track (see --select)")
    e.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    e.add_argument("--select", choices=STRATEGIES, default="highest_norm")
    e.add_argument("--pairs", help="CSV of template_a,template_b pairs to score instead of all pairs")
    e.add_argument("--out", help="report file (key=value lines); stdout if omitted")
    e.add_argument("--roc", help="ROC table as CSV (far,tar)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CliError, FormatError, ShapeError, ValueError, FloatingPointError, OSError) as exc:
        print(f"trackpool: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
