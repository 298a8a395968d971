"""Recall@K, reverse-database protocol, latency profiling and report emission."""
from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import window_sequences
from .errors import InsufficientCandidates, ShapeMismatch
from .retrieval import (
    DescriptorIndex,
    RetrievalConfig,
    distances,
    flat_ranking,
    hierarchical_retrieve,
    query_rows,
    retrieve_all,
)

METRICS = ("frame_difference", "euclidean_meters")


@dataclass
class GroundTruth:
    """Query and database positions plus the localization radius.

    ``frame_difference`` positions are frame indices (shape (N,));
    ``euclidean_meters`` positions are (N, 2) coordinates.
    """

    query_positions: np.ndarray
    db_positions: np.ndarray
    radius: float
    metric: str = "frame_difference"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if not self.radius > 0:
            raise ValueError("radius must be > 0")
        self.query_positions = np.asarray(self.query_positions, dtype=np.float64)
        self.db_positions = np.asarray(self.db_positions, dtype=np.float64)
        want = 1 if self.metric == "frame_difference" else 2
        for name in ("query_positions", "db_positions"):
            arr = getattr(self, name)
            if (want == 1 and arr.ndim != 1) or (want == 2 and (arr.ndim != 2 or arr.shape[1] != 2)):
                raise ShapeMismatch(f"{name} has shape {arr.shape}, inconsistent with {self.metric}")

    @classmethod
    def from_poses(cls, query_poses, db_poses, radius: float) -> "GroundTruth":
        return cls(query_poses.positions, db_poses.positions, radius, query_poses.metric)

    def distances(self, q: int) -> np.ndarray:
        """Distance from query ``q`` to every database entry."""
        if self.metric == "frame_difference":
            return np.abs(self.db_positions - self.query_positions[q])
        return np.linalg.norm(self.db_positions - self.query_positions[q], axis=1)

    def is_match(self, q: int, candidates) -> np.ndarray:
        return self.distances(q)[np.asarray(candidates, dtype=np.int64)] <= self.radius


@dataclass
class RecallCurve:
    ks: list[int]
    recalls: list[float]

    def __post_init__(self):
        if len(self.ks) != len(self.recalls):
            raise ValueError("ks and recalls must have equal length")

    def at(self, k: int) -> float:
        return self.recalls[self.ks.index(k)]


def recall_at_k(rankings: Sequence[Sequence[int]], gt: GroundTruth, ks: Sequence[int]) -> RecallCurve:
    """Fraction of queries with a database entry within the radius among their top K.

    ``rankings[n]`` lists database rows best-first for query row ``n`` of ``gt``.
    """
    ks = sorted(int(k) for k in ks)
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive")
    n = len(rankings)
    if n == 0:
        raise InsufficientCandidates("no queries")
    # first rank (1-based) at which each query is correctly localized
    first_hit = np.full(n, np.inf)
    for qi, ranked in enumerate(rankings):
        if len(ranked) < ks[-1]:
            raise InsufficientCandidates(f"query {qi} has {len(ranked)} candidates, need {ks[-1]}")
        hits = np.flatnonzero(gt.is_match(qi, list(ranked[: ks[-1]])))
        if hits.size:
            first_hit[qi] = hits[0] + 1
    counts = [int(np.count_nonzero(first_hit <= k)) for k in ks]
    return RecallCurve(ks, [c / n for c in counts])


# --------------------------------------------------------------------------
# pipelines


@dataclass
class Pipeline:
    """How to turn traverses into descriptors and rank database entries.

    ``encoder`` maps windows (B, seq_len, C) to descriptors; ``None`` uses raw
    frame descriptors. ``hierarchical`` re-ranks a shortlist with frame
    alignment.
    """

    name: str
    seq_len: int = 1
    encoder: Callable | None = None
    hierarchical: bool = False
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    frame_encoder: Callable | None = None

    @property
    def min_history(self) -> int:
        need = self.seq_len - 1
        if self.hierarchical:
            need = max(need, self.retrieval.lm - 1)
        return need

    def encode_windows(self, windows: np.ndarray) -> np.ndarray:
        if self.encoder is None:
            return windows[:, -1, :]
        return np.asarray(self.encoder(windows), dtype=np.float64)

    def build_index(self, frames, poses=None):
        frames = np.asarray(frames, dtype=np.float64)
        seq = self.encode_windows(window_sequences(frames, self.seq_len))
        frame_desc = self.frame_encoder(frames) if self.frame_encoder is not None else frames
        return DescriptorIndex(seq, frame_desc, poses)

    def rank(self, queries, index, rows, depth: int, threads: int = 1) -> list[list[int]]:
        if self.hierarchical:
            results = retrieve_all(queries, index, self.retrieval, rows=rows, depth=depth, threads=threads)
            return [r.ranking() for r in results]
        depth = min(depth, len(index))
        return [flat_ranking(queries.seq[i - queries.offset], index, "sequence_descriptor", depth) for i in rows]


def evaluate_pipeline(
    pipeline: Pipeline,
    dataset,
    radius: float,
    ks: Sequence[int] = (1, 5, 10, 20),
    min_history: int | None = None,
    reverse: bool = False,
    threads: int = 1,
) -> RecallCurve:
    """Recall@K of ``pipeline`` on a reference/query traverse pair.

    Query rows start at ``min_history`` (default: the pipeline's own need), so
    pipelines compared on the same value see the same query set. With
    ``reverse`` the reference traverse is processed back to front.
    """
    ref_frames, ref_poses = dataset.ref_frames, dataset.ref_poses
    if reverse:
        ref_frames, ref_poses = ref_frames[::-1], ref_poses.reversed()
    start = max(pipeline.min_history, min_history or 0)
    index = pipeline.build_index(ref_frames, ref_poses)
    queries = pipeline.build_index(dataset.query_frames, dataset.query_poses)
    rows = np.arange(start, dataset.query_frames.shape[0])
    rankings = pipeline.rank(queries, index, rows, depth=max(ks), threads=threads)
    gt = GroundTruth(dataset.query_poses.positions[rows], ref_poses.positions, radius, dataset.query_poses.metric)
    return recall_at_k(rankings, gt, ks)


def reverse_database_eval(
    pipeline: Pipeline,
    dataset,
    radius: float,
    ks: Sequence[int] = (1, 5, 10, 20),
    min_history: int | None = None,
) -> tuple[RecallCurve, RecallCurve]:
    """Recall curves with the reference traverse in recorded and in reversed order.

    Queries and ground truth are untouched; only the database is re-windowed.
    """
    lm = pipeline.retrieval.lm if pipeline.hierarchical else pipeline.seq_len
    if dataset.ref_frames.shape[0] < 2 * lm:
        raise InsufficientCandidates(f"reverse protocol needs at least {2 * lm} reference frames")
    fwd = evaluate_pipeline(pipeline, dataset, radius, ks, min_history)
    rev = evaluate_pipeline(pipeline, dataset, radius, ks, min_history, reverse=True)
    return fwd, rev


@dataclass
class LatencyRow:
    variant: str
    mean_ms: float
    stdev_ms: float
    median_ms: float
    samples: list[float] = field(default_factory=list)


def latency_profile(
    pipelines: Sequence[Pipeline],
    dataset,
    repetitions: int = 10,
    max_queries: int | None = 200,
) -> list[LatencyRow]:
    """Mean per-query retrieval latency of each pipeline, over ``repetitions`` passes.

    Database descriptors are built once, outside the timed region. The timed
    region per query covers encoding the query's own window and the search.
    """
    if repetitions < 5:
        raise ValueError("need at least 5 repetitions")
    rows_all = np.arange(max(p.min_history for p in pipelines), dataset.query_frames.shape[0])
    rows = rows_all[:max_queries] if max_queries else rows_all
    qframes = np.asarray(dataset.query_frames, dtype=np.float64)

    table = []
    for p in pipelines:
        index = p.build_index(dataset.ref_frames, dataset.ref_poses)
        qwindows = {int(i): window_sequences(qframes[i - p.seq_len + 1:i + 1], p.seq_len) for i in rows}

        def one(i, p=p, index=index):
            desc = p.encode_windows(qwindows[i])[0]
            if p.hierarchical:
                return hierarchical_retrieve(desc, qframes, i, index, p.retrieval).k_star
            return int(np.argmin(distances(desc, index.seq)))

        for i in rows[:10]:  # warm-up
            one(int(i))
        samples = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            for i in rows:
                one(int(i))
            samples.append((time.perf_counter() - t0) * 1e3 / len(rows))
        table.append(
            LatencyRow(p.name, statistics.fmean(samples), statistics.stdev(samples), statistics.median(samples), samples)
        )
    return table


# --------------------------------------------------------------------------
# reports


def emit_report(curves: Sequence[RecallCurve], labels: Sequence[str], out_dir, stem: str = "recall"):
    """Write ``<stem>.csv`` (label,K,recall) and a ``<stem>.svg`` line chart."""
    if not curves or not labels:
        raise ValueError("need at least one curve and label")
    if len(curves) != len(labels):
        raise ValueError("one label per curve")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = out / f"{stem}.csv", out / f"{stem}.svg"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "K", "recall"])
        for label, curve in zip(labels, curves):
            for k, r in zip(curve.ks, curve.recalls):
                w.writerow([label, k, repr(float(r))])

    from matplotlib.figure import Figure

    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    for label, curve in zip(labels, curves):
        ax.plot(curve.ks, curve.recalls, marker="o", label=label)
    ax.set_xlabel("K")
    ax.set_ylabel("Recall@K")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    return csv_path, svg_path


def stored_latency(
    variants: Sequence[str],
    index: DescriptorIndex,
    queries: DescriptorIndex,
    cfg: RetrievalConfig = RetrievalConfig(),
    repetitions: int = 10,
    max_queries: int | None = 200,
) -> list[LatencyRow]:
    """Search-only latency over precomputed descriptors.

    Variants: ``s1`` scans frame descriptors, ``s<L>`` scans sequence
    descriptors, ``s<L>to1`` runs hierarchical retrieval.
    """
    if repetitions < 5:
        raise ValueError("need at least 5 repetitions")
    rows_all = query_rows(queries, cfg.lm)
    rows = rows_all[:max_queries] if max_queries else rows_all
    if rows.size == 0:
        raise InsufficientCandidates("no query has enough history")

    def runner(v):
        ell = int(v[1:].removesuffix("to1"))
        if v == "s1":
            return lambda i: int(np.argmin(distances(queries.frames[i], index.frames)))
        for ix in (index, queries):
            if ix.offset != ell - 1:
                raise ShapeMismatch(f"variant {v} needs windows of {ell} frames, index holds {ix.offset + 1}")
        if v.endswith("to1"):
            return lambda i: hierarchical_retrieve(queries.seq[i - queries.offset], queries.frames, i, index, cfg).k_star
        return lambda i: int(np.argmin(distances(queries.seq[i - queries.offset], index.seq)))

    table = []
    for v in variants:
        one = runner(v)
        for i in rows[:10]:
            one(int(i))
        samples = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            for i in rows:
                one(int(i))
            samples.append((time.perf_counter() - t0) * 1e3 / len(rows))
        table.append(
            LatencyRow(v, statistics.fmean(samples), statistics.stdev(samples), statistics.median(samples), samples)
        )
    return table
