"""Coarse-to-fine place retrieval.

A global shortlist is taken by Euclidean distance between sequence
descriptors, then re-ranked by summing frame-descriptor distances over the
trailing ``L_m`` frames of query and candidate (fixed velocity, no search).

All indices exposed by this module are frame rows of the database traverse.
Sequence descriptors exist only for the last ``N`` frames of a traverse
(trailing windows need history), so ``DescriptorIndex.offset`` maps a
sequence row to its frame row.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Poses, read_descriptors, read_poses, write_descriptors, write_poses
from .errors import CorruptFile, EmptyIndex, InsufficientHistory, ShapeMismatch


@dataclass
class DescriptorIndex:
    seq: np.ndarray  # (N, d) sequence descriptors for frame rows offset..F-1
    frames: np.ndarray  # (F, d1) frame descriptors
    poses: Poses | None = None

    def __post_init__(self):
        self.seq = np.atleast_2d(np.asarray(self.seq, dtype=np.float64))
        self.frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float64))
        if self.seq.shape[0] > self.frames.shape[0]:
            raise ShapeMismatch("more sequence descriptors than frames")
        if self.poses is not None and len(self.poses) != self.frames.shape[0]:
            raise ShapeMismatch("pose rows must align with frame rows")

    @property
    def offset(self) -> int:
        return self.frames.shape[0] - self.seq.shape[0]

    def __len__(self):
        return self.seq.shape[0]


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 10
    lm: int = 5

    def __post_init__(self):
        if self.k < 1 or self.lm < 1:
            raise ValueError("k and lm must be >= 1")


@dataclass
class RetrievalResult:
    shortlist: list[tuple[int, float]]
    refined: list[tuple[int, float]]
    k_star: int
    skipped: list[int] = field(default_factory=list)
    tail: list[int] = field(default_factory=list)

    def ranking(self) -> list[int]:
        """Candidates best-first: re-ranked, then skipped shortlist entries, then the tail."""
        order = sorted(self.refined, key=lambda kq: (kq[1], kq[0]))
        return [k for k, _ in order] + list(self.skipped) + list(self.tail)

    @property
    def p_top1(self) -> float:
        return self.shortlist[0][1]

    @property
    def q_top1(self) -> float:
        for k, q in self.refined:
            if k == self.k_star:
                return q
        return float("nan")


def _ordered(dist: np.ndarray, n: int) -> np.ndarray:
    # stable sort: equal distances keep ascending row order
    return np.argsort(dist, kind="stable")[:n]


def distances(query: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    diff = matrix - np.asarray(query, dtype=np.float64)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def global_shortlist(query_seq, index: DescriptorIndex, K: int) -> list[tuple[int, float]]:
    if len(index) == 0:
        raise EmptyIndex("index has no sequence descriptors")
    if K < 1 or K > len(index):
        raise ValueError(f"K={K} outside [1, {len(index)}]")
    d = distances(query_seq, index.seq)
    rows = _ordered(d, K)
    return [(int(r) + index.offset, float(d[r])) for r in rows]


def local_align_score(query_frames: np.ndarray, i: int, index: DescriptorIndex, k: int, lm: int) -> float:
    """Sum of frame-descriptor distances between the trailing ``lm`` frames of query i and candidate k."""
    if i < lm - 1 or k < lm - 1:
        raise InsufficientHistory(f"need {lm} trailing frames at query {i} and candidate {k}")
    t = np.arange(lm)
    diff = np.asarray(query_frames, dtype=np.float64)[i - t] - index.frames[k - t]
    return float(np.sum(np.sqrt(np.einsum("ij,ij->i", diff, diff))))


def hierarchical_retrieve(
    query_seq,
    query_frames: np.ndarray,
    i: int,
    index: DescriptorIndex,
    cfg: RetrievalConfig = RetrievalConfig(),
    depth: int = 0,
) -> RetrievalResult:
    """Shortlist ``cfg.k`` candidates, re-rank them by local alignment, pick the minimum.

    ``depth`` extends the ranking past the shortlist with the next global
    candidates (for Recall@K with K larger than the shortlist).
    """
    if len(index) == 0:
        raise EmptyIndex("index has no sequence descriptors")
    K = min(cfg.k, len(index))
    d = distances(query_seq, index.seq)
    rows = _ordered(d, max(K, min(depth, len(index))))
    shortlist = [(int(r) + index.offset, float(d[r])) for r in rows[:K]]
    tail = [int(r) + index.offset for r in rows[K:]]

    lm = cfg.lm
    cands = np.array([k for k, _ in shortlist])
    ok = cands >= lm - 1 if i >= lm - 1 else np.zeros(len(cands), dtype=bool)
    refined: list[tuple[int, float]] = []
    if ok.any():
        t = np.arange(lm)
        qwin = np.asarray(query_frames, dtype=np.float64)[i - t]  # (lm, d1)
        cwin = index.frames[cands[ok][:, None] - t[None, :]]  # (n, lm, d1)
        diff = cwin - qwin[None]
        q = np.sqrt(np.einsum("ntc,ntc->nt", diff, diff)).sum(axis=1)
        refined = [(int(k), float(v)) for k, v in zip(cands[ok], q)]
    skipped = [int(k) for k in cands[~ok]]
    if refined:
        k_star = min(refined, key=lambda kq: (kq[1], kq[0]))[0]
    else:
        k_star = shortlist[0][0]
    return RetrievalResult(shortlist, refined, k_star, skipped, tail)


def flat_retrieve(query, index: DescriptorIndex, mode: str = "sequence_descriptor") -> int:
    """Nearest neighbour in sequence- or frame-descriptor space (frame row returned)."""
    if mode == "sequence_descriptor":
        if len(index) == 0:
            raise EmptyIndex("index has no sequence descriptors")
        return int(np.argmin(distances(query, index.seq))) + index.offset
    if mode == "frame_descriptor":
        if index.frames.shape[0] == 0:
            raise EmptyIndex("index has no frames")
        return int(np.argmin(distances(query, index.frames)))
    raise ValueError(f"unknown mode {mode!r}")


def flat_ranking(query, index: DescriptorIndex, mode: str, depth: int) -> list[int]:
    if mode == "sequence_descriptor":
        d = distances(query, index.seq)
        return [int(r) + index.offset for r in _ordered(d, depth)]
    d = distances(query, index.frames)
    return [int(r) for r in _ordered(d, depth)]


def query_rows(queries: DescriptorIndex, lm: int = 1) -> np.ndarray:
    """Frame rows of the query traverse that have a sequence descriptor and ``lm`` frames of history."""
    start = max(queries.offset, lm - 1)
    return np.arange(start, queries.frames.shape[0])


def retrieve_all(
    queries: DescriptorIndex,
    index: DescriptorIndex,
    cfg: RetrievalConfig = RetrievalConfig(),
    rows=None,
    depth: int = 0,
    threads: int = 1,
) -> list[RetrievalResult]:
    """Hierarchical retrieval for many query rows; output order follows ``rows``."""
    if rows is None:
        rows = query_rows(queries)

    def one(i):
        return hierarchical_retrieve(queries.seq[i - queries.offset], queries.frames, int(i), index, cfg, depth)

    rows = [int(r) for r in rows]
    if threads <= 1:
        return [one(i) for i in rows]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, rows))


# --------------------------------------------------------------------------
# persistence


def save_index(index: DescriptorIndex, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_descriptors(index.seq, d / "seq.sdvd")
    write_descriptors(index.frames, d / "frames.sdvd")
    if index.poses is not None:
        write_poses(index.poses, d / "poses.csv")


def load_index(directory) -> DescriptorIndex:
    d = Path(directory)
    poses = read_poses(d / "poses.csv") if (d / "poses.csv").exists() else None
    return DescriptorIndex(read_descriptors(d / "seq.sdvd"), read_descriptors(d / "frames.sdvd"), poses)


def write_results(results, query_ids, db_ids, path) -> None:
    """CSV ``query_id,k_star,p_top1,q_top1,ranking`` with space-separated ranked ids."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "k_star", "p_top1", "q_top1", "ranking"])
        for qid, res in zip(query_ids, results):
            ranking = " ".join(str(int(db_ids[k])) for k in res.ranking())
            w.writerow([int(qid), int(db_ids[res.k_star]), repr(res.p_top1), repr(res.q_top1), ranking])


def read_results(path):
    """Return ``(query_ids, rankings)`` from a results CSV; rankings are database frame ids."""
    qids, rankings = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != ["query_id", "k_star", "p_top1", "q_top1"]:
            raise CorruptFile(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                qids.append(int(row[0]))
                ranked = [int(x) for x in row[4].split()] if len(row) > 4 and row[4] else [int(row[1])]
            except (ValueError, IndexError) as exc:
                raise CorruptFile(f"{path}:{lineno}: {exc}") from exc
            rankings.append(ranked)
    return qids, rankings
