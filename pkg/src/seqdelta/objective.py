"""Quadruplet hinge loss and hard-negative mining."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NoValidNegative, NoValidPositive
from .evalkit import GroundTruth


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.1
    gamma1: float = 1.0
    gamma2: float = 0.5

    def __post_init__(self):
        for name in ("margin", "gamma1", "gamma2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class QuadrupletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives1: np.ndarray
    negatives2: np.ndarray
    # (n, 4) rows of (query, positive, negative1, negative2) source indices
    indices: np.ndarray | None = None

    def __post_init__(self):
        arrs = [np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in self.roles()]
        shapes = {a.shape for a in arrs}
        if len(shapes) != 1:
            raise DimensionMismatch(f"quadruplet roles have mismatched shapes {sorted(shapes)}")
        if arrs[0].shape[0] < 1:
            raise DimensionMismatch("empty quadruplet batch")
        self.anchors, self.positives, self.negatives1, self.negatives2 = arrs

    def roles(self):
        return self.anchors, self.positives, self.negatives1, self.negatives2

    def __len__(self):
        return self.anchors.shape[0]


def hinge_arguments(batch: QuadrupletBatch, margin: float):
    a, p, n1, n2 = batch.roles()
    d_ap = np.sum((a - p) ** 2, axis=1)
    d_an1 = np.sum((a - n1) ** 2, axis=1)
    d_an2 = np.sum((a - n2) ** 2, axis=1)
    return margin + d_ap - d_an1, margin + d_ap - d_an2


def quadruplet_loss(batch: QuadrupletBatch, cfg: LossConfig = LossConfig()):
    """Batch-mean quadruplet loss.

    Returns ``(loss, (grad_a, grad_p, grad_n1, grad_n2))``. The hinge
    subgradient at exactly zero is taken as 0.
    """
    a, p, n1, n2 = batch.roles()
    n = len(batch)
    h1, h2 = hinge_arguments(batch, cfg.margin)
    act1 = (h1 > 0).astype(np.float64)
    act2 = (h2 > 0).astype(np.float64)
    loss = cfg.gamma1 * np.mean(np.maximum(h1, 0.0)) + cfg.gamma2 * np.mean(np.maximum(h2, 0.0))

    c1 = (cfg.gamma1 / n) * act1[:, None]
    c2 = (cfg.gamma2 / n) * act2[:, None]
    # d/da ||a-x||^2 = 2(a-x)
    g_ap = 2.0 * (a - p)
    g_an1 = 2.0 * (a - n1)
    g_an2 = 2.0 * (a - n2)
    ga = c1 * (g_ap - g_an1) + c2 * (g_ap - g_an2)
    gp = -(c1 + c2) * g_ap
    gn1 = c1 * g_an1
    gn2 = c2 * g_an2
    return float(loss), (ga, gp, gn1, gn2)


def triplet_loss(anchors, positives, negatives, margin: float) -> float:
    """Batch-mean triplet hinge on squared Euclidean distances."""
    a, p, n = (np.asarray(x, dtype=np.float64) for x in (anchors, positives, negatives))
    h = margin + np.sum((a - p) ** 2, axis=1) - np.sum((a - n) ** 2, axis=1)
    return float(np.mean(np.maximum(h, 0.0)))


@dataclass
class MiningCache:
    """Cached embeddings used to pick positives and hard negatives.

    ``db`` rows align with ``GroundTruth.db_positions`` and ``queries`` rows with
    ``GroundTruth.query_positions``. ``refresh_interval`` counts mined batches;
    0 disables refreshes between the per-epoch rebuilds.
    """

    db: np.ndarray
    queries: np.ndarray
    refresh_interval: int = 0
    staleness: int = 0

    def __post_init__(self):
        if self.db.ndim != 2 or self.queries.ndim != 2 or self.db.shape[1] != self.queries.shape[1]:
            raise DimensionMismatch("cache embeddings must be 2-D with matching widths")

    def needs_refresh(self) -> bool:
        return self.refresh_interval > 0 and self.staleness >= self.refresh_interval


def refresh_cache(encode, db_windows, query_windows, cache: MiningCache) -> None:
    """Re-embed every database and query window with the current parameters."""
    cache.db = np.asarray(encode(db_windows), dtype=np.float64)
    cache.queries = np.asarray(encode(query_windows), dtype=np.float64)
    cache.staleness = 0


def _nearest(cands: np.ndarray, dist: np.ndarray) -> int:
    # cands ascending; argmin returns the first minimum -> lowest index wins ties
    return int(cands[np.argmin(dist[cands])])


def mine_quadruplets(
    query_indices,
    cache: MiningCache,
    gt: GroundTruth,
    seed=0,
    pool_size: int | None = None,
    exclusion_factor: float = 2.0,
) -> QuadrupletBatch:
    """Pick (anchor, positive, hard negative, random negative) for each query.

    Positive: the ground-truth match (within the localization radius) nearest
    the anchor in embedding space. Negatives are items farther than
    ``exclusion_factor * radius``; negative1 is the nearest of them in
    embedding space, negative2 a uniform draw from the rest. With
    ``pool_size`` set, both negatives come from a seeded random subset of
    that size instead of the full negative set.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rows = []
    for q in np.asarray(query_indices, dtype=np.int64).reshape(-1):
        geo = gt.distances(int(q))
        emb = np.sum((cache.db - cache.queries[q]) ** 2, axis=1)
        pos = np.flatnonzero(geo <= gt.radius)
        if pos.size == 0:
            raise NoValidPositive(f"query {q} has no database item within radius {gt.radius}")
        neg = np.flatnonzero(geo > exclusion_factor * gt.radius)
        if pool_size is not None and neg.size > pool_size:
            neg = np.sort(rng.choice(neg, size=pool_size, replace=False))
        if neg.size < 2:
            raise NoValidNegative(f"query {q} has {neg.size} valid negatives, need 2")
        p = _nearest(pos, emb)
        n1 = _nearest(neg, emb)
        rest = neg[neg != n1]
        n2 = int(rest[rng.integers(rest.size)])
        rows.append((int(q), p, n1, n2))
    cache.staleness += 1
    idx = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return QuadrupletBatch(
        anchors=cache.queries[idx[:, 0]],
        positives=cache.db[idx[:, 1]],
        negatives1=cache.db[idx[:, 2]],
        negatives2=cache.db[idx[:, 3]],
        indices=idx,
    )
