"""Quadruplet training loop: mine, encode, loss, backward, SGD with momentum."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataio import Dataset, window_sequences
from .diffgraph import GradCheckReport, finite_difference_check, zero_grads
from .dsd import DsdEncoder, DsdParams, init_dsd_params
from .errors import DivergedLoss
from .evalkit import GroundTruth, recall_at_k
from .objective import LossConfig, MiningCache, QuadrupletBatch, mine_quadruplets, quadruplet_loss, refresh_cache
from .retrieval import distances

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    tuple_images: int = 12
    seq_len: int = 5
    kernel_width: int = 3
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_period: int = 50
    epochs: int = 200
    cache_refresh: int = 0
    seed: int = 0
    clip_norm: float = 10.0
    val_fraction: float = 0.1
    radius: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("batch_size and seq_len must be >= 1")
        if self.kernel_width > self.seq_len:
            raise ValueError("kernel_width must not exceed seq_len")
        if not self.lr > 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and 0 <= momentum < 1")
        if self.tuple_images < 4:
            raise ValueError("a tuple needs at least 4 images")
        if self.epochs < 0 or self.lr_decay_period < 1:
            raise ValueError("epochs must be >= 0 and lr_decay_period >= 1")


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    best_recall: float = -1.0
    best_epoch: int = -1


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_period)


def sgd_step(params, state: TrainState, cfg: TrainConfig) -> None:
    """Momentum SGD with L2 weight decay; frozen parameters are left untouched."""
    lr = learning_rate(cfg, state.epoch)
    for p in params:
        if not p.trainable:
            continue
        g = p.grads + cfg.weight_decay * p.values
        v = state.momentum.get(p.name)
        if v is None:
            v = state.momentum[p.name] = np.zeros_like(p.values)
        v *= cfg.momentum
        v += g
        p.values -= lr * v
    state.step += 1


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    params = [p for p in params if p.trainable]
    total = float(np.sqrt(sum(float(np.sum(p.grads * p.grads)) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grads *= scale
    return total


@dataclass
class TrainingData:
    """Window tensors and window-level ground truth derived from a traverse pair."""

    db_windows: np.ndarray
    query_windows: np.ndarray
    gt: GroundTruth
    train_queries: np.ndarray
    val_queries: np.ndarray

    @classmethod
    def build(cls, dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> "TrainingData":
        ell = cfg.seq_len
        db_windows = window_sequences(dataset.ref_frames, ell)
        query_windows = window_sequences(dataset.query_frames, ell)
        gt = GroundTruth(
            dataset.query_poses.positions[ell - 1:],
            dataset.ref_poses.positions[ell - 1:],
            cfg.radius,
            dataset.query_poses.metric,
        )
        n = query_windows.shape[0]
        # hold out contiguous blocks of the route so validation sees unseen places
        blocks = np.array_split(np.arange(n), max(1, n // ell))
        n_val = int(round(cfg.val_fraction * len(blocks)))
        chosen = set(rng.choice(len(blocks), size=n_val, replace=False).tolist()) if n_val else set()
        val = np.concatenate([b for i, b in enumerate(blocks) if i in chosen] or [np.zeros(0, np.int64)])
        train = np.concatenate([b for i, b in enumerate(blocks) if i not in chosen] or [np.zeros(0, np.int64)])
        return cls(db_windows, query_windows, gt, train.astype(np.int64), val.astype(np.int64))


def validation_recall(encoder: DsdEncoder, data: TrainingData) -> float:
    """Flat Recall@1 of sequence descriptors for the held-out queries."""
    if data.val_queries.size == 0:
        return float("nan")
    db = encoder.encode(data.db_windows)
    q = encoder.encode(data.query_windows[data.val_queries])
    rankings = [[int(np.argmin(distances(v, db)))] for v in q]
    gt = GroundTruth(data.gt.query_positions[data.val_queries], data.gt.db_positions, data.gt.radius, data.gt.metric)
    return recall_at_k(rankings, gt, [1]).recalls[0]


@dataclass
class TrainResult:
    state: TrainState
    params: DsdParams  # final parameters
    best_params: DsdParams  # parameters at the best validation epoch
    history: list[dict] = field(default_factory=list)


def batch_loss(encoder: DsdEncoder, data: TrainingData, idx: np.ndarray, loss_cfg: LossConfig, backward: bool = False) -> float:
    X = np.concatenate(
        [
            data.query_windows[idx[:, 0]],
            data.db_windows[idx[:, 1]],
            data.db_windows[idx[:, 2]],
            data.db_windows[idx[:, 3]],
        ]
    )
    F = encoder.forward(X) if backward else encoder.encode(X)
    a, p, n1, n2 = np.split(F, 4)
    loss, grads = quadruplet_loss(QuadrupletBatch(a, p, n1, n2), loss_cfg)
    if backward:
        encoder.backward(np.concatenate(grads))
    return loss


def train(
    dataset: Dataset,
    params: DsdParams,
    cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    state: TrainState | None = None,
    on_epoch: Callable[[DsdParams, TrainState], None] | None = None,
    echo: Callable[[str], None] | None = print,
) -> TrainResult:
    """Train ``params`` in place and return the final and best-validation parameters.

    Everything random (validation split, shuffling, negative pools) draws
    from one generator seeded by ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    data = TrainingData.build(dataset, cfg, rng)
    state = state or TrainState()
    encoder = DsdEncoder(params)
    trainable = params.trainable()
    best = params.copy()
    history = []
    pool = cfg.tuple_images - 2  # anchor and positive take two of the tuple's images

    cache = MiningCache(
        encoder.encode(data.db_windows), encoder.encode(data.query_windows), refresh_interval=cfg.cache_refresh
    )
    start_epoch = state.epoch
    for epoch in range(start_epoch, cfg.epochs):
        state.epoch = epoch
        refresh_cache(encoder.encode, data.db_windows, data.query_windows, cache)
        order = rng.permutation(data.train_queries)
        losses = []
        for s in range(0, order.size, cfg.batch_size):
            if cache.needs_refresh():
                refresh_cache(encoder.encode, data.db_windows, data.query_windows, cache)
            mined = mine_quadruplets(order[s:s + cfg.batch_size], cache, data.gt, rng, pool_size=pool)
            zero_grads(trainable)
            loss = batch_loss(encoder, data, mined.indices, loss_cfg, backward=True)
            if not np.isfinite(loss):
                raise DivergedLoss(f"loss became {loss} at epoch {epoch} step {state.step}")
            clip_gradients(trainable, cfg.clip_norm)
            sgd_step(trainable, state, cfg)
            for p in trainable:
                if not np.all(np.isfinite(p.values)):
                    raise DivergedLoss(f"{p.name} became non-finite at epoch {epoch} step {state.step}")
            losses.append(loss)
        zero_grads(trainable)

        val = validation_recall(encoder, data)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        lr = learning_rate(cfg, epoch)
        history.append({"epoch": epoch, "step": state.step, "loss": mean_loss, "lr": lr, "val_recall1": val})
        if echo is not None:
            echo(f"epoch={epoch} step={state.step} loss={mean_loss:.6g} lr={lr:.6g} val_recall1={val:.4f}")
        state.epoch = epoch + 1
        if np.isnan(val) or val > state.best_recall:
            # without a validation split the latest epoch is the best we know
            if not np.isnan(val):
                state.best_recall = val
            state.best_epoch = epoch
            best = params.copy()
        if on_epoch is not None:
            on_epoch(params, state)
    return TrainResult(state, params, best, history)


def pipeline_gradcheck(
    seed: int = 0,
    batch: int = 4,
    seq_len: int = 5,
    input_dim: int = 8,
    hidden_dim: int = 8,
    loss_cfg: LossConfig = LossConfig(),
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    **init_kwargs,
) -> GradCheckReport:
    """Finite-difference check of every DSD parameter through the quadruplet loss.

    Draws ``batch`` random quadruplets of (seq_len, input_dim) windows and a
    freshly initialized encoder, both from ``seed``.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((4 * batch, seq_len, input_dim))
    params = init_dsd_params(input_dim, seq_len, hidden_dim, seed=seed, **init_kwargs)
    encoder = DsdEncoder(params)

    def loss_fn():
        F = encoder.forward(X)
        loss, grads = quadruplet_loss(QuadrupletBatch(*np.split(F, 4)), loss_cfg)
        encoder.backward(np.concatenate(grads))
        return loss

    return finite_difference_check(loss_fn, params.trainable(), epsilon, tolerance)
