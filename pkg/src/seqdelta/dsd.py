"""Differentiable Sequence Delta encoder.

Pipeline for a batch ``X`` of shape (B, T, C)::

    D = temporal_difference(X, kernel)        # (B, C)
    Z = lstm_single_step(D, lstm)             # (B, d)
    R = residual_path(D, params)              # (B, d)
    F = normalize(Z + R)                      # (B, d)

Every stage has a hand-written backward pass in :class:`DsdEncoder`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .diffgraph import Param
from .errors import NoCachedForward, ShapeMismatch

FULL_VECTOR = "full_vector"
CONV_COLLAPSE = "conv_collapse"
KERNEL_MODES = (FULL_VECTOR, CONV_COLLAPSE)
GATES = ("i", "f", "g", "o")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def antisymmetric_init(length: int) -> np.ndarray:
    """Default differencing weights: [-1, 0, 1] for length 3, a linear ramp otherwise.

    Length 1 returns the identity kernel [1]; an anti-symmetric scalar would be 0.
    """
    if length < 1:
        raise ValueError("kernel length must be >= 1")
    if length == 1:
        return np.ones(1)
    i = np.arange(length, dtype=np.float64)
    return (i - (length - 1) / 2.0) / (length // 2)


@dataclass
class DeltaKernel:
    mode: str
    weights: Param

    def __post_init__(self):
        if self.mode not in KERNEL_MODES:
            raise ValueError(f"unknown kernel mode {self.mode!r}")
        if self.weights.values.ndim != 1:
            raise ShapeMismatch("kernel weights must be a vector")

    @property
    def learnable(self) -> bool:
        return self.weights.trainable

    @property
    def width(self) -> int:
        return self.weights.values.shape[0]


def collapse_matrix(T: int, width: int) -> np.ndarray:
    """Linear map taking a width-``width`` kernel to its effective length-T weights.

    A valid correlation along time followed by the mean over the ``T - width + 1``
    positions equals a dot product with ``collapse_matrix(T, width) @ kernel``.
    """
    if width > T:
        raise ShapeMismatch(f"kernel width {width} exceeds sequence length {T}")
    positions = T - width + 1
    M = np.zeros((T, width))
    for p in range(positions):
        for j in range(width):
            M[p + j, j] += 1.0
    return M / positions


def effective_weights(kernel: DeltaKernel, T: int) -> np.ndarray:
    w = kernel.weights.values
    if kernel.mode == FULL_VECTOR:
        if w.shape[0] != T:
            raise ShapeMismatch(f"full_vector kernel has length {w.shape[0]}, sequence has T={T}")
        return w
    return collapse_matrix(T, w.shape[0]) @ w


def apply_weights(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``sum_t w[t] * X[:, t]``, adding mirrored steps first.

    Pairing t with T-1-t makes an exactly anti-symmetric ``w`` cancel exactly
    on a constant sequence, which a plain reduction does not guarantee.
    """
    T = X.shape[1]
    out = np.zeros((X.shape[0], X.shape[2]))
    for t in range(T // 2):
        out += w[t] * X[:, t] + w[T - 1 - t] * X[:, T - 1 - t]
    if T % 2:
        out += w[T // 2] * X[:, T // 2]
    return out


def temporal_difference(X: np.ndarray, kernel: DeltaKernel) -> np.ndarray:
    """Collapse the time axis of ``X`` (B, T, C) with the differencing kernel."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ShapeMismatch(f"expected (B, T, C) input, got shape {X.shape}")
    return apply_weights(X, effective_weights(kernel, X.shape[1]))


@dataclass
class LstmCellParams:
    W: dict[str, Param]
    U: dict[str, Param]
    b: dict[str, Param]

    @property
    def input_dim(self) -> int:
        return self.W["i"].values.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W["i"].values.shape[0]

    def parameters(self) -> list[Param]:
        return [*self.W.values(), *self.U.values(), *self.b.values()]


def _gate_preactivations(D, lstm: LstmCellParams):
    # U_* never contribute: the hidden state entering the single step is zero.
    return {g: D @ lstm.W[g].values.T + lstm.b[g].values for g in GATES}


def _lstm_forward(D, lstm: LstmCellParams):
    a = _gate_preactivations(D, lstm)
    i, f, o = sigmoid(a["i"]), sigmoid(a["f"]), sigmoid(a["o"])
    g = np.tanh(a["g"])
    c = f * 0.0 + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, (i, f, g, o, tc)


def lstm_single_step(D: np.ndarray, lstm: LstmCellParams) -> np.ndarray:
    """One LSTM step from zero hidden and cell state; returns the hidden output."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[1] != lstm.input_dim:
        raise ShapeMismatch(f"LSTM expects (B, {lstm.input_dim}) input, got {D.shape}")
    return _lstm_forward(D, lstm)[0]


@dataclass
class DsdParams:
    kernel: DeltaKernel
    lstm: LstmCellParams
    proj_W: Param | None = None
    proj_b: Param | None = None
    l2_normalize: bool = True
    seq_len: int | None = None  # window length the model expects; None accepts any

    def __post_init__(self):
        if (self.proj_W is None) != (self.proj_b is None):
            raise ShapeMismatch("projection weight and bias must be given together")
        if self.proj_W is None and self.input_dim != self.output_dim:
            raise ShapeMismatch(
                f"C={self.input_dim} != d={self.output_dim} requires a residual projection"
            )

    @property
    def input_dim(self) -> int:
        return self.lstm.input_dim

    @property
    def output_dim(self) -> int:
        return self.lstm.hidden_dim

    @property
    def has_projection(self) -> bool:
        return self.proj_W is not None

    def parameters(self) -> list[Param]:
        params = [self.kernel.weights, *self.lstm.parameters()]
        if self.proj_W is not None:
            params += [self.proj_W, self.proj_b]
        return params

    def trainable(self) -> list[Param]:
        return [p for p in self.parameters() if p.trainable]

    def named(self) -> Iterator[tuple[str, Param]]:
        for p in self.parameters():
            yield p.name, p

    def copy(self) -> "DsdParams":
        return DsdParams(
            kernel=DeltaKernel(self.kernel.mode, self.kernel.weights.copy()),
            lstm=LstmCellParams(
                W={k: v.copy() for k, v in self.lstm.W.items()},
                U={k: v.copy() for k, v in self.lstm.U.items()},
                b={k: v.copy() for k, v in self.lstm.b.items()},
            ),
            proj_W=self.proj_W.copy() if self.proj_W is not None else None,
            proj_b=self.proj_b.copy() if self.proj_b is not None else None,
            l2_normalize=self.l2_normalize,
            seq_len=self.seq_len,
        )


def init_dsd_params(
    input_dim: int,
    seq_len: int,
    hidden_dim: int | None = None,
    kernel_mode: str = CONV_COLLAPSE,
    kernel_width: int = 3,
    kernel_learnable: bool = True,
    force_projection: bool = False,
    l2_normalize: bool = True,
    seed: int = 0,
) -> DsdParams:
    """Seeded initialization; uniform(-1/sqrt(d), 1/sqrt(d)) for LSTM and projection."""
    C = input_dim
    d = hidden_dim or C
    if seq_len < 1 or C < 1 or d < 1:
        raise ValueError("seq_len, input_dim and hidden_dim must be >= 1")
    if seq_len == 1:
        # single-frame model: differencing degenerates to identity
        kernel_mode, kernel_width = FULL_VECTOR, 1
    elif kernel_mode == FULL_VECTOR:
        kernel_width = seq_len
    elif kernel_width > seq_len:
        raise ShapeMismatch(f"kernel width {kernel_width} exceeds seq_len {seq_len}")

    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)

    def uniform(shape):
        return rng.uniform(-bound, bound, size=shape)

    kernel = DeltaKernel(
        kernel_mode, Param("kernel.w", antisymmetric_init(kernel_width), trainable=kernel_learnable)
    )
    lstm = LstmCellParams(
        W={g: Param(f"lstm.W_{g}", uniform((d, C))) for g in GATES},
        U={g: Param(f"lstm.U_{g}", uniform((d, d))) for g in GATES},
        b={g: Param(f"lstm.b_{g}", uniform(d)) for g in GATES},
    )
    proj_W = proj_b = None
    if force_projection or C != d:
        proj_W = Param("proj.W", uniform((d, C)))
        proj_b = Param("proj.b", uniform(d))
    return DsdParams(kernel, lstm, proj_W, proj_b, l2_normalize, seq_len)


def residual_path(D: np.ndarray, params: DsdParams) -> np.ndarray:
    if params.proj_W is None:
        if D.shape[1] != params.output_dim:
            raise ShapeMismatch(f"identity residual needs C == d, got {D.shape[1]} vs {params.output_dim}")
        return D
    return D @ params.proj_W.values.T + params.proj_b.values


def baseline_aggregate(X: np.ndarray, mode: str) -> np.ndarray:
    """Classical sequence aggregators: last frame, temporal mean, endpoint delta."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ShapeMismatch(f"expected (B, T, C) input, got shape {X.shape}")
    T = X.shape[1]
    if mode == "single":
        return X[:, -1, :].copy()
    if T < 2:
        raise ShapeMismatch(f"{mode} aggregation needs T >= 2")
    if mode == "smoothing":
        return X.mean(axis=1)
    if mode == "delta":
        return X[:, -1, :] - X[:, 0, :]
    raise ValueError(f"unknown aggregation mode {mode!r}")


class DsdEncoder:
    """Forward/backward wrapper around :class:`DsdParams`.

    :meth:`encode` is side-effect free and may be called concurrently on frozen
    parameters. :meth:`forward` caches intermediates for a following
    :meth:`backward` and must not be shared between threads.
    """

    def __init__(self, params: DsdParams):
        self.params = params
        self._cache = None

    def _run(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != self.params.input_dim:
            raise ShapeMismatch(f"expected (B, T, {self.params.input_dim}) input, got {X.shape}")
        w_eff = effective_weights(self.params.kernel, X.shape[1])
        D = apply_weights(X, w_eff)
        Z, gates = _lstm_forward(D, self.params.lstm)
        F_raw = Z + residual_path(D, self.params)
        if self.params.l2_normalize:
            norm = np.linalg.norm(F_raw, axis=1, keepdims=True)
            F = F_raw / np.maximum(norm, 1e-12)
        else:
            norm = None
            F = F_raw
        return F, (X, D, gates, F, norm)

    def encode(self, X) -> np.ndarray:
        return self._run(X)[0]

    __call__ = encode

    def forward(self, X) -> np.ndarray:
        F, self._cache = self._run(X)
        return F

    def backward(self, dF, need_input_grad: bool = False):
        """Accumulate parameter gradients for upstream ``dF``; optionally return dL/dX."""
        if self._cache is None:
            raise NoCachedForward("backward called before forward")
        X, D, (i, f, g, o, tc), F, norm = self._cache
        p = self.params
        dF = np.asarray(dF, dtype=np.float64)
        if dF.shape != F.shape:
            raise ShapeMismatch(f"upstream grad shape {dF.shape} != output shape {F.shape}")

        if p.l2_normalize:
            dF_raw = (dF - F * np.sum(F * dF, axis=1, keepdims=True)) / np.maximum(norm, 1e-12)
        else:
            dF_raw = dF

        # residual branch
        if p.proj_W is not None:
            p.proj_W.accumulate(dF_raw.T @ D)
            p.proj_b.accumulate(dF_raw.sum(axis=0))
            dD = dF_raw @ p.proj_W.values
        else:
            dD = dF_raw.copy()

        # LSTM branch; the forget gate multiplies a zero cell so its grads vanish
        dc = dF_raw * o * (1.0 - tc * tc)
        da = {
            "i": dc * g * i * (1.0 - i),
            "f": np.zeros_like(f),
            "g": dc * i * (1.0 - g * g),
            "o": dF_raw * tc * o * (1.0 - o),
        }
        for gate in GATES:
            p.lstm.W[gate].accumulate(da[gate].T @ D)
            p.lstm.b[gate].accumulate(da[gate].sum(axis=0))
            dD += da[gate] @ p.lstm.W[gate].values
        # U_* sees a zero hidden state: gradient is h0^T da = 0

        # differencing
        T = X.shape[1]
        dw_eff = np.einsum("btc,bc->t", X, dD)
        if p.kernel.learnable:
            if p.kernel.mode == FULL_VECTOR:
                p.kernel.weights.accumulate(dw_eff)
            else:
                p.kernel.weights.accumulate(collapse_matrix(T, p.kernel.width).T @ dw_eff)
        if need_input_grad:
            w_eff = effective_weights(p.kernel, T)
            return np.einsum("t,bc->btc", w_eff, dD)
        return None


def dsd_forward(X, params: DsdParams) -> np.ndarray:
    return DsdEncoder(params).encode(X)
