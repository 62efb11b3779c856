"""Layers and losses shared by the two emulators.

Dense layers, ReLU, a learnable-frequency sinusoidal time embedding, a
single-head residual attention block, the pinball/interval objective,
and the five-term trajectory loss. All forward passes build autodiff
graphs; inference paths that need no gradients use the plain-numpy
helpers at the bottom.
"""

import json

import numpy as np

from .autodiff import (
    Tensor,
    _accumulate,
    _wrap,
    add,
    getitem,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    sub,
    tmean,
    transpose_last2,
    tsum,
)
from .errors import ConfigError, ShapeError

__all__ = [
    "DenseLayer",
    "TimeEmbedding",
    "AttentionBlock",
    "forward_dense",
    "time_embed",
    "attention_forward",
    "pinball",
    "quantile_objective",
    "aeode_loss_terms",
    "aeode_loss",
    "LOSS_TERM_ORDER",
    "log_spaced_frequencies",
    "save_weights",
    "load_weights",
    "dense_forward_np",
    "mm_np",
]

WEIGHTS_SCHEMA_VERSION = 1


class DenseLayer:
    """Affine layer x @ W + b."""

    def __init__(self, W: np.ndarray, b: np.ndarray):
        W = np.asarray(W, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[1],):
            raise ShapeError("W must be (in, out) and b (out,)")
        self.W = Tensor(W)
        self.b = Tensor(b)

    @classmethod
    def he_init(cls, n_in: int, n_out: int, rng) -> "DenseLayer":
        return cls(rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out)), np.zeros(n_out))

    @classmethod
    def glorot_init(cls, n_in: int, n_out: int, rng) -> "DenseLayer":
        std = np.sqrt(2.0 / (n_in + n_out))
        return cls(rng.normal(0.0, std, (n_in, n_out)), np.zeros(n_out))

    def params(self):
        return [self.W, self.b]


def _mm(x, W) -> Tensor:
    """Matrix product that flattens leading batch axes into one GEMM."""
    x = _wrap(x)
    if x.data.ndim > 2:
        lead = x.data.shape[:-1]
        flat = reshape(x, (-1, x.data.shape[-1]))
        return reshape(matmul(flat, W), lead + (W.data.shape[-1],))
    return matmul(x, W)


def forward_dense(x, layer: DenseLayer) -> Tensor:
    return add(_mm(x, layer.W), layer.b)


def log_spaced_frequencies(n_steps: int, dt: float, L: int) -> np.ndarray:
    """Initial frequencies on a log grid from one cycle per double
    duration up to four cycles per step."""
    lo = 1.0 / (2.0 * n_steps * dt)
    hi = 4.0 / dt
    return np.geomspace(lo, hi, L)


class TimeEmbedding:
    """Learnable frequencies for the interleaved (sin, cos) feature map."""

    def __init__(self, omega: np.ndarray):
        omega = np.asarray(omega, dtype=np.float64)
        if omega.ndim != 1 or omega.size < 1:
            raise ShapeError("omega must be a nonempty vector")
        self.omega = Tensor(omega)

    @property
    def L(self) -> int:
        return self.omega.data.size

    def params(self):
        return [self.omega]


def time_embed(t_grid: np.ndarray, emb: TimeEmbedding) -> Tensor:
    """(T+1, 2L) features: columns alternate sin(2 pi w_l t), cos(2 pi w_l t)."""
    t = np.asarray(t_grid, dtype=np.float64).ravel()
    if not np.all(np.isfinite(t)):
        raise ShapeError("time grid must be finite")
    omega = emb.omega
    phase = 2.0 * np.pi * t[:, None] * omega.data[None, :]
    s, c = np.sin(phase), np.cos(phase)
    data = np.empty((t.size, 2 * omega.data.size))
    data[:, 0::2] = s
    data[:, 1::2] = c
    out = Tensor(data, (omega,))

    def back(g):
        gs = g[:, 0::2]
        gc = g[:, 1::2]
        g_omega = (2.0 * np.pi * t[:, None] * (c * gs - s * gc)).sum(axis=0)
        _accumulate(omega, g_omega)

    out._backward = back
    return out


class AttentionBlock:
    """Single-head attention projections, all d x d."""

    def __init__(self, W_Q: np.ndarray, W_K: np.ndarray, W_V: np.ndarray):
        mats = [np.asarray(m, dtype=np.float64) for m in (W_Q, W_K, W_V)]
        d = mats[0].shape[0]
        for m in mats:
            if m.shape != (d, d):
                raise ShapeError("attention projections must share a square shape")
        self.W_Q, self.W_K, self.W_V = (Tensor(m) for m in mats)

    @classmethod
    def init(cls, d: int, rng) -> "AttentionBlock":
        std = 1.0 / np.sqrt(d)
        return cls(*(rng.normal(0.0, std, (d, d)) for _ in range(3)))

    @property
    def d(self) -> int:
        return self.W_Q.data.shape[0]

    def params(self):
        return [self.W_Q, self.W_K, self.W_V]


def attention_forward(Z, blk: AttentionBlock) -> Tensor:
    """Residual single-head attention: Z + softmax(Q K^T / sqrt(d)) V.

    Z is (T+1, d) or batched (B, T+1, d); softmax rows are stabilized by
    max subtraction.
    """
    Z = _wrap(Z)
    d = blk.d
    if Z.data.shape[-1] != d:
        raise ShapeError(f"Z width {Z.data.shape[-1]} does not match block d={d}")
    q = _mm(Z, blk.W_Q)
    k = _mm(Z, blk.W_K)
    v = _mm(Z, blk.W_V)
    logits = mul(matmul(q, transpose_last2(k)), 1.0 / np.sqrt(d))
    return add(Z, matmul(softmax(logits), v))


def pinball(q, y, tau: float) -> Tensor:
    """Quantile loss tau*(y-q)+ + (1-tau)*(q-y)+, elementwise, >= 0.

    Realized through ReLU so the subgradient at y == q is exactly zero.
    """
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    q = _wrap(q)
    y = _wrap(y)
    return add(mul(relu(sub(y, q)), tau), mul(relu(sub(q, y)), 1.0 - tau))


def quantile_objective(preds, ys, lam: float, taus=(0.05, 0.95)) -> Tensor:
    """Summed pinball losses for both heads plus the non-crossing hinge.

    preds: (n, 2) with column 0 the lower head, column 1 the upper head.
    """
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    preds = _wrap(preds)
    if preds.data.ndim != 2 or preds.data.shape[1] != 2:
        raise ShapeError("preds must be (n, 2)")
    ys = _wrap(ys)
    q_lo = getitem(preds, (slice(None), 0))
    q_hi = getitem(preds, (slice(None), 1))
    loss = add(tsum(pinball(q_lo, ys, taus[0])), tsum(pinball(q_hi, ys, taus[1])))
    return add(loss, mul(tsum(relu(sub(q_lo, q_hi))), lam))


def _sq(e: Tensor) -> Tensor:
    return mul(e, e)


LOSS_TERM_ORDER = ("recon", "d1", "d2", "idn", "mass")


def aeode_loss_terms(pred, truth, x0, recon_of_x0, dt: float = 1.0,
                     terms=LOSS_TERM_ORDER) -> dict:
    """Individual loss components for the trajectory emulator.

    recon: mean squared trajectory error;
    d1/d2: mean squared mismatch of first (forward) and second (central)
      grid differences, scaled by 1/dt and 1/dt^2;
    idn: mean squared error of the initial-state reconstruction;
    mass: mean squared mismatch of per-time species totals.

    Only the requested terms are built; d1 needs >= 2 grid rows and d2
    needs >= 3.
    """
    pred = _wrap(pred)
    truth = _wrap(truth)
    x0 = _wrap(x0)
    recon_of_x0 = _wrap(recon_of_x0)
    if pred.data.shape != truth.data.shape:
        raise ShapeError("pred and truth must match")
    if x0.data.shape != recon_of_x0.data.shape:
        raise ShapeError("x0 and its reconstruction must match")
    rows = pred.data.shape[-2]
    if "d1" in terms and rows < 2:
        raise ShapeError("first-difference loss needs >= 2 grid rows")
    if "d2" in terms and rows < 3:
        raise ShapeError("second-difference loss needs >= 3 grid rows")

    interior = (Ellipsis, slice(1, None), slice(None))
    leading = (Ellipsis, slice(None, -1), slice(None))
    middle = (Ellipsis, slice(1, -1), slice(None))
    head = (Ellipsis, slice(None, -2), slice(None))
    tail = (Ellipsis, slice(2, None), slice(None))

    def d1(x):
        return mul(sub(getitem(x, interior), getitem(x, leading)), 1.0 / dt)

    def d2(x):
        upd = sub(add(getitem(x, tail), getitem(x, head)), mul(getitem(x, middle), 2.0))
        return mul(upd, 1.0 / dt**2)

    builders = {
        "recon": lambda: tmean(_sq(sub(pred, truth))),
        "d1": lambda: tmean(_sq(sub(d1(pred), d1(truth)))),
        "d2": lambda: tmean(_sq(sub(d2(pred), d2(truth)))),
        "idn": lambda: tmean(_sq(sub(x0, recon_of_x0))),
        "mass": lambda: tmean(_sq(sub(tsum(pred, axis=-1), tsum(truth, axis=-1)))),
    }
    return {name: builders[name]() for name in terms}


def aeode_loss(pred, truth, x0, recon_of_x0, alphas, dt: float = 1.0) -> Tensor:
    """Weighted five-term objective; zero-weight terms are skipped."""
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.shape != (5,):
        raise ShapeError("alphas must be a 5-vector")
    if np.any(alphas < 0):
        raise ConfigError("alphas must be nonnegative")
    needed = tuple(n for a, n in zip(alphas, LOSS_TERM_ORDER) if a > 0.0)
    terms = aeode_loss_terms(pred, truth, x0, recon_of_x0, dt=dt, terms=needed)
    total = None
    for alpha, name in zip(alphas, LOSS_TERM_ORDER):
        if alpha == 0.0:
            continue
        piece = mul(terms[name], float(alpha))
        total = piece if total is None else add(total, piece)
    return Tensor(0.0) if total is None else total


# ---------------------------------------------------------------------------
# weight persistence (JSON, full f64 precision via repr round-trip)


def save_weights(path, architecture: dict, params: dict, extra: dict | None = None) -> None:
    payload = {
        "schema_version": WEIGHTS_SCHEMA_VERSION,
        "architecture": architecture,
        "params": {
            name: {"shape": list(arr.shape), "data": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in params.items()
        },
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_weights(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("schema_version") != WEIGHTS_SCHEMA_VERSION:
        raise ConfigError(f"unsupported weights schema: {payload.get('schema_version')}")
    payload["params"] = {
        name: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in payload["params"].items()
    }
    return payload


# ---------------------------------------------------------------------------
# gradient-free forward helpers for hot inference paths


def mm_np(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Numpy twin of _mm: identical flattening, identical arithmetic."""
    if x.ndim > 2:
        lead = x.shape[:-1]
        return np.matmul(x.reshape(-1, x.shape[-1]), W).reshape(lead + (W.shape[-1],))
    return np.matmul(x, W)


def dense_forward_np(x: np.ndarray, W: np.ndarray, b: np.ndarray, activation=None) -> np.ndarray:
    h = mm_np(x, W) + b
    if activation == "relu":
        np.maximum(h, 0.0, out=h)
    return h
