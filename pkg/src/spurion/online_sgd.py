"""Gated linear logistic predictor trained one sample at a time.

The prediction is ``sigmoid(sum_i w_i * gate(g_i) * x_i)`` with no bias term:
every observation of the benchmark has exactly two active features, so a bias
would be absorbed by them. ``gate`` is the logistic function for the
spurious-feature mask, or the identity when the ``g`` are themselves the
trained linear weights (IRM-style with ``w`` pinned to one).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K

PROB_CLAMP = K.PROB_CLAMP


class NonFiniteError(FloatingPointError):
    """Training produced NaN or infinity."""


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


@dataclass
class LearnerConfig:
    lr: float = 1e-3
    l1: float = 0.0
    l2: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gate_mode: str = "fixed"
    optimizer: str = "adam"
    l1_decoupled: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError("regularization strengths must be non-negative")
        if self.gate_mode not in ("fixed", "learned"):
            raise ValueError(f"unknown gate_mode {self.gate_mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class GatedLinearPredictor:
    w: np.ndarray
    g: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    t: int = 0
    gate: str = "sigmoid"
    train_w: bool = True
    g_adam_m: np.ndarray = None
    g_adam_v: np.ndarray = None

    def __post_init__(self):
        n = len(self.w)
        self.w = np.asarray(self.w, dtype=np.float64)
        self.g = np.asarray(self.g, dtype=np.float64)
        if self.g_adam_m is None:
            self.g_adam_m = np.zeros(n)
        if self.g_adam_v is None:
            self.g_adam_v = np.zeros(n)
        for name in ("g", "adam_m", "adam_v", "g_adam_m", "g_adam_v"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        if self.gate not in ("sigmoid", "linear"):
            raise ValueError(f"unknown gate {self.gate!r}")

    @classmethod
    def zeros(cls, n, g_init=0.0, gate="sigmoid"):
        return cls(w=np.zeros(n), g=np.full(n, float(g_init)),
                   adam_m=np.zeros(n), adam_v=np.zeros(n), gate=gate)

    @classmethod
    def irm_style(cls, n, g_init=1.0):
        """``w`` pinned to one; the linear ``g`` carry the learned weights."""
        return cls(w=np.ones(n), g=np.full(n, float(g_init)), adam_m=np.zeros(n),
                   adam_v=np.zeros(n), gate="linear", train_w=False)

    @property
    def n(self):
        return len(self.w)

    def gates(self):
        return sigmoid(self.g) if self.gate == "sigmoid" else self.g.copy()

    def effective_weights(self):
        return self.w * self.gates()

    def logits(self, X):
        return np.asarray(X, dtype=np.float64) @ self.effective_weights()

    def predict_proba(self, X):
        return sigmoid(self.logits(X))

    __call__ = predict_proba

    def copy(self):
        return GatedLinearPredictor(self.w.copy(), self.g.copy(), self.adam_m.copy(),
                                    self.adam_v.copy(), self.t, self.gate, self.train_w,
                                    self.g_adam_m.copy(), self.g_adam_v.copy())

    def check_finite(self):
        for name in ("w", "g", "adam_m", "adam_v"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteError(f"non-finite values in {name}")


def predict(p, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.n,):
        raise ValueError(f"expected a {p.n}-vector, got shape {x.shape}")
    return float(sigmoid(x @ p.effective_weights()))


def logistic_loss(p, y):
    p = min(max(float(p), PROB_CLAMP), 1.0 - PROB_CLAMP)
    return -(y * np.log(p) + (1 - y) * np.log(1.0 - p))


def loss_gradients(p, x, y):
    """Analytic d(loss)/dw and d(loss)/dg for one sample."""
    x = np.asarray(x, dtype=np.float64)
    gates = p.gates()
    r = predict(p, x) - y
    dgate = gates * (1.0 - gates) if p.gate == "sigmoid" else np.ones(p.n)
    return r * gates * x, r * p.w * dgate * x


def _regularized(theta, grad, cfg):
    grad = grad + cfg.l2 * theta
    if not cfg.l1_decoupled:
        grad = grad + cfg.l1 * np.sign(theta)
    return grad


def _apply_update(theta, grad, m, v, t, cfg):
    if cfg.optimizer == "sgd":
        return theta - cfg.lr * grad, m, v
    m = cfg.beta1 * m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v / (1 - cfg.beta2 ** t)
    return theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps), m, v


def _shrink(theta, amount):
    return np.sign(theta) * np.maximum(np.abs(theta) - amount, 0.0)


def sgd_step(p, x, y, cfg):
    """One regularized optimizer step on a single sample; returns a new predictor."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.n,):
        raise ValueError(f"expected a {p.n}-vector, got shape {x.shape}")
    gw, gg = loss_gradients(p, x, y)
    if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gg))):
        raise NonFiniteError("non-finite gradient")
    q = p.copy()
    q.t += 1
    if q.train_w:
        grad = _regularized(q.w, gw, cfg)
        q.w, q.adam_m, q.adam_v = _apply_update(q.w, grad, q.adam_m, q.adam_v, q.t, cfg)
        if cfg.l1_decoupled:
            q.w = _shrink(q.w, cfg.lr * cfg.l1)
    if cfg.gate_mode == "learned":
        grad = _regularized(q.g, gg, cfg)
        q.g, q.g_adam_m, q.g_adam_v = _apply_update(q.g, grad, q.g_adam_m, q.g_adam_v, q.t, cfg)
        if cfg.l1_decoupled:
            q.g = _shrink(q.g, cfg.lr * cfg.l1)
    q.check_finite()
    return q


@dataclass
class RunningLoss:
    """Exponentially decayed mean of the per-step loss (bias corrected)."""

    decay: float = 0.999
    raw: np.ndarray = field(default_factory=lambda: np.zeros(1))
    count: int = 0

    @property
    def value(self):
        if self.count == 0:
            return float("nan")
        return float(self.raw[0] / (1.0 - self.decay ** self.count))


def train_online(p, X, y, cfg, stats=None, schedule=None, irm_weight=0.0, irm_warmup=0,
                 replay=None, rng=None, running_loss=None):
    """Stream ``(X[t], y[t])`` through the compiled per-sample loop, in place.

    ``stats`` (a :class:`~spurion.weight_stats.WeightStats`) is updated after
    every step when given; ``schedule`` (a
    :class:`~spurion.weight_stats.MaskSchedule`) drives the gate updates.
    With ``replay`` each incoming sample is pushed into the buffer and the
    step trains on a uniform draw from it instead.
    """
    X = np.ascontiguousarray(X, dtype=np.uint8)
    y = np.ascontiguousarray(y, dtype=np.uint8)
    if X.ndim != 2 or X.shape[1] != p.n:
        raise ValueError(f"expected (T, {p.n}) features, got {X.shape}")
    if len(y) != len(X):
        raise ValueError("X and y lengths differ")
    n = p.n
    running_loss = running_loss if running_loss is not None else RunningLoss()
    params = np.zeros(K.N_PARAMS)
    params[K.P_LR] = cfg.lr
    params[K.P_L1] = cfg.l1
    params[K.P_L2] = cfg.l2
    params[K.P_B1] = cfg.beta1
    params[K.P_B2] = cfg.beta2
    params[K.P_EPS] = cfg.eps
    params[K.P_IRM] = irm_weight
    params[K.P_LOSS_DECAY] = running_loss.decay
    flags = np.zeros(K.N_FLAGS, dtype=np.int64)
    flags[K.F_GATE] = K.GATE_SIGMOID if p.gate == "sigmoid" else K.GATE_LINEAR
    flags[K.F_OPT] = K.OPT_ADAM if cfg.optimizer == "adam" else K.OPT_SGD
    flags[K.F_L1_DECOUPLED] = int(cfg.l1_decoupled)
    flags[K.F_TRAIN_W] = int(p.train_w)
    flags[K.F_TRAIN_G] = int(cfg.gate_mode == "learned")
    flags[K.F_IRM_WARMUP] = irm_warmup
    flags[K.F_MASK_EVERY] = 1
    if stats is not None:
        if len(stats.u) != n:
            raise ValueError("stats dimension mismatch")
        flags[K.F_TRACK_STATS] = 1
        params[K.P_ALPHA] = stats.alpha
        params[K.P_BETA] = stats.beta
        u, var = stats.u, stats.v
    else:
        u, var = np.zeros(n), np.zeros(n)
    if schedule is not None and schedule.rule != "none":
        if stats is None:
            raise ValueError("mask updates need drift statistics")
        flags[K.F_MASK_RULE] = K.MASK_NORMALIZED if schedule.rule == "normalized" else K.MASK_SCALED
        flags[K.F_MASK_WARMUP] = schedule.warmup
        flags[K.F_MASK_EVERY] = schedule.every
        params[K.P_MASK_LR] = schedule.mask_lr
    counters = np.zeros(4, dtype=np.int64)
    counters[K.C_T] = p.t
    if replay is not None:
        if rng is None:
            raise ValueError("replay needs an rng")
        counters[K.C_BUF_CURSOR] = replay.cursor
        counters[K.C_BUF_SIZE] = replay.size
        buf_X, buf_y = replay.obs, replay.targets
        draws = rng.random(len(X))
    else:
        buf_X = np.zeros((0, n), dtype=np.uint8)
        buf_y = np.zeros(0, dtype=np.uint8)
        draws = np.zeros(0)

    K.train_stream(X, y, p.w, p.g, p.adam_m, p.adam_v, p.g_adam_m, p.g_adam_v, u, var,
                   running_loss.raw, counters, params, flags, buf_X, buf_y, draws)
    done = int(counters[K.C_T] - p.t)
    p.t = int(counters[K.C_T])
    running_loss.count += done
    if replay is not None:
        replay.cursor = int(counters[K.C_BUF_CURSOR])
        replay.size = int(counters[K.C_BUF_SIZE])
    if counters[K.C_STATUS]:
        raise NonFiniteError(f"non-finite value after {p.t} steps")
    return running_loss


def write_weight_snapshot(path, p, stats=None):
    """CSV with columns index,w,g,u,v."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "w", "g", "u", "v"])
        for i in range(p.n):
            u = stats.u[i] if stats is not None else 0.0
            v = stats.v[i] if stats is not None else 0.0
            writer.writerow([i, repr(float(p.w[i])), repr(float(p.g[i])),
                             repr(float(u)), repr(float(v))])
