"""IRM-family baselines and the experience replay buffer.

The IRM penalty for a batch is the squared derivative, at ``s = 1``, of the
mean logistic risk when every logit is multiplied by a scalar ``s``. Since
``d/ds loss(sigmoid(s*z), y) = (sigmoid(s*z) - y) * z``, the derivative at
``s = 1`` is ``mean((sigmoid(z) - y) * z)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .online_sgd import (GatedLinearPredictor, LearnerConfig, NonFiniteError, _apply_update,
                         _regularized, _shrink, sigmoid, train_online)

log = logging.getLogger(__name__)


class ReplayBuffer:
    """Fixed-capacity ring of ``(observation, target)`` pairs."""

    def __init__(self, capacity, n_features):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, n_features), dtype=np.uint8)
        self.targets = np.zeros(self.capacity, dtype=np.uint8)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, obs, target):
        self.obs[self.cursor] = obs
        self.targets[self.cursor] = target
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def items(self):
        """Stored pairs, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        order = (start + np.arange(self.size)) % self.capacity
        return [(self.obs[i].copy(), int(self.targets[i])) for i in order]

    def sample(self, k, rng):
        """``k`` uniform draws with replacement."""
        if k == 0:
            return []
        if self.size == 0:
            raise IndexError("cannot sample from an empty replay buffer")
        idx = rng.integers(self.size, size=k)
        return [(self.obs[i].copy(), int(self.targets[i])) for i in idx]


def replay_push(buf, item):
    buf.push(*item)
    return buf


def replay_sample(buf, k, rng):
    return buf.sample(k, rng)


def irm_penalty(logits, targets):
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("IRM penalty needs a non-empty batch")
    d = np.mean((sigmoid(logits) - targets) * logits)
    return float(d * d)


def irm_penalty_grad(logits, targets):
    """Gradient of :func:`irm_penalty` with respect to each logit."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    p = sigmoid(z)
    d = np.mean((p - y) * z)
    return 2.0 * d * (p * (1 - p) * z + (p - y)) / len(z)


@dataclass
class IrmConfig:
    penalty_weight: float = 1e4
    warmup: int = 2_000
    batch: int = 1024
    lr: float = 1e-3
    l1: float = 1e-3
    iterations: int = 10_000
    optimizer: str = "adam"
    rescale: bool = True

    def __post_init__(self):
        if self.penalty_weight < 0:
            raise ValueError("penalty weight must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def _cell_design():
    """Feature vectors and targets for the 40 ``(class, green, y)`` cells."""
    X = np.zeros((10, 2, 2, 12))
    Y = np.zeros((10, 2, 2))
    for c in range(10):
        for g in range(2):
            for y in range(2):
                X[c, g, y, c] = 1.0
                X[c, g, y, 10 if g else 11] = 1.0
                Y[c, g, y] = y
    return X.reshape(40, 12), Y.reshape(40)


CELL_X, CELL_Y = _cell_design()


def _weighted_grads(counts, weights):
    """Mean logistic-loss gradient and IRM-penalty gradient of a summarized batch."""
    n_k = counts.reshape(-1).astype(np.float64)
    n = n_k.sum()
    z = CELL_X @ weights
    p = sigmoid(z)
    bce = (n_k * (p - CELL_Y)) @ CELL_X / n
    d = np.sum(n_k * (p - CELL_Y) * z) / n
    pen = 2.0 * d * ((n_k * (p * (1 - p) * z + (p - CELL_Y))) @ CELL_X) / n
    return bce, pen


def oracle_irm_train(env, cfg, latent_values=None, rng=None, callback=None):
    """Learn linear feature weights with the IRM penalty over latent-conditioned batches.

    The classifier weights stay at one and the linear ``g`` are trained, as
    in the usual IRM construction. Each iteration draws one batch per latent
    value (oracle access) and one batch from the seen mixture. On the
    feature benchmark an observation is one of 40 ``(class, color, target)``
    cells, so batches are drawn as multinomial cell counts, which has the
    same law as drawing the samples and is much cheaper.
    """
    if not hasattr(env, "sample_counts"):
        raise TypeError("oracle IRM needs an environment with latent-conditioned sampling")
    if env.config.mode != "features":
        raise ValueError("oracle IRM runs on the feature benchmark")
    rng = rng if rng is not None else np.random.default_rng(env.config.seed)
    latent_values = tuple(latent_values or env.config.latent_set)
    n = env.n_features
    p = GatedLinearPredictor.irm_style(n, g_init=1.0)
    m = np.zeros(n)
    v = np.zeros(n)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for it in range(1, cfg.iterations + 1):
        env_counts = [env.sample_counts(lat, cfg.batch, rng) for lat in latent_values]
        pooled = env.sample_counts(env.config.latent_set, cfg.batch, rng)
        grad = _weighted_grads(pooled, p.g)[0] + cfg.l1 * np.sign(p.g)
        if it > cfg.warmup and cfg.penalty_weight > 0:
            for counts in env_counts:
                grad = grad + cfg.penalty_weight * _weighted_grads(counts, p.g)[1]
            if cfg.rescale and cfg.penalty_weight > 1:
                grad = grad / cfg.penalty_weight
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite IRM gradient at iteration {it}")
        if cfg.optimizer == "adam":
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            p.g = p.g - cfg.lr * (m / (1 - b1 ** it)) / (np.sqrt(v / (1 - b2 ** it)) + eps)
        else:
            p.g = p.g - cfg.lr * grad
        p.t = it
        if not np.all(np.isfinite(p.g)):
            raise NonFiniteError(f"non-finite IRM weights at iteration {it}")
        if callback is not None:
            callback(it, p)
    return p


def irm_objective(p, X, y, penalty_weight, penalty_active=True):
    """Single-sample (or batch) loss the online IRM learner descends."""
    z = np.atleast_1d(p.logits(np.atleast_2d(X)))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    probs = np.clip(sigmoid(z), 1e-7, 1 - 1e-7)
    bce = -np.mean(y * np.log(probs) + (1 - y) * np.log(1 - probs))
    pen = irm_penalty(z, y) if penalty_active else 0.0
    return float(bce + penalty_weight * pen)


def online_irm_step(p, sample, cfg, penalty_weight, penalty_active=True):
    """Reference single-sample step of online IRM; returns a new predictor."""
    x, y = sample
    x = np.asarray(x, dtype=np.float64)
    z = float(p.logits(x))
    prob = float(sigmoid(z))
    dz = prob - y
    if penalty_active:
        dz += penalty_weight * float(irm_penalty_grad(np.array([z]), np.array([y]))[0])
    q = p.copy()
    q.t += 1
    gates = q.gates()
    dgate = gates * (1 - gates) if q.gate == "sigmoid" else np.ones(q.n)
    if q.train_w:
        grad = _regularized(q.w, dz * gates * x, cfg)
        q.w, q.adam_m, q.adam_v = _apply_update(q.w, grad, q.adam_m, q.adam_v, q.t, cfg)
        if cfg.l1_decoupled:
            q.w = _shrink(q.w, cfg.lr * cfg.l1)
    if cfg.gate_mode == "learned":
        grad = _regularized(q.g, dz * p.w * dgate * x, cfg)
        q.g, q.g_adam_m, q.g_adam_v = _apply_update(q.g, grad, q.g_adam_m, q.g_adam_v, q.t, cfg)
        if cfg.l1_decoupled:
            q.g = _shrink(q.g, cfg.lr * cfg.l1)
    q.check_finite()
    return q


def online_irm_predictor(n):
    """Online IRM uses the IRM parameterization: unit ``w``, learned linear ``g``."""
    return GatedLinearPredictor.irm_style(n, g_init=0.0)


def online_irm_config(lr, l1=0.0, l2=0.0):
    return LearnerConfig(lr=lr, l1=l1, l2=l2, gate_mode="learned")


def train_online_irm(p, X, y, cfg, penalty_weight, warmup=0, replay=None, rng=None):
    return train_online(p, X, y, cfg, irm_weight=penalty_weight, irm_warmup=warmup,
                        replay=replay, rng=rng)
