"""Decayed drift statistics of the linear weights and the mask updates built on them.

For each feature we keep an exponentially decayed mean ``u`` of its weight
and a decayed Welford-style variance ``v`` about that mean, both touched only
on steps where the feature is active. Weights of features whose relation to
the target keeps shifting wander, so their ``v`` stays high.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class WeightStats:
    u: np.ndarray
    v: np.ndarray
    alpha: float = 0.999
    beta: float = 0.9999

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape:
            raise ValueError("u and v must have the same shape")
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise ValueError("decays must lie in (0, 1)")

    @classmethod
    def zeros(cls, n, alpha=0.999, beta=0.9999):
        return cls(np.zeros(n), np.zeros(n), alpha, beta)

    def copy(self):
        return WeightStats(self.u.copy(), self.v.copy(), self.alpha, self.beta)


def update_stats(s, w, f):
    """One step of the decayed mean/variance recursion; returns new stats.

    The variance term multiplies the deviation from the updated mean by the
    deviation from the previous mean, as in Welford's method.
    """
    w = np.asarray(w, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if w.shape != s.u.shape or f.shape != s.u.shape:
        raise ValueError("dimension mismatch")
    a, b = s.alpha, s.beta
    u_new = a * s.u + (1 - a) * w * f + (1 - a) * (1 - f) * s.u
    v_new = b * s.v + (1 - b) * (w - u_new) * (w - s.u) * f + (1 - b) * (1 - f) * s.v
    # inactive features are carried over bit-exactly rather than through a*x + (1-a)*x
    u_new = np.where(f != 0, u_new, s.u)
    v_new = np.where(f != 0, v_new, s.v)
    return WeightStats(u_new, v_new, a, b)


def mask_update_normalized(g, v):
    """``g - (v - mean(v)) / ||v||^2``; a no-op when ``v`` is all zero."""
    g = np.asarray(g, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    sq = float(v @ v)
    if sq == 0.0:
        log.info("skipping mask update: variance vector is all zero")
        return g.copy()
    return g - (v - v.mean()) / sq


def mask_update_scaled(g, v, p):
    if p <= 0:
        raise ValueError("mask learning rate must be positive")
    return np.asarray(g, dtype=np.float64) - p * np.asarray(v, dtype=np.float64)


def normalize_v(v):
    v = np.asarray(v, dtype=np.float64)
    total = v.sum()
    if not total > 0:
        raise ValueError(f"cannot normalize: sum of v is {total}")
    return v / total


@dataclass
class MaskSchedule:
    """When and how gates move.

    ``rule`` is ``"normalized"`` (every ``every`` steps after ``warmup``),
    ``"scaled"`` (every step after ``warmup``, step ``mask_lr``), or
    ``"none"``.
    """

    rule: str = "normalized"
    warmup: int = 500_000
    every: int = 50_000
    mask_lr: float = 1e-4

    def __post_init__(self):
        if self.rule not in ("normalized", "scaled", "none"):
            raise ValueError(f"unknown mask rule {self.rule!r}")
        if self.every < 1:
            raise ValueError("every must be >= 1")
        if self.rule == "scaled" and self.mask_lr <= 0:
            raise ValueError("mask learning rate must be positive")


# short normalized-rule schedule and a longer one using the scaled rule
SCHEDULES = {
    "main": dict(train_steps=1_000_000, schedule=MaskSchedule("normalized", 500_000, 50_000)),
    "paper-appendix": dict(train_steps=5_000_000, schedule=MaskSchedule("scaled", 3_000_000, 1)),
}


class StatsLog:
    """Accumulates ``(step, i, u_i, v_i, sigmoid(g_i))`` rows for plotting."""

    def __init__(self):
        self.rows = []

    def record(self, step, stats, gates):
        for i in range(len(stats.u)):
            self.rows.append((step, i, float(stats.u[i]), float(stats.v[i]), float(gates[i])))

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "i", "u", "v", "gate"])
            for row in self.rows:
                writer.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])])
