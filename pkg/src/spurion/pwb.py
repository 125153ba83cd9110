"""Perturbations with backtracking: gradient-free search over a representation network.

The representation network (RLN) is a 3x3 convolution with binary weights
followed by a ternary fully connected map, both outputs binarized. A linear
predictor (PLN) is fit on top of the binary features. Each search iteration
perturbs a few RLN parameters, refits the PLN, and keeps the change only if
the targeted metric strictly improved: the summed weight drift ``v`` on
even iterations (conv layer) and the prediction loss on odd ones (fc layer).

The PLN can be fit online with the streaming learner, or offline from
latent-conditioned batches with ridge regression (the ``offline-star`` mode).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .colored_mdp import correctness
from .online_sgd import GatedLinearPredictor, LearnerConfig, RunningLoss, train_online
from .weight_stats import WeightStats

log = logging.getLogger(__name__)

CONV_SHAPE = (4, 2, 3, 3)
MAP_DIM = 4 * 14 * 14
CONV_VALUES = np.array([0, 1], dtype=np.int8)
FC_VALUES = np.array([0, 1, -1], dtype=np.int8)


@dataclass
class Rln:
    """Binary conv filters plus a ternary fully connected map.

    ``conv`` is ``None`` for the feature-mode network, where the fc map acts
    directly on the 12 binary inputs.
    """

    conv: np.ndarray | None
    fc: np.ndarray

    def __post_init__(self):
        self.fc = np.asarray(self.fc, dtype=np.int8)
        if self.conv is not None:
            self.conv = np.asarray(self.conv, dtype=np.int8)
            if self.conv.shape != CONV_SHAPE:
                raise ValueError(f"conv must have shape {CONV_SHAPE}, got {self.conv.shape}")
            if self.fc.shape[0] != MAP_DIM:
                raise ValueError(f"fc must have {MAP_DIM} rows after the conv layer")
            if not np.isin(self.conv, CONV_VALUES).all():
                raise ValueError("conv weights must be 0 or 1")
        if not np.isin(self.fc, FC_VALUES).all():
            raise ValueError("fc weights must be -1, 0 or 1")

    @classmethod
    def random(cls, rng, feature_dim=100, in_dim=None):
        """Conv weights uniform on {0,1}, fc weights uniform on {-1,0,1}.

        ``in_dim`` given means a feature-mode network without conv layer.
        """
        if in_dim is None:
            conv = rng.integers(0, 2, size=CONV_SHAPE).astype(np.int8)
            return cls(conv, rng.integers(-1, 2, size=(MAP_DIM, feature_dim)).astype(np.int8))
        return cls(None, rng.integers(-1, 2, size=(in_dim, feature_dim)).astype(np.int8))

    @property
    def feature_dim(self):
        return self.fc.shape[1]

    def layer(self, name):
        if name == "conv":
            if self.conv is None:
                raise ValueError("this network has no conv layer")
            return self.conv
        if name == "fc":
            return self.fc
        raise ValueError(f"unknown layer {name!r}")

    def copy(self):
        return Rln(None if self.conv is None else self.conv.copy(), self.fc.copy())

    def __eq__(self, other):
        if not isinstance(other, Rln):
            return NotImplemented
        same_conv = (self.conv is None and other.conv is None) or (
            self.conv is not None and other.conv is not None
            and np.array_equal(self.conv, other.conv))
        return same_conv and np.array_equal(self.fc, other.fc)


def conv_maps(conv, images):
    """Binarized conv responses, ``(N, 784)`` float32, filter-major order."""
    images = np.asarray(images, dtype=np.float32)
    if images.shape[1:] != (2, 16, 16):
        raise ValueError(f"expected images of shape (N, 2, 16, 16), got {images.shape}")
    patches = sliding_window_view(images, (3, 3), axis=(2, 3))     # N,2,14,14,3,3
    patches = patches.transpose(0, 2, 3, 1, 4, 5).reshape(len(images), 196, 18)
    kernels = conv.reshape(4, 18).T.astype(np.float32)            # 18,4
    out = patches @ kernels                                       # N,196,4
    return (out.transpose(0, 2, 1).reshape(len(images), MAP_DIM) > 0).astype(np.float32)


def fc_features(fc, inputs):
    return (np.asarray(inputs, dtype=np.float32) @ fc.astype(np.float32) > 0).astype(np.uint8)


def rln_features(rln, inputs):
    """Binary features for a batch of images (or feature vectors)."""
    if rln.conv is None:
        inputs = np.asarray(inputs)
        if inputs.ndim != 2 or inputs.shape[1] != rln.fc.shape[0]:
            raise ValueError(f"expected (N, {rln.fc.shape[0]}) inputs, got {inputs.shape}")
        return fc_features(rln.fc, inputs)
    return fc_features(rln.fc, conv_maps(rln.conv, inputs))


def rln_forward(rln, image):
    image = np.asarray(image)
    expected = (2, 16, 16) if rln.conv is not None else (rln.fc.shape[0],)
    if image.shape != expected:
        raise ValueError(f"expected input of shape {expected}, got {image.shape}")
    return rln_features(rln, image[None])[0]


@dataclass
class Perturbation:
    layer: str
    indices: np.ndarray
    old_values: np.ndarray
    new_values: np.ndarray

    def apply(self, rln):
        rln.layer(self.layer).reshape(-1)[self.indices] = self.new_values

    def revert(self, rln):
        rln.layer(self.layer).reshape(-1)[self.indices] = self.old_values


def n_perturbed(fraction, size):
    return max(1, int(round(fraction * size)))


def perturb(rln, layer, fraction, rng):
    """Set ``max(1, round(fraction * size))`` distinct parameters to fresh random values.

    Returns the perturbed copy and the record needed to undo it.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    values = CONV_VALUES if layer == "conv" else FC_VALUES
    size = rln.layer(layer).size
    idx = rng.choice(size, size=n_perturbed(fraction, size), replace=False)
    new = rln.copy()
    flat = new.layer(layer).reshape(-1)
    record = Perturbation(layer, idx, flat[idx].copy(), rng.choice(values, size=len(idx)))
    record.apply(new)
    return new, record


def ridge_fit(X, y, lam, fit_intercept=False):
    """Solve ``(X^T X + lam I) w = X^T y``; with an unpenalized intercept if asked.

    Returns ``w`` or ``(w, intercept)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if lam < 0:
        raise ValueError("ridge strength must be non-negative")
    if fit_intercept:
        x_mean, y_mean = X.mean(axis=0), y.mean()
        w = ridge_fit(X - x_mean, y - y_mean, lam)
        return w, float(y_mean - x_mean @ w)
    A = X.T @ X + lam * np.eye(X.shape[1])
    if lam == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
        raise np.linalg.LinAlgError("singular normal equations; use a positive ridge strength")
    return np.linalg.solve(A, X.T @ y)


@dataclass
class PwbConfig:
    iterations: int = 500
    fraction_range: tuple = (1e-5, 3e-3)
    ridge_lambda: float = 1e-2
    batch: int = 2048
    latent_pair: tuple = (0.76, 0.99)
    mode: str = "offline-star"
    acceptance: str = "targeted"
    feature_dim: int = 100
    online_steps: int = 200_000
    learner: LearnerConfig = field(default_factory=lambda: LearnerConfig(lr=1e-3))
    alpha: float = 0.999
    beta: float = 0.9999
    refresh_every: int = 1

    def __post_init__(self):
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be >= 1")
        lo, hi = self.fraction_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("fraction range must lie within (0, 1)")
        if self.mode not in ("online", "offline-star"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.acceptance not in ("targeted", "either"):
            raise ValueError(f"unknown acceptance rule {self.acceptance!r}")
        if self.mode == "offline-star" and self.ridge_lambda <= 0:
            raise ValueError("offline fitting needs a positive ridge strength")


@dataclass
class OfflineBatches:
    """Latent-conditioned inputs for one offline evaluation, shared by both candidates."""

    inputs_a: np.ndarray
    y_a: np.ndarray
    inputs_b: np.ndarray
    y_b: np.ndarray
    inputs_seen: np.ndarray
    y_seen: np.ndarray

    @classmethod
    def draw(cls, env, latent_pair, batch, rng):
        a = env.sample_batch(latent_pair[0], batch, rng)
        b = env.sample_batch(latent_pair[1], batch, rng)
        seen = env.sample_seen_batch(batch, rng)
        return cls(env.observations(a, rng), a.y, env.observations(b, rng), b.y,
                   env.observations(seen, rng), seen.y)


def _offline_metrics(rln, batches, lam):
    wa, _ = ridge_fit(rln_features(rln, batches.inputs_a), batches.y_a, lam, fit_intercept=True)
    wb, _ = ridge_fit(rln_features(rln, batches.inputs_b), batches.y_b, lam, fit_intercept=True)
    F = rln_features(rln, batches.inputs_seen)
    w, c = ridge_fit(F, batches.y_seen, lam, fit_intercept=True)
    residual = F @ w + c - batches.y_seen
    return float(np.sum((wa - wb) ** 2)), float(np.mean(residual ** 2))


def fit_pln_offline(rln, env, lam, batch, rng, latent_pair=None, batches=None):
    """Offline drift and loss estimates from oracle batches.

    ``v_offline`` is the squared distance between ridge fits on the two
    latent-conditioned batches; the loss is the mean squared error of a
    ridge fit on a batch from the seen mixture.
    """
    if lam <= 0:
        raise ValueError("offline fitting needs a positive ridge strength")
    if batches is None:
        if not hasattr(env, "sample_batch"):
            raise TypeError("offline fitting needs latent-conditioned sampling")
        latent_pair = latent_pair or env.config.latent_set[:2]
        batches = OfflineBatches.draw(env, latent_pair, batch, rng)
    return _offline_metrics(rln, batches, lam)


class IncrementalEvaluator:
    """Offline metrics for a current network and cheap single-perturbation candidates.

    Caches conv patches, binary maps and fc pre-activations for each batch so
    a candidate only recomputes the filter or fc columns it touches. All
    sums are of small integers, so float32 arithmetic is exact and results
    match a full recomputation.
    """

    def __init__(self, rln, batches, lam):
        self.rln = rln.copy()
        self.lam = lam
        self.parts = []
        for inputs, y in ((batches.inputs_a, batches.y_a), (batches.inputs_b, batches.y_b),
                          (batches.inputs_seen, batches.y_seen)):
            part = {"y": np.asarray(y, dtype=np.float64)}
            if self.rln.conv is not None:
                images = np.asarray(inputs, dtype=np.float32)
                patches = sliding_window_view(images, (3, 3), axis=(2, 3))
                part["patches"] = np.ascontiguousarray(
                    patches.transpose(0, 2, 3, 1, 4, 5).reshape(len(images), 196, 18))
                part["maps"] = conv_maps(self.rln.conv, images)
            else:
                part["maps"] = np.asarray(inputs, dtype=np.float32)
            part["pre"] = part["maps"] @ self.rln.fc.astype(np.float32)
            self.parts.append(part)
        self.current = self._metrics([p["pre"] for p in self.parts])

    def _metrics(self, pres):
        feats = [(pre > 0).astype(np.float64) for pre in pres]
        wa, _ = ridge_fit(feats[0], self.parts[0]["y"], self.lam, fit_intercept=True)
        wb, _ = ridge_fit(feats[1], self.parts[1]["y"], self.lam, fit_intercept=True)
        w, c = ridge_fit(feats[2], self.parts[2]["y"], self.lam, fit_intercept=True)
        residual = feats[2] @ w + c - self.parts[2]["y"]
        return float(np.sum((wa - wb) ** 2)), float(np.mean(residual ** 2))

    def _candidate(self, record):
        """Per-batch ``(pre, {filter: new maps} or None)`` after applying ``record``."""
        out = []
        if record.layer == "fc":
            F = self.rln.feature_dim
            delta = np.zeros_like(self.rln.fc, dtype=np.float32)
            rows, cols = np.divmod(record.indices, F)
            delta[rows, cols] = record.new_values.astype(np.float32) - record.old_values
            touched = np.unique(rows)
            for part in self.parts:
                out.append((part["pre"] + part["maps"][:, touched] @ delta[touched], None))
            return out
        kernels = self.rln.conv.reshape(4, 18).astype(np.float32)
        for idx, new in zip(record.indices, record.new_values):
            kernels[int(idx) // 18, int(idx) % 18] = new
        filters = np.unique(np.asarray(record.indices) // 18)
        for part in self.parts:
            pre = part["pre"].copy()
            new_maps = {}
            for f in filters:
                block = slice(f * 196, (f + 1) * 196)
                new_maps[f] = (part["patches"] @ kernels[f] > 0).astype(np.float32)
                pre += (new_maps[f] - part["maps"][:, block]) @ self.rln.fc[block].astype(np.float32)
            out.append((pre, new_maps))
        return out

    def evaluate(self, record):
        """Metrics of the current network with ``record`` applied (not kept)."""
        return self._metrics([pre for pre, _ in self._candidate(record)])

    def accept(self, record):
        for part, (pre, new_maps) in zip(self.parts, self._candidate(record)):
            part["pre"] = pre
            for f, maps in (new_maps or {}).items():
                part["maps"][:, f * 196:(f + 1) * 196] = maps
        record.apply(self.rln)
        self.current = self._metrics([p["pre"] for p in self.parts])


def pln_predictor(feature_dim):
    """Plain linear PLN: unit linear gates, trainable ``w`` starting at zero."""
    return GatedLinearPredictor(w=np.zeros(feature_dim), g=np.ones(feature_dim),
                                adam_m=np.zeros(feature_dim), adam_v=np.zeros(feature_dim),
                                gate="linear")


def fit_pln_online(rln, env, learner_cfg, steps, rng, alpha=0.999, beta=0.9999, chunk=20_000):
    """Train a fresh PLN on the RLN features of ``steps`` streamed samples.

    Returns ``(sum of v, running loss)``.
    """
    p = pln_predictor(rln.feature_dim)
    stats = WeightStats.zeros(rln.feature_dim, alpha, beta)
    loss = RunningLoss()
    state = env.initial_state(rng)
    done = 0
    while done < steps:
        n = min(chunk, steps - done)
        traj = env.rollout(n, rng, state)
        state = traj.final_state
        feats = rln_features(rln, env.observations(traj, rng))
        train_online(p, feats, traj.y, learner_cfg, stats=stats, running_loss=loss)
        done += n
    return float(stats.v.sum()), loss.value


@dataclass
class PwbStep:
    iteration: int
    layer: str
    fraction: float
    v_before: float
    v_after: float
    loss_before: float
    loss_after: float
    accepted: bool


def _accept(step, rule):
    v_better = step.v_after < step.v_before
    loss_better = step.loss_after < step.loss_before
    if rule == "either":
        return v_better or loss_better
    return v_better if step.layer == "conv" else loss_better


def pwb_run(cfg, env, rng, rln=None, accept=True, on_step=None):
    """Run the perturb/evaluate/keep-or-revert loop; returns ``(rln, history)``.

    Even iterations perturb the conv layer and test the drift sum; odd
    iterations perturb the fc layer and test the loss (feature-mode networks
    have no conv layer and always perturb fc, alternating the metric).
    ``accept=False`` reverts every perturbation.
    """
    if rln is None:
        in_dim = None if env.config.mode == "images" else env.n_features
        rln = Rln.random(rng, cfg.feature_dim, in_dim)
    lo, hi = cfg.fraction_range
    history = []
    evaluator = None
    for it in range(1, cfg.iterations + 1):
        target = "conv" if it % 2 == 0 else "fc"
        layer = target if rln.conv is not None else "fc"
        fraction = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        candidate, record = perturb(rln, layer, fraction, rng)
        if cfg.mode == "offline-star":
            if evaluator is None or (it - 1) % cfg.refresh_every == 0:
                batches = OfflineBatches.draw(env, cfg.latent_pair, cfg.batch, rng)
                evaluator = IncrementalEvaluator(rln, batches, cfg.ridge_lambda)
            v0, l0 = evaluator.current
            v1, l1 = evaluator.evaluate(record)
        else:
            seed = int(rng.integers(2**63))
            v0, l0 = fit_pln_online(rln, env, cfg.learner, cfg.online_steps,
                                    np.random.default_rng(seed), cfg.alpha, cfg.beta)
            v1, l1 = fit_pln_online(candidate, env, cfg.learner, cfg.online_steps,
                                    np.random.default_rng(seed), cfg.alpha, cfg.beta)
        step = PwbStep(it, target, fraction, v0, v1, l0, l1, False)
        step.accepted = accept and _accept(step, cfg.acceptance)
        if step.accepted:
            rln = candidate
            if evaluator is not None:
                evaluator.accept(record)
        history.append(step)
        log.debug("iter %d %s frac=%.2e v %.4g->%.4g loss %.4g->%.4g %s", it, target, fraction,
                  v0, v1, l0, l1, "keep" if step.accepted else "revert")
        if on_step is not None:
            on_step(step, rln, candidate)
    return rln, history


def write_history(path, history):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "layer", "fraction", "v_before", "v_after",
                         "loss_before", "loss_after", "accepted"])
        for s in history:
            writer.writerow([s.iteration, s.layer, repr(s.fraction), repr(s.v_before),
                             repr(s.v_after), repr(s.loss_before), repr(s.loss_after),
                             int(s.accepted)])


@dataclass
class RidgeReadout:
    """Frozen linear readout on RLN features, thresholded at one half."""

    rln: Rln
    w: np.ndarray
    intercept: float

    def predict_proba(self, inputs):
        return np.clip(rln_features(self.rln, inputs) @ self.w + self.intercept, 0.0, 1.0)

    __call__ = predict_proba


def fit_readout(rln, env, lam, n, rng):
    """Ridge readout fit on ``n`` draws from the seen mixture."""
    seen = env.sample_seen_batch(n, rng)
    w, c = ridge_fit(rln_features(rln, env.observations(seen, rng)), seen.y, lam,
                     fit_intercept=True)
    return RidgeReadout(rln, w, c)


def readout_accuracy(readout, env, n, rng):
    batch = env.sample_seen_batch(n, rng)
    return float(correctness(readout(env.observations(batch, rng)), batch.y).mean())
