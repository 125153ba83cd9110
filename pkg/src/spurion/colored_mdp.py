"""Online Colored-MNIST as a Markov decision process.

The hidden state is a digit class plus a latent level ``p = E[y=1 | green]``.
Each step the class drifts by a small random shift, the latent level toggles
rarely, and the emitted target/color are sampled from the new state.

Two observation modes exist: a 12-dim binary vector (class one-hot followed
by a green/red one-hot) and a 2x16x16 image with the digit drawn in the
channel of its color.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SHIFT_PROBS = np.array([0.65, 0.15, 0.10, 0.05, 0.03, 0.02])
N_CLASSES = 10
N_FEATURES = 12
GREEN, RED = "green", "red"
GREEN_INDEX, RED_INDEX = 10, 11

SEEN_FEATURES = (0.8, 0.9)
SEEN_IMAGES = (0.76, 0.99)
UNSEEN = (0.1,)


@dataclass
class EnvConfig:
    mode: str = "features"
    latent_set: tuple = SEEN_FEATURES
    latent_switch_prob: float = 1e-4
    label_noise: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.latent_set = tuple(float(p) for p in self.latent_set)
        if self.mode not in ("features", "images"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.latent_set:
            raise ValueError("latent_set must be non-empty")
        if not all(0.0 < p < 1.0 for p in self.latent_set):
            raise ValueError(f"latent values must lie in (0, 1): {self.latent_set}")
        if not 0.0 <= self.latent_switch_prob <= 1.0:
            raise ValueError("latent_switch_prob must be in [0, 1]")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must be in [0, 1]")

    def unseen(self, latent=UNSEEN):
        """Same benchmark with the held-out latent level and no switching."""
        return replace(self, latent_set=tuple(latent), latent_switch_prob=0.0)

    @classmethod
    def from_file(cls, path):
        return cls(**parse_env_options(read_config(path)))


@dataclass
class EnvState:
    class_label: int
    latent_p: float
    step_count: int = 0
    latent_index: int = 0


@dataclass
class Emission:
    target_y: int
    color: str
    observation: np.ndarray = field(repr=False)


@dataclass
class Trajectory:
    """Column-oriented record of ``n`` consecutive emissions."""

    classes: np.ndarray
    green: np.ndarray
    y: np.ndarray
    latent: np.ndarray
    final_state: EnvState

    def __len__(self):
        return len(self.y)

    def features(self):
        return feature_matrix(self.classes, self.green)

    def to_csv(self, path, start_step=0):
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "class", "color", "latent_p", "y"])
            for i in range(len(self)):
                writer.writerow([
                    start_step + i + 1,
                    int(self.classes[i]),
                    GREEN if self.green[i] else RED,
                    repr(float(self.latent[i])),
                    int(self.y[i]),
                ])


def read_config(path):
    """Parse a line-oriented ``key=value`` file (``#`` starts a comment)."""
    options = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        options[key.strip()] = value.strip()
    return options


def parse_env_options(options):
    kwargs = {}
    if "mode" in options:
        kwargs["mode"] = options["mode"]
    if "latent_set" in options:
        kwargs["latent_set"] = tuple(float(v) for v in options["latent_set"].split(","))
    if "latent_switch_prob" in options:
        kwargs["latent_switch_prob"] = float(options["latent_switch_prob"])
    if "label_noise" in options:
        kwargs["label_noise"] = float(options["label_noise"])
    if "seed" in options:
        kwargs["seed"] = int(options["seed"])
    return kwargs


def observe_features(class_label, color):
    if not 0 <= int(class_label) < N_CLASSES:
        raise ValueError(f"class_label out of range: {class_label}")
    if color not in (GREEN, RED):
        raise ValueError(f"unknown color {color!r}")
    x = np.zeros(N_FEATURES, dtype=np.uint8)
    x[int(class_label)] = 1
    x[GREEN_INDEX if color == GREEN else RED_INDEX] = 1
    return x


def feature_matrix(classes, green):
    """Vectorized :func:`observe_features` for a batch of states."""
    classes = np.asarray(classes)
    n = len(classes)
    X = np.zeros((n, N_FEATURES), dtype=np.uint8)
    rows = np.arange(n)
    X[rows, classes] = 1
    X[rows, np.where(green, GREEN_INDEX, RED_INDEX)] = 1
    return X


def observe_image(class_label, color, digit_pool, rng):
    if color not in (GREEN, RED):
        raise ValueError(f"unknown color {color!r}")
    images = digit_pool.images(int(class_label))
    digit = images[rng.integers(len(images))]
    out = np.zeros((2, 16, 16), dtype=np.float32)
    out[0 if color == GREEN else 1, 1:15, 1:15] = digit
    return out


def render_images(classes, green, digit_pool, rng):
    """Vectorized :func:`observe_image`; returns float32 ``(n, 2, 16, 16)``."""
    classes = np.asarray(classes)
    n = len(classes)
    out = np.zeros((n, 2, 16, 16), dtype=np.float32)
    for c in np.unique(classes):
        rows = np.flatnonzero(classes == c)
        bank = digit_pool.stack(int(c))
        picks = bank[rng.integers(len(bank), size=len(rows))]
        channel = np.where(green[rows], 0, 1)
        out[rows, channel, 1:15, 1:15] = picks
    return out


class ColoredMDP:
    """Simulator for one configuration of the benchmark.

    ``digit_pool`` is required only in image mode.  The single agent action
    has no effect on the dynamics; ``step`` accepts and ignores it.
    """

    def __init__(self, config, digit_pool=None):
        if config.mode == "images" and digit_pool is None:
            raise ValueError("image mode needs a digit pool")
        self.config = config
        self.digit_pool = digit_pool

    @property
    def n_features(self):
        return N_FEATURES

    def initial_state(self, rng):
        return EnvState(class_label=int(rng.integers(N_CLASSES)),
                        latent_p=self.config.latent_set[0])

    def _sample_target_color(self, class_label, latent_p, rng):
        y = int(class_label >= 5) ^ int(rng.random() < self.config.label_noise)
        u = rng.random()
        green = u < latent_p if y else u >= latent_p
        return y, GREEN if green else RED

    def step(self, state, rng, action=None):
        cfg = self.config
        k = int(rng.choice(len(SHIFT_PROBS), p=SHIFT_PROBS))
        latent_index = state.latent_index
        if rng.random() < cfg.latent_switch_prob:
            latent_index = (latent_index + 1) % len(cfg.latent_set)
        new = EnvState(class_label=(state.class_label + k) % N_CLASSES,
                       latent_p=cfg.latent_set[latent_index],
                       step_count=state.step_count + 1,
                       latent_index=latent_index)
        y, color = self._sample_target_color(new.class_label, new.latent_p, rng)
        return new, Emission(y, color, self.observe(new.class_label, color, rng))

    def observe(self, class_label, color, rng):
        if self.config.mode == "features":
            return observe_features(class_label, color)
        return observe_image(class_label, color, self.digit_pool, rng)

    def rollout(self, n, rng, state=None):
        """Simulate ``n`` steps at once.

        Draws the same distributions as repeated :meth:`step` calls but in
        blocks, so the two paths are not draw-for-draw identical.
        """
        cfg = self.config
        if state is None:
            state = self.initial_state(rng)
        shifts = rng.choice(len(SHIFT_PROBS), size=n, p=SHIFT_PROBS)
        classes = (state.class_label + np.cumsum(shifts)) % N_CLASSES
        toggles = rng.random(n) < cfg.latent_switch_prob
        lat_idx = (state.latent_index + np.cumsum(toggles)) % len(cfg.latent_set)
        latent = np.asarray(cfg.latent_set)[lat_idx]
        flips = rng.random(n) < cfg.label_noise
        y = ((classes >= 5) ^ flips).astype(np.uint8)
        u = rng.random(n)
        green = np.where(y == 1, u < latent, u >= latent)
        if n:
            final = EnvState(int(classes[-1]), float(latent[-1]),
                             state.step_count + n, int(lat_idx[-1]))
        else:
            final = state
        return Trajectory(classes.astype(np.int64), green, y, latent, final)

    def sample_batch(self, latent_p, n, rng):
        """IID draws at a fixed latent level (oracle access).

        Classes come from the shift kernel's stationary law, which is uniform.
        """
        classes = rng.integers(N_CLASSES, size=n)
        flips = rng.random(n) < self.config.label_noise
        y = ((classes >= 5) ^ flips).astype(np.uint8)
        u = rng.random(n)
        green = np.where(y == 1, u < latent_p, u >= latent_p)
        latent = np.full(n, float(latent_p))
        return Trajectory(classes, green, y, latent, EnvState(0, float(latent_p)))

    def sample_seen_batch(self, n, rng):
        """IID draws from the seen region, latent picked uniformly per draw."""
        lat = np.asarray(self.config.latent_set)[rng.integers(len(self.config.latent_set), size=n)]
        classes = rng.integers(N_CLASSES, size=n)
        flips = rng.random(n) < self.config.label_noise
        y = ((classes >= 5) ^ flips).astype(np.uint8)
        u = rng.random(n)
        green = np.where(y == 1, u < lat, u >= lat)
        return Trajectory(classes, green, y, lat, EnvState(0, float(lat[0]) if n else 0.0))

    def cell_probabilities(self, latent_p):
        """Joint law of ``(class, green, y)`` for one IID draw, shape ``(10, 2, 2)``.

        Index ``[c, g, y]`` with ``g = 1`` for green.
        """
        noise = self.config.label_noise
        probs = np.zeros((N_CLASSES, 2, 2))
        for c in range(N_CLASSES):
            p_y1 = 1.0 - noise if c >= 5 else noise
            for y, py in ((1, p_y1), (0, 1.0 - p_y1)):
                p_green = latent_p if y else 1.0 - latent_p
                probs[c, 1, y] = 0.1 * py * p_green
                probs[c, 0, y] = 0.1 * py * (1.0 - p_green)
        return probs

    def sample_counts(self, latent_p, n, rng):
        """Cell counts of ``n`` IID draws; same law as :meth:`sample_batch`, summarized.

        ``latent_p`` may be a tuple, meaning each draw picks a level uniformly.
        """
        levels = np.atleast_1d(np.asarray(latent_p, dtype=np.float64))
        probs = np.mean([self.cell_probabilities(p) for p in levels], axis=0)
        return rng.multinomial(n, probs.ravel()).reshape(probs.shape)

    def observations(self, traj, rng):
        if self.config.mode == "features":
            return traj.features()
        return render_images(traj.classes, traj.green, self.digit_pool, rng)


def correctness(probs, y):
    """Per-step 0/1 correctness; probability exactly 0.5 counts as class 1."""
    return ((np.asarray(probs) >= 0.5) == (np.asarray(y) == 1)).astype(np.uint8)


def evaluate(env, predictor, steps, rng, chunk=50_000, resamples=1000):
    """Frozen-predictor accuracy over ``steps`` environment steps.

    ``predictor`` maps a batch of observations to probabilities of y=1.
    Returns ``(accuracy, bootstrap_std)``.
    """
    from .harness import bootstrap_std

    if steps <= 0:
        raise ValueError("steps must be positive")
    predict = getattr(predictor, "predict_proba", predictor)
    state = env.initial_state(rng)
    correct = np.empty(steps, dtype=np.uint8)
    done = 0
    while done < steps:
        n = min(chunk, steps - done)
        traj = env.rollout(n, rng, state)
        state = traj.final_state
        probs = predict(env.observations(traj, rng))
        correct[done:done + n] = correctness(probs, traj.y)
        done += n
    return float(correct.mean()), bootstrap_std(correct, resamples, rng)
