"""Experiment runner, grid search, bootstrap statistics and CSV reporting."""
from __future__ import annotations

import csv
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .colored_mdp import ColoredMDP, EnvConfig, SEEN_FEATURES, SEEN_IMAGES, evaluate
from .irm import IrmConfig, ReplayBuffer, oracle_irm_train
from .mnist_data import load_mnist_pool, synth_digits
from .online_sgd import (GatedLinearPredictor, LearnerConfig, NonFiniteError, train_online,
                         write_weight_snapshot)
from .pwb import PwbConfig, fit_readout, pwb_run, write_history
from .weight_stats import SCHEDULES, MaskSchedule, WeightStats, normalize_v

log = logging.getLogger(__name__)

METHODS = ("online", "oracle-irm", "online-irm", "replay-irm", "ours", "ours-iid",
           "pwb", "pwb-star", "pwb-star-fixed")
LINEAR_METHODS = ("online", "online-irm", "replay-irm", "ours", "ours-iid")
PWB_METHODS = ("pwb", "pwb-star", "pwb-star-fixed")

RESULT_COLUMNS = ["method", "seed", "seen_acc", "seen_std", "unseen_acc", "unseen_std"]


def bootstrap_std(correct, resamples=1000, rng=None):
    """Standard deviation of the mean over with-replacement resamples.

    For a 0/1 sequence the number of ones in a resample is binomial, so the
    resampled means are drawn directly from that law instead of materializing
    index arrays.
    """
    x = np.asarray(correct, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cannot bootstrap an empty sequence")
    if resamples < 100:
        raise ValueError("use at least 100 resamples")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = x.size
    if np.all((x == 0) | (x == 1)):
        means = rng.binomial(n, x.mean(), size=resamples) / n
    else:
        means = np.empty(resamples)
        rows = max(1, 2_000_000 // n)
        for start in range(0, resamples, rows):
            stop = min(resamples, start + rows)
            means[start:stop] = x[rng.integers(n, size=(stop - start, n))].mean(axis=1)
    return float(means.std())


@dataclass
class ExperimentSpec:
    method: str
    env: EnvConfig = field(default_factory=EnvConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    schedule: MaskSchedule = field(default_factory=lambda: MaskSchedule("none"))
    irm: IrmConfig = field(default_factory=IrmConfig)
    pwb: PwbConfig = field(default_factory=PwbConfig)
    seeds: tuple = (0, 1, 2, 3, 4)
    train_steps: int = 1_000_000
    eval_steps: int = 100_000
    irm_weight: float = 0.0
    irm_warmup: int = 0
    replay_capacity: int = 0
    digits: str = "synthetic"
    readout_batch: int = 8192
    resamples: int = 1000

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.eval_steps <= 0:
            raise ValueError("eval_steps must be positive")
        m = self.method
        if m in LINEAR_METHODS + ("oracle-irm",) and self.env.mode != "features":
            raise ValueError(f"{m} runs on the feature benchmark only")
        if m in ("ours", "ours-iid") and self.schedule.rule == "none":
            raise ValueError(f"{m} needs a mask schedule")
        if m in ("online", "online-irm", "replay-irm") and self.schedule.rule != "none":
            raise ValueError(f"{m} does not use mask updates")
        if m in ("online-irm", "replay-irm") and self.irm_weight <= 0:
            raise ValueError(f"{m} needs a positive irm_weight")
        if m in ("replay-irm", "ours-iid") and self.replay_capacity < 1:
            raise ValueError(f"{m} needs a replay buffer capacity")
        if m == "online" and self.irm_weight:
            raise ValueError("online learning has no IRM penalty")
        if m == "pwb" and self.pwb.mode != "online":
            raise ValueError("pwb fits the predictor online; use pwb-star for offline fitting")
        if m in ("pwb-star", "pwb-star-fixed") and self.pwb.mode != "offline-star":
            raise ValueError(f"{m} needs offline-star fitting")
        if m == "pwb-star-fixed" and len(set(self.env.latent_set)) != 1:
            raise ValueError("pwb-star-fixed needs a single fixed latent value")
        if m in PWB_METHODS and self.env.mode == "images" and self.digits != "synthetic":
            if not Path(self.digits).is_dir():
                raise ValueError(f"MNIST directory not found: {self.digits}")
        return self


def default_spec(method, **overrides):
    """Spec with the settings used for each method's headline results."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    kw = {}
    if method == "online":
        kw["learner"] = LearnerConfig(lr=1e-3, l1=1e-4)
    elif method == "oracle-irm":
        kw["irm"] = IrmConfig(penalty_weight=1e4, warmup=5_000, iterations=20_000, lr=1e-3, l1=1e-3)
    elif method in ("online-irm", "replay-irm"):
        kw["learner"] = LearnerConfig(lr=1e-3, gate_mode="learned")
        kw["irm_weight"] = 1e4
        kw["irm_warmup"] = 0
        if method == "replay-irm":
            kw["replay_capacity"] = 100_000
    elif method in ("ours", "ours-iid"):
        kw["learner"] = LearnerConfig(lr=1e-3, l1=1e-3, l1_decoupled=True)
        kw["schedule"] = SCHEDULES["main"]["schedule"]
        if method == "ours-iid":
            kw["replay_capacity"] = 1_000_000
    else:
        kw["seeds"] = tuple(range(10))
        kw["pwb"] = PwbConfig(mode="online" if method == "pwb" else "offline-star",
                              latent_pair=(0.85, 0.85) if method == "pwb-star-fixed" else SEEN_IMAGES)
        latent = (0.85,) if method == "pwb-star-fixed" else SEEN_IMAGES
        kw["env"] = EnvConfig(mode="images", latent_set=latent)
        kw["train_steps"] = 0
    kw.update(overrides)
    return ExperimentSpec(method=method, **kw)


@dataclass
class SeedResult:
    method: str
    seed: int
    seen_acc: float
    seen_std: float
    unseen_acc: float
    unseen_std: float
    v_normalized: np.ndarray | None = None
    gates: np.ndarray | None = None
    wall_seconds: float = 0.0

    def row(self):
        return [self.method, self.seed, repr(self.seen_acc), repr(self.seen_std),
                repr(self.unseen_acc), repr(self.unseen_std)]


@dataclass
class RunReport:
    spec: ExperimentSpec
    seeds: list
    seen_acc: float
    seen_std: float
    unseen_acc: float
    unseen_std: float
    wall_seconds: float

    @classmethod
    def aggregate(cls, spec, seeds, resamples=1000):
        """Mean over seeds; the std bootstraps the mean of the per-seed accuracies."""
        seen = np.array([s.seen_acc for s in seeds])
        unseen = np.array([s.unseen_acc for s in seeds])
        rng = np.random.default_rng(0)
        sd = (lambda a: bootstrap_std(a, resamples, rng)) if len(seeds) > 1 else (lambda a: 0.0)
        return cls(spec, list(seeds), float(seen.mean()), sd(seen), float(unseen.mean()),
                   sd(unseen), float(sum(s.wall_seconds for s in seeds)))

    @classmethod
    def diverged(cls, spec):
        """Placeholder for a grid cell whose training produced non-finite values."""
        nan = float("nan")
        return cls(spec, [], nan, nan, nan, nan, 0.0)

    @property
    def failed(self):
        return not self.seeds

    @property
    def v_normalized(self):
        vs = [s.v_normalized for s in self.seeds if s.v_normalized is not None]
        return np.mean(vs, axis=0) if vs else None

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RESULT_COLUMNS)
            for s in self.seeds:
                writer.writerow(s.row())


def _digit_pool(spec, seed):
    if spec.env.mode != "images":
        return None
    if spec.digits == "synthetic":
        return synth_digits(np.random.default_rng([seed, 7]))
    return load_mnist_pool(spec.digits)


def _stream(env, steps, rng, chunk=250_000):
    """Yield ``(features, targets)`` blocks of a continuous trajectory."""
    state = env.initial_state(rng)
    done = 0
    while done < steps:
        n = min(chunk, steps - done)
        traj = env.rollout(n, rng, state)
        state = traj.final_state
        done += n
        yield traj.features(), traj.y


def _train_linear(spec, env, rng):
    cfg = spec.learner
    method = spec.method
    if method in ("online-irm", "replay-irm"):
        p = GatedLinearPredictor.irm_style(env.n_features, g_init=0.0)
    else:
        p = GatedLinearPredictor.zeros(env.n_features)
    stats = WeightStats.zeros(env.n_features)
    schedule = spec.schedule if method in ("ours", "ours-iid") else None
    replay = ReplayBuffer(spec.replay_capacity, env.n_features) if spec.replay_capacity else None
    for X, y in _stream(env, spec.train_steps, rng):
        train_online(p, X, y, cfg, stats=stats, schedule=schedule,
                     irm_weight=spec.irm_weight, irm_warmup=spec.irm_warmup,
                     replay=replay, rng=rng)
    return p, stats


def run_seed(spec, seed, out_dir=None):
    """Train one seed, freeze, and evaluate on the seen and unseen regions."""
    start = time.perf_counter()
    train_rng, eval_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    pool = _digit_pool(spec, seed)
    env_cfg = replace(spec.env, seed=seed)
    seen_env = ColoredMDP(env_cfg, pool)
    unseen_env = ColoredMDP(env_cfg.unseen(), pool)
    v_norm = gates = None
    out_dir = Path(out_dir) if out_dir is not None else None
    if spec.method in LINEAR_METHODS:
        predictor, stats = _train_linear(spec, seen_env, train_rng)
        gates = predictor.gates()
        if stats.v.sum() > 0:
            v_norm = normalize_v(stats.v)
        if out_dir is not None:
            write_weight_snapshot(out_dir / f"{spec.method}_weights_seed{seed}.csv", predictor, stats)
    elif spec.method == "oracle-irm":
        predictor = oracle_irm_train(seen_env, spec.irm, rng=train_rng)
        gates = predictor.gates()
    else:
        rln, history = pwb_run(spec.pwb, seen_env, train_rng)
        predictor = fit_readout(rln, seen_env, spec.pwb.ridge_lambda, spec.readout_batch, train_rng)
        if out_dir is not None:
            write_history(out_dir / f"{spec.method}_history_seed{seed}.csv", history)
    seen = evaluate(seen_env, predictor, spec.eval_steps, eval_rng, resamples=spec.resamples)
    unseen = evaluate(unseen_env, predictor, spec.eval_steps, eval_rng, resamples=spec.resamples)
    return SeedResult(spec.method, seed, seen[0], seen[1], unseen[0], unseen[1], v_norm, gates,
                      time.perf_counter() - start)


def _run_seed_args(args):
    return run_seed(*args)


def run_experiment(spec, out_dir=None, workers=1):
    """Run every seed of ``spec``; writes ``{method}_results.csv`` when ``out_dir`` is set."""
    spec.validate()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(spec, seed, out_dir) for seed in spec.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            seeds = list(pool.map(_run_seed_args, jobs))
    else:
        seeds = [run_seed(*job) for job in jobs]
    report = RunReport.aggregate(spec, seeds, spec.resamples)
    if out_dir is not None:
        report.write_csv(Path(out_dir) / f"{spec.method}_results.csv")
    log.info("%s seen %.4f unseen %.4f", spec.method, report.seen_acc, report.unseen_acc)
    return report


# grid axis name -> function applying one value to a spec
AXES = {
    "lr": lambda s, v: replace(s, learner=replace(s.learner, lr=v), irm=replace(s.irm, lr=v)),
    "l1": lambda s, v: replace(s, learner=replace(s.learner, l1=v), irm=replace(s.irm, l1=v)),
    "mask_lr": lambda s, v: replace(s, schedule=replace(s.schedule, mask_lr=v)),
    "irm_penalty": lambda s, v: replace(s, irm_weight=v, irm=replace(s.irm, penalty_weight=v)),
    "irm_warmup": lambda s, v: replace(s, irm_warmup=int(v), irm=replace(s.irm, warmup=int(v))),
    "replay_capacity": lambda s, v: replace(s, replay_capacity=int(v)),
    "ridge_lambda": lambda s, v: replace(s, pwb=replace(s.pwb, ridge_lambda=v)),
    "feature_dim": lambda s, v: replace(s, pwb=replace(s.pwb, feature_dim=int(v))),
}

LR = (1e-3, 1e-4, 1e-5)
L1 = (1e-2, 1e-3, 1e-4)
DEFAULT_GRIDS = {
    "online": {"lr": LR, "l1": L1},
    "ours": {"lr": LR, "l1": L1, "mask_lr": (1e-3, 1e-4, 1e-5, 1e-6)},
    "ours-iid": {"lr": LR, "l1": L1, "mask_lr": (1e-3, 1e-4, 1e-5, 1e-6)},
    "oracle-irm": {"lr": LR, "l1": L1, "irm_penalty": (1e3, 1e4, 1e5, 1e6)},
    "online-irm": {"lr": LR, "l1": L1, "irm_penalty": (1e3, 1e4, 1e5, 1e6)},
    "replay-irm": {"lr": LR, "irm_penalty": (1e3, 1e4, 1e5, 1e6),
                   "replay_capacity": (100_000, 500_000)},
    "pwb": {"ridge_lambda": (1e-2, 1e-3, 1e-4), "feature_dim": (50, 100, 200)},
    "pwb-star": {"ridge_lambda": (1e-2, 1e-3, 1e-4), "feature_dim": (50, 100, 200)},
    "pwb-star-fixed": {"ridge_lambda": (1e-2, 1e-3, 1e-4), "feature_dim": (50, 100, 200)},
}


def apply_cell(spec, cell):
    for name, value in cell.items():
        if name not in AXES:
            raise ValueError(f"unknown grid axis {name!r}; known: {', '.join(AXES)}")
        spec = AXES[name](spec, value)
    return spec


def grid_cells(grid):
    if not grid:
        raise ValueError("grid must have at least one axis")
    names = list(grid)
    return [dict(zip(names, values)) for values in itertools.product(*(grid[n] for n in names))]


def rank_key(report, min_seen=None):
    """Unseen accuracy, then seen; diverged cells and cells under ``min_seen`` rank last."""
    if report.failed:
        return (False, False, 0.0, 0.0)
    qualified = min_seen is None or report.seen_acc >= min_seen
    return (True, qualified, report.unseen_acc, report.seen_acc)


def grid_search(spec, grid=None, out_dir=None, workers=1, min_seen=None):
    """Run every cell of the Cartesian grid; returns ``(best_report, [(cell, report)])``."""
    grid = DEFAULT_GRIDS[spec.method] if grid is None else grid
    cells = grid_cells(grid)
    rows = []
    for cell in cells:
        cell_spec = apply_cell(spec, cell)
        try:
            report = run_experiment(cell_spec, workers=workers)
        except NonFiniteError as exc:
            log.warning("cell %s diverged: %s", cell, exc)
            report = RunReport.diverged(cell_spec)
        rows.append((cell, report))
    best = max(rows, key=lambda r: rank_key(r[1], min_seen))[1]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_grid_csv(Path(out_dir) / f"{spec.method}_grid.csv", rows)
    return best, rows


def write_grid_csv(path, rows):
    names = list(rows[0][0]) if rows else []
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names + ["seen_acc", "seen_std", "unseen_acc", "unseen_std"])
        for cell, rep in rows:
            writer.writerow([repr(cell[n]) for n in names]
                            + [repr(rep.seen_acc), repr(rep.seen_std),
                               repr(rep.unseen_acc), repr(rep.unseen_std)])


# table -> ordered (row label, method) pairs
PAPER_TABLES = {
    "table1": [("Online Learning", "online"), ("Our Method", "ours"),
               ("Oracle IRM", "oracle-irm"), ("Online IRM", "online-irm")],
    "table2": [("Online IRM + replay 100k", "replay-irm"), ("Online IRM + replay 500k", "replay-irm")],
    "table3": [("PwB*", "pwb-star"), ("PwB* (0.85)", "pwb-star-fixed")],
}


def paper_table_specs(seeds=None, train_steps=None, pwb_iterations=None):
    """One spec per published table row, keyed by ``(table, label)``."""
    specs = {}
    for table, rows in PAPER_TABLES.items():
        for label, method in rows:
            spec = default_spec(method)
            if label.endswith("500k"):
                spec = replace(spec, replay_capacity=500_000)
            if seeds is not None:
                spec = replace(spec, seeds=tuple(seeds))
            if train_steps is not None and method not in PWB_METHODS:
                spec = replace(spec, train_steps=train_steps)
            if pwb_iterations is not None and method in PWB_METHODS:
                spec = replace(spec, pwb=replace(spec.pwb, iterations=pwb_iterations))
            specs[(table, label)] = spec
    return specs


def write_paper_tables(out_dir, reports):
    """``reports`` maps ``(table, label)`` to a RunReport; one CSV per table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for table, rows in PAPER_TABLES.items():
        with (out_dir / f"{table}.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "method", "seen_acc", "seen_std", "unseen_acc", "unseen_std"])
            for label, method in rows:
                rep = reports.get((table, label))
                if rep is None:
                    continue
                writer.writerow([label, method, f"{100 * rep.seen_acc:.2f}",
                                 f"{100 * rep.seen_std:.2f}", f"{100 * rep.unseen_acc:.2f}",
                                 f"{100 * rep.unseen_std:.2f}"])


def spec_from_options(method, options):
    """Build a spec from ``key=value`` options layered over :func:`default_spec`."""
    spec = default_spec(method)
    opts = dict(options)
    env_keys = {"mode", "latent_set", "latent_switch_prob", "label_noise"}
    env_opts = {k: opts.pop(k) for k in list(opts) if k in env_keys}
    if env_opts:
        from .colored_mdp import parse_env_options
        spec = replace(spec, env=replace(spec.env, **parse_env_options(env_opts)))
    cell = {}
    for key in list(opts):
        if key in AXES:
            cell[key] = float(opts.pop(key))
    spec = apply_cell(spec, cell)
    simple = {"train_steps": int, "eval_steps": int, "irm_warmup": int, "replay_capacity": int,
              "readout_batch": int, "resamples": int}
    for key, cast in simple.items():
        if key in opts:
            spec = replace(spec, **{key: cast(opts.pop(key))})
    if "seeds" in opts:
        spec = replace(spec, seeds=tuple(int(s) for s in opts.pop("seeds").split(",")))
    if "schedule" in opts:
        preset = SCHEDULES[opts.pop("schedule")]
        spec = replace(spec, schedule=replace(preset["schedule"], mask_lr=spec.schedule.mask_lr),
                       train_steps=preset["train_steps"])
    learner_keys = {"l2": float, "optimizer": str, "l1_decoupled": lambda v: v.lower() in ("1", "true", "yes")}
    for key, cast in learner_keys.items():
        if key in opts:
            spec = replace(spec, learner=replace(spec.learner, **{key: cast(opts.pop(key))}))
    pwb_keys = {"pwb_iterations": ("iterations", int), "pwb_batch": ("batch", int),
                "online_steps": ("online_steps", int), "refresh_every": ("refresh_every", int),
                "acceptance": ("acceptance", str)}
    for key, (name, cast) in pwb_keys.items():
        if key in opts:
            spec = replace(spec, pwb=replace(spec.pwb, **{name: cast(opts.pop(key))}))
    irm_keys = {"irm_iterations": ("iterations", int), "irm_batch": ("batch", int)}
    for key, (name, cast) in irm_keys.items():
        if key in opts:
            spec = replace(spec, irm=replace(spec.irm, **{name: cast(opts.pop(key))}))
    if opts:
        raise ValueError(f"unknown option(s): {', '.join(sorted(opts))}")
    return spec
