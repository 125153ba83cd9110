import csv
from dataclasses import replace

import numpy as np
import pytest

from spurion.colored_mdp import EnvConfig
from spurion.harness import (DEFAULT_GRIDS, METHODS, RunReport, apply_cell, bootstrap_std,
                             default_spec, grid_cells, grid_search, paper_table_specs, rank_key,
                             run_experiment, spec_from_options, write_paper_tables)
from spurion.online_sgd import LearnerConfig


def _small(method, **kw):
    return default_spec(method, seeds=(0, 1), train_steps=20_000, eval_steps=5_000, **kw)


def test_bootstrap_constant_sequence():
    assert bootstrap_std(np.ones(1000)) == 0.0


def test_bootstrap_bernoulli_matches_binomial_std():
    rng = np.random.default_rng(0)
    x = (rng.random(100_000) < 0.75).astype(np.uint8)
    expected = np.sqrt(0.75 * 0.25 / 100_000)  # 0.00137
    assert bootstrap_std(x, rng=rng) == pytest.approx(expected, rel=0.3)
    a = bootstrap_std(x, 1000, np.random.default_rng(1))
    b = bootstrap_std(x, 2000, np.random.default_rng(1))
    assert abs(a - b) / a < 0.1


def test_bootstrap_real_values_use_index_resampling():
    rng = np.random.default_rng(0)
    x = rng.normal(size=400)
    assert bootstrap_std(x, 2000, rng) == pytest.approx(1 / np.sqrt(400), rel=0.15)


def test_bootstrap_errors():
    with pytest.raises(ValueError):
        bootstrap_std([])
    with pytest.raises(ValueError):
        bootstrap_std([1, 0], resamples=10)


@pytest.mark.parametrize("method", METHODS)
def test_default_specs_validate(method):
    default_spec(method).validate()


@pytest.mark.parametrize("spec", [
    default_spec("online", irm_weight=1.0),
    default_spec("online-irm", irm_weight=0.0),
    default_spec("replay-irm", replay_capacity=0),
    default_spec("ours", env=EnvConfig(mode="images")),
    default_spec("pwb-star-fixed", env=EnvConfig(mode="images")),
    default_spec("pwb-star", digits="/nonexistent/mnist"),
    default_spec("online", seeds=()),
])
def test_invalid_specs_are_rejected(spec):
    with pytest.raises(ValueError):
        spec.validate()


def test_unknown_method():
    with pytest.raises(ValueError):
        default_spec("sgd-magic")


def test_run_experiment_is_deterministic(tmp_path):
    spec = _small("ours", schedule=replace(default_spec("ours").schedule, warmup=10_000, every=2_000))
    a = run_experiment(spec, out_dir=tmp_path / "a")
    b = run_experiment(spec, out_dir=tmp_path / "b")
    assert (tmp_path / "a/ours_results.csv").read_bytes() == (tmp_path / "b/ours_results.csv").read_bytes()
    assert a.seen_acc == b.seen_acc
    rows = list(csv.reader((tmp_path / "a/ours_results.csv").open()))
    assert rows[0] == ["method", "seed", "seen_acc", "seen_std", "unseen_acc", "unseen_std"]
    assert [r[1] for r in rows[1:]] == ["0", "1"]
    assert (tmp_path / "a/ours_weights_seed0.csv").exists()


def test_workers_do_not_change_results():
    spec = _small("online")
    assert run_experiment(spec).seeds[1].unseen_acc == run_experiment(spec, workers=2).seeds[1].unseen_acc


def test_single_cell_grid_equals_run(tmp_path):
    spec = _small("online")
    best, rows = grid_search(spec, {"lr": (1e-3,), "l1": (1e-4,)}, out_dir=tmp_path)
    direct = run_experiment(spec)
    assert len(rows) == 1
    assert (best.seen_acc, best.unseen_acc) == (direct.seen_acc, direct.unseen_acc)
    lines = (tmp_path / "online_grid.csv").read_text().splitlines()
    assert lines[0].startswith("lr,l1,seen_acc")


def test_grid_cells_and_axes():
    cells = grid_cells(DEFAULT_GRIDS["ours"])
    assert len(cells) == 36
    assert len(grid_cells(DEFAULT_GRIDS["oracle-irm"])) == 36
    spec = apply_cell(default_spec("oracle-irm"), {"lr": 1e-4, "irm_penalty": 1e5})
    assert spec.irm.lr == 1e-4 and spec.irm.penalty_weight == 1e5
    with pytest.raises(ValueError):
        apply_cell(spec, {"momentum": 0.9})
    with pytest.raises(ValueError):
        grid_cells({})


def test_ranking_prefers_unseen_among_qualified():
    spec = default_spec("online")

    def rep(seen, unseen):
        return RunReport(spec, [object()], seen, 0.0, unseen, 0.0, 0.0)

    collapsed, spurious, invariant = rep(0.5, 0.5), rep(0.85, 0.1), rep(0.75, 0.75)
    assert rank_key(collapsed) > rank_key(spurious)
    assert rank_key(spurious, min_seen=0.74) > rank_key(collapsed, min_seen=0.74)
    assert rank_key(invariant, min_seen=0.74) > rank_key(spurious, min_seen=0.74)
    assert rank_key(RunReport.diverged(spec)) < rank_key(collapsed, min_seen=0.74)


def test_diverged_cell_is_recorded_not_raised():
    spec = _small("online", learner=LearnerConfig(lr=1e3, l2=1.0, optimizer="sgd"))
    best, rows = grid_search(spec, {"lr": (1e3,)})
    assert rows[0][1].failed and best.failed


def test_oracle_irm_run():
    spec = default_spec("oracle-irm", seeds=(0,), eval_steps=5_000)
    spec = replace(spec, irm=replace(spec.irm, iterations=200, warmup=100))
    rep = run_experiment(spec)
    assert 0.0 <= rep.unseen_acc <= 1.0
    assert rep.seeds[0].gates.shape == (12,)


def test_pwb_star_run_writes_history(tmp_path):
    spec = default_spec("pwb-star", seeds=(0,), eval_steps=2_000, readout_batch=512)
    spec = replace(spec, pwb=replace(spec.pwb, iterations=4, batch=128, feature_dim=16))
    rep = run_experiment(spec, out_dir=tmp_path)
    assert (tmp_path / "pwb-star_history_seed0.csv").exists()
    assert 0.0 <= rep.seen_acc <= 1.0


def test_spec_from_options():
    spec = spec_from_options("ours", {"lr": "1e-4", "l1": "1e-2", "train_steps": "5000",
                                      "latent_set": "0.7,0.95", "seeds": "3,4",
                                      "l1_decoupled": "false"})
    assert spec.learner.lr == 1e-4 and spec.learner.l1 == 1e-2 and not spec.learner.l1_decoupled
    assert spec.train_steps == 5000 and spec.seeds == (3, 4)
    assert spec.env.latent_set == (0.7, 0.95)
    appendix = spec_from_options("ours", {"schedule": "paper-appendix"})
    assert appendix.schedule.rule == "scaled" and appendix.train_steps == 5_000_000
    with pytest.raises(ValueError):
        spec_from_options("ours", {"colour": "red"})


def test_paper_tables(tmp_path):
    specs = paper_table_specs(seeds=(0,), train_steps=1000)
    assert specs[("table2", "Online IRM + replay 500k")].replay_capacity == 500_000
    rep = RunReport(specs[("table1", "Our Method")], [], 0.75, 0.001, 0.7501, 0.002, 0.0)
    write_paper_tables(tmp_path, {("table1", "Our Method"): rep})
    rows = list(csv.reader((tmp_path / "table1.csv").open()))
    assert rows[1] == ["Our Method", "ours", "75.00", "0.10", "75.01", "0.20"]
    assert (tmp_path / "table3.csv").exists()
