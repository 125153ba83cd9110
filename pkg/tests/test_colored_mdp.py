import numpy as np
import pytest
from hypothesis import given, strategies as st

from spurion.colored_mdp import (GREEN, RED, SHIFT_PROBS, ColoredMDP, EnvConfig, EnvState,
                                 correctness, evaluate, observe_features, observe_image,
                                 read_config)
from spurion.mnist_data import synth_digits


def within_3_sigma(k, n, p):
    return abs(k / n - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_observe_features_examples():
    x = observe_features(7, RED)
    assert np.flatnonzero(x).tolist() == [7, 11]
    x = observe_features(0, GREEN)
    assert np.flatnonzero(x).tolist() == [0, 10]


@given(st.integers(0, 9), st.sampled_from([GREEN, RED]))
def test_features_have_two_active_entries(c, color):
    x = observe_features(c, color)
    assert x.sum() == 2
    assert x[c] == 1
    assert x[10:].sum() == 1


def test_observe_features_rejects_bad_class():
    with pytest.raises(ValueError):
        observe_features(10, GREEN)


def test_observe_image_places_digit_in_color_channel(rng):
    pool = synth_digits(rng, per_class=3)
    img = observe_image(4, GREEN, pool, rng)
    assert img.shape == (2, 16, 16)
    assert img[1].sum() == 0
    assert img[0].sum() > 0
    assert img[0, 0].sum() == img[0, -1].sum() == img[0, :, 0].sum() == img[0, :, -1].sum() == 0
    img = observe_image(4, RED, pool, rng)
    assert img[0].sum() == 0 and img[1].sum() > 0


def test_shift_frequencies_over_a_million_steps(rng):
    env = ColoredMDP(EnvConfig())
    n = 1_000_000
    traj = env.rollout(n, rng, EnvState(3, 0.8))
    shifts = np.diff(np.concatenate([[3], traj.classes])) % 10
    for k, p in enumerate(SHIFT_PROBS):
        assert within_3_sigma(np.sum(shifts == k), n, p), k


def test_step_kernel_frequencies(rng):
    # the per-step path must agree with the same law as the vectorized one
    env = ColoredMDP(EnvConfig())
    state = EnvState(0, 0.8)
    n = 20_000
    zero = 0
    for _ in range(n):
        new, em = env.step(state, rng)
        zero += new.class_label == state.class_label
        state = new
    assert within_3_sigma(zero, n, 0.65)


def test_no_switching_keeps_latent_fixed(rng):
    env = ColoredMDP(EnvConfig(latent_switch_prob=0.0))
    traj = env.rollout(50_000, rng)
    assert np.all(traj.latent == 0.8)
    state = env.initial_state(rng)
    for _ in range(200):
        state, _ = env.step(state, rng)
        assert state.latent_p == 0.8


def test_green_predicts_target_at_latent_level(rng):
    env = ColoredMDP(EnvConfig(latent_set=(0.9,)))
    traj = env.rollout(1_000_000, rng)
    green = traj.green
    assert within_3_sigma(int(traj.y[green].sum()), int(green.sum()), 0.9)


def test_latent_switches_cycle_through_set(rng):
    env = ColoredMDP(EnvConfig(latent_set=(0.2, 0.5, 0.7), latent_switch_prob=0.01))
    traj = env.rollout(20_000, rng)
    assert set(np.unique(traj.latent)) <= {0.2, 0.5, 0.7}
    changes = traj.latent[1:][traj.latent[1:] != traj.latent[:-1]]
    before = traj.latent[:-1][traj.latent[1:] != traj.latent[:-1]]
    order = {0.2: 0.5, 0.5: 0.7, 0.7: 0.2}
    assert all(order[b] == a for b, a in zip(before, changes))


def test_labels_follow_class_with_noise(rng):
    env = ColoredMDP(EnvConfig())
    traj = env.rollout(400_000, rng)
    clean = (traj.classes >= 5).astype(int)
    flips = int(np.sum(clean != traj.y))
    assert within_3_sigma(flips, len(traj), 0.25)


def test_step_and_rollout_states_are_valid(rng):
    env = ColoredMDP(EnvConfig())
    state = env.initial_state(rng)
    for _ in range(100):
        state, em = env.step(state, rng)
        assert 0 <= state.class_label <= 9
        assert state.latent_p in (0.8, 0.9)
        assert em.observation.sum() == 2


def test_rollout_is_deterministic():
    env = ColoredMDP(EnvConfig())
    a = env.rollout(1000, np.random.default_rng(1))
    b = env.rollout(1000, np.random.default_rng(1))
    assert np.array_equal(a.features(), b.features()) and np.array_equal(a.y, b.y)


def test_config_validation():
    with pytest.raises(ValueError):
        EnvConfig(latent_set=())
    with pytest.raises(ValueError):
        EnvConfig(latent_switch_prob=1.5)
    with pytest.raises(ValueError):
        EnvConfig(mode="audio")
    with pytest.raises(ValueError):
        ColoredMDP(EnvConfig(mode="images"))


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "env.cfg"
    path.write_text("# comment\nmode = features\nlatent_set=0.3,0.6\nlabel_noise=0.1  # inline\n")
    cfg = EnvConfig.from_file(path)
    assert cfg.latent_set == (0.3, 0.6) and cfg.label_noise == 0.1
    path.write_text("no equals sign\n")
    with pytest.raises(ValueError):
        read_config(path)


def test_trajectory_csv(tmp_path, rng):
    env = ColoredMDP(EnvConfig())
    traj = env.rollout(5, rng)
    traj.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,class,color,latent_p,y"
    assert len(lines) == 6


def test_correctness_ties_count_as_class_one():
    assert correctness([0.5, 0.5, 0.2], [1, 0, 0]).tolist() == [1, 0, 1]


def test_evaluate_color_rule_on_unseen(rng):
    env = ColoredMDP(EnvConfig().unseen())
    by_color = lambda X: X[:, 10].astype(float)
    acc, std = evaluate(env, by_color, 100_000, rng)
    assert abs(acc - 0.1) < 0.01
    assert 0 < std < 0.003
