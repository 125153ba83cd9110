import numpy as np
import pytest
from hypothesis import given, strategies as st

from spurion.colored_mdp import ColoredMDP, EnvConfig, evaluate
from spurion.irm import (CELL_X, CELL_Y, IrmConfig, ReplayBuffer, _weighted_grads, irm_objective,
                         irm_penalty, irm_penalty_grad, online_irm_config, online_irm_predictor,
                         online_irm_step, oracle_irm_train, replay_push, replay_sample)
from spurion.online_sgd import sigmoid, train_online

# derivative of -log(sigmoid(s)) at s = 1 and its square, 40 digits via mpmath
D_LOGIT1 = -0.2689414213699951207488407581781637256349
PENALTY_LOGIT1 = 0.07232948812851326821141602459225470001259


def _scaled_risk(s, z, y):
    p = sigmoid(s * z)
    return -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))


def test_penalty_zero_logits():
    assert irm_penalty(np.zeros(7), np.array([0, 1, 1, 0, 1, 0, 1])) == 0.0


def test_penalty_single_sample():
    assert irm_penalty([1.0], [1]) == pytest.approx(PENALTY_LOGIT1, rel=1e-14)
    d = (sigmoid(1.0) - 1.0) * 1.0
    assert d == pytest.approx(D_LOGIT1, rel=1e-14)


def test_penalty_empty_batch():
    with pytest.raises(ValueError):
        irm_penalty([], [])


@given(st.integers(0, 2**32 - 1))
def test_penalty_order_invariant(seed):
    rng = np.random.default_rng(seed)
    z, y = rng.normal(size=50), rng.integers(0, 2, 50)
    perm = rng.permutation(50)
    assert irm_penalty(z, y) == pytest.approx(irm_penalty(z[perm], y[perm]), rel=1e-12)


def test_penalty_matches_finite_difference_in_scale(rng):
    h = 1e-5
    for _ in range(100):
        n = rng.integers(1, 64)
        z, y = rng.normal(scale=2.0, size=n), rng.integers(0, 2, n).astype(float)
        d = (_scaled_risk(1 + h, z, y) - _scaled_risk(1 - h, z, y)) / (2 * h)
        assert irm_penalty(z, y) == pytest.approx(d * d, abs=1e-6)


def test_penalty_gradient_matches_finite_differences(rng):
    h = 1e-6
    for _ in range(50):
        n = rng.integers(1, 32)
        z, y = rng.normal(scale=2.0, size=n), rng.integers(0, 2, n).astype(float)
        grad = irm_penalty_grad(z, y)
        num = np.empty(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            num[i] = (irm_penalty(z + e, y) - irm_penalty(z - e, y)) / (2 * h)
        np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-10)


def test_zero_logit_sample_has_zero_penalty_gradient():
    assert irm_penalty_grad([0.0], [1])[0] == 0.0
    assert irm_penalty_grad([0.0], [0])[0] == 0.0


def test_cell_gradients_match_expanded_batch(rng):
    """Gradients from cell counts equal gradients from the explicit samples."""
    env = ColoredMDP(EnvConfig())
    w = rng.normal(size=12)
    counts = env.sample_counts(0.8, 300, rng)
    idx = np.repeat(np.arange(40), counts.ravel())
    X, y = CELL_X[idx], CELL_Y[idx]
    z = X @ w
    bce_direct = (sigmoid(z) - y) @ X / len(y)
    pen_direct = irm_penalty_grad(z, y) @ X
    bce, pen = _weighted_grads(counts, w)
    np.testing.assert_allclose(bce, bce_direct, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(pen, pen_direct, rtol=1e-10, atol=1e-15)


def test_cell_counts_follow_the_sampler(rng):
    """Color/target agreement frequency of the summarized draws matches sample_batch."""
    env = ColoredMDP(EnvConfig())
    n = 200_000
    counts = env.sample_counts(0.9, n, rng)
    agree_counts = (counts[:, 1, 1].sum() + counts[:, 0, 0].sum()) / n
    batch = env.sample_batch(0.9, n, rng)
    agree_batch = np.mean(batch.green == batch.y)
    assert abs(agree_counts - 0.9) < 3 * np.sqrt(0.09 / n)
    assert abs(agree_batch - 0.9) < 3 * np.sqrt(0.09 / n)


def test_replay_ring_overwrites_oldest():
    buf = ReplayBuffer(3, 2)
    for i in range(5):
        replay_push(buf, (np.array([i, i]), i % 2))
    assert len(buf) == 3
    assert [int(o[0]) for o, _ in buf.items()] == [2, 3, 4]


def test_replay_sample_edges(rng):
    buf = ReplayBuffer(4, 1)
    assert replay_sample(buf, 0, rng) == []
    with pytest.raises(IndexError):
        replay_sample(buf, 1, rng)
    with pytest.raises(ValueError):
        ReplayBuffer(0, 1)


def test_replay_sample_is_uniform(rng):
    buf = ReplayBuffer(10, 1)
    for i in range(10):
        buf.push(np.array([i]), 0)
    draws = np.array([o[0] for o, _ in buf.sample(20_000, rng)])
    freq = np.bincount(draws, minlength=10)
    chi2 = np.sum((freq - 2000) ** 2 / 2000)
    assert chi2 < 27.88  # 0.999 quantile of chi-square with 9 dof


def test_online_step_matches_kernel(rng):
    env = ColoredMDP(EnvConfig(latent_switch_prob=0.01))
    traj = env.rollout(300, rng)
    X, y = traj.features(), traj.y
    cfg = online_irm_config(lr=1e-2, l1=1e-3)
    fast = online_irm_predictor(12)
    train_online(fast, X, y, cfg, irm_weight=10.0, irm_warmup=100)
    ref = online_irm_predictor(12)
    for t, (x, target) in enumerate(zip(X, y), 1):
        ref = online_irm_step(ref, (x, int(target)), cfg, 10.0, penalty_active=t > 100)
    np.testing.assert_allclose(fast.g, ref.g, rtol=1e-10, atol=1e-12)
    assert np.array_equal(fast.w, np.ones(12))


def test_online_step_descends_objective():
    p = online_irm_predictor(12)
    p.g[:] = 0.3
    x = np.zeros(12)
    x[[2, 10]] = 1
    cfg = online_irm_config(lr=1e-3)
    cfg.optimizer = "sgd"
    before = irm_objective(p, x, 1, 5.0)
    after = irm_objective(online_irm_step(p, (x, 1), cfg, 5.0), x, 1, 5.0)
    assert after < before


def test_oracle_irm_warmup_blocks_penalty():
    env = ColoredMDP(EnvConfig(seed=3))
    a = oracle_irm_train(env, IrmConfig(penalty_weight=1e4, warmup=50, iterations=50),
                         rng=np.random.default_rng(0))
    b = oracle_irm_train(env, IrmConfig(penalty_weight=0.0, warmup=50, iterations=50),
                         rng=np.random.default_rng(0))
    assert np.array_equal(a.g, b.g)
    c = oracle_irm_train(env, IrmConfig(penalty_weight=1e4, warmup=49, iterations=50),
                         rng=np.random.default_rng(0))
    assert not np.array_equal(a.g, c.g)


def test_oracle_irm_without_penalty_uses_color():
    env = ColoredMDP(EnvConfig(seed=1))
    p = oracle_irm_train(env, IrmConfig(penalty_weight=0.0, iterations=3000, lr=1e-2),
                         rng=np.random.default_rng(1))
    unseen = ColoredMDP(EnvConfig(seed=1).unseen())
    acc, _ = evaluate(unseen, p, 20_000, np.random.default_rng(2))
    assert acc == pytest.approx(0.10, abs=0.03)


def test_oracle_irm_requires_feature_mode():
    with pytest.raises(ValueError):
        oracle_irm_train(ColoredMDP(EnvConfig(mode="images")), IrmConfig(iterations=1))
    with pytest.raises(TypeError):
        oracle_irm_train(object(), IrmConfig(iterations=1))


def test_irm_config_validation():
    with pytest.raises(ValueError):
        IrmConfig(penalty_weight=-1)
    with pytest.raises(ValueError):
        IrmConfig(optimizer="rmsprop")
