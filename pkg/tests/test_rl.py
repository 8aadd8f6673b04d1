import math

import numpy as np
import pytest

from equistruct.envs import VecEnv
from equistruct.nn import build_network, check_network_equivariance
from equistruct.rl import (
    AdamState,
    Rollout,
    TrainConfig,
    TrainingDivergedError,
    a2c_loss,
    a2c_update,
    adam_step,
    best_lr,
    collect_rollouts,
    evaluate,
    first_crossing,
    make_head,
    nstep_returns,
    sweep_lr,
    train,
    write_curve_csv,
)
from equistruct.verify import a2c_grad_error


def test_nstep_returns_closed_form():
    r = np.array([[1.0], [2.0], [3.0]])
    d = np.zeros((3, 1))
    out = nstep_returns(r, d, np.array([10.0]), 0.5)
    np.testing.assert_allclose(out[:, 0], [1 + 0.5 * 2 + 0.25 * 3 + 0.125 * 10, 2 + 0.5 * 3 + 0.25 * 10, 3 + 0.5 * 10])
    d[1] = 1.0  # episode ends after the second step
    out = nstep_returns(r, d, np.array([10.0]), 0.5)
    np.testing.assert_allclose(out[:, 0], [1 + 0.5 * 2, 2, 3 + 5])


def test_adam_first_step_is_sign_times_lr():
    p = [np.array([1.0, -2.0, 3.0])]
    g = [np.array([0.5, -1e-3, 100.0])]
    state = AdamState.zeros_like(p)
    adam_step(p, g, state, lr=0.1)
    np.testing.assert_allclose(p[0], [0.9, -1.9, 2.9], atol=1e-6)


def test_adam_zero_gradient_and_determinism():
    p = [np.ones(3)]
    state = AdamState.zeros_like(p)
    adam_step(p, [np.ones(3)], state, 0.1)
    m_before, v_before = state.m[0].copy(), state.v[0].copy()
    snapshot = p[0].copy()
    a, b = [p[0].copy()], [p[0].copy()]
    sa, sb = state.copy(), state.copy()
    adam_step(a, [np.zeros(3)], sa, 0.1)
    adam_step(b, [np.zeros(3)], sb, 0.1)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_allclose(sa.m[0], 0.9 * m_before)
    np.testing.assert_allclose(sa.v[0], 0.999 * v_before)
    assert np.array_equal(p[0], snapshot)
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(2)], AdamState.zeros_like(p), 0.1)


def test_rollout_shapes_and_cartpole_rewards():
    net = build_network("mlp_cartpole", seed=0)
    ro = collect_rollouts(net, VecEnv("cartpole", 16, 0), 5, np.random.default_rng(0))
    assert ro.actions.shape == (5, 16) and ro.actions.size == 80
    assert ro.obs.shape == (5, 16, 4) and ro.last_values.shape == (16,)
    assert np.all(ro.rewards == 1.0)
    assert np.all(np.isfinite(ro.log_probs))


def test_rollouts_reproducible_given_seed():
    net = build_network("cnn_gridworld", seed=0)
    a = collect_rollouts(net, VecEnv("gridworld", 4, 0), 6, np.random.default_rng(3))
    b = collect_rollouts(net, VecEnv("gridworld", 4, 0), 6, np.random.default_rng(3))
    assert np.array_equal(a.actions, b.actions) and np.array_equal(a.rewards, b.rewards)


def test_deterministic_policy_reproducible():
    net = build_network("plain_mlp", seed=0)
    for p in net.policy_head.params:
        p[...] = 0.0
    net.policy_head.bias[:] = [50.0, -50.0]  # one-hot policy on action 0
    ro = collect_rollouts(net, VecEnv("cartpole", 2, 0), 4, np.random.default_rng(0))
    assert np.all(ro.actions == 0)


def test_rollout_validates_shapes():
    with pytest.raises(ValueError):
        Rollout(np.zeros((2, 3, 4)), np.zeros((2, 3), int), np.zeros((2, 3)), np.zeros((2, 3)),
                np.zeros((2, 2)), np.zeros((2, 3)), np.zeros(3), np.zeros((3, 4)))


def _batch(seed=0, n=6):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 4)), rng.integers(2, size=n), rng.standard_normal(n), rng.standard_normal(n)


def test_zero_advantage_gives_zero_policy_gradient():
    net = build_network("mlp_cartpole", seed=1)
    obs, act, _, ret = _batch()
    cfg = TrainConfig(entropy_coef=0.0, value_coef=0.0)
    report = a2c_loss(net, obs, act, np.zeros(6), ret, cfg)
    assert report.policy_loss == 0.0
    assert all(np.abs(g).max() == 0.0 for g in net.grads)


@pytest.mark.parametrize("augment,clip", [("none", None), ("averaged", None), ("none", 0.2)])
def test_loss_gradient_matches_finite_differences(augment, clip):
    assert a2c_grad_error(0, augment, clip) <= 1e-4


def test_update_preserves_equivariance():
    cfg = TrainConfig(lr=0.05)
    net = build_network("mlp_cartpole", seed=0)
    envs = VecEnv("cartpole", 16, 0)
    rng = np.random.default_rng(0)
    adam = AdamState.zeros_like(net.params)
    obs = envs.reset()
    for _ in range(20):
        ro = collect_rollouts(net, envs, 5, rng, obs)
        obs = ro.next_obs
        a2c_update(net, ro, cfg, adam, rng)
    assert check_network_equivariance(net, n_states=200) <= 1e-6


def test_averaged_head_is_equivariant_for_plain_networks():
    for arch in ("plain_mlp", "plain_cnn"):
        net = build_network(arch, seed=0)
        assert check_network_equivariance(net, n_states=32) > 1e-3
        res = check_network_equivariance(
            net, n_states=64,
            policy_fn=lambda s: np.exp(make_head(net, s, "averaged").logp),
            value_fn=lambda s: make_head(net, s, "averaged").values)
        assert res <= 1e-6


def test_stochastic_augmentation_update_runs():
    cfg = TrainConfig(variant="plain", augment="stochastic", clip_eps=0.2, update_epochs=2)
    net = build_network("plain_mlp", seed=0)
    ro = collect_rollouts(net, VecEnv("cartpole", 4, 0), 5, np.random.default_rng(0))
    report = a2c_update(net, ro, cfg, AdamState.zeros_like(net.params), np.random.default_rng(0))
    assert math.isfinite(report.total)


def test_nan_loss_aborts():
    net = build_network("plain_mlp", seed=0)
    obs, act, adv, ret = _batch()
    with pytest.raises(TrainingDivergedError):
        a2c_loss(net, obs, act, adv, ret * np.nan, TrainConfig())


def test_config_validation():
    for bad in (dict(lr=0.0), dict(gamma=1.0), dict(augment="mixup"), dict(variant="big"),
                dict(env="pong"), dict(n_envs=0), dict(clip_eps=-1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig(env="gridworld", variant="plain").arch == "plain_cnn"
    assert "entropy_coef" in TrainConfig.keys()


def test_train_is_deterministic(tmp_path):
    cfg = TrainConfig(total_steps=800, eval_interval=400, eval_episodes=3, seed=4)
    a = train(cfg, tmp_path / "a.csv", check_equivariance=True)
    b = train(cfg, check_equivariance=True)
    assert a == b
    assert [r["env_steps"] for r in a] == [0, 400, 800]
    assert max(r["equivariance_residual"] for r in a) <= 1e-6
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "variant,seed,lr,env_steps,return_p25,return_p50,return_p75"
    assert len(lines) == 4


def test_evaluate_runs_fixed_number_of_episodes():
    net = build_network("cnn_gridworld", seed=0)
    returns = evaluate(net, episodes=4, seed=0)
    assert returns.shape == (4,)
    assert np.all(returns <= 1.0) and np.all(returns >= -10.0 - 1e-9)


def test_sweep_and_best_lr(tmp_path):
    cfg = TrainConfig(total_steps=160, eval_interval=160, eval_episodes=2)
    res = sweep_lr(cfg, lrs=(0.01, 0.001), seeds=(0, 1), csv_path=tmp_path / "s.csv")
    assert set(res) == {0.01, 0.001} and all(len(v) == 2 for v in res.values())
    assert best_lr(res) in res
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 1 + 2 * 2 * 2


def test_first_crossing():
    c1 = [dict(env_steps=0, return_p50=10), dict(env_steps=100, return_p50=450)]
    c2 = [dict(env_steps=0, return_p50=10), dict(env_steps=100, return_p50=300),
          dict(env_steps=200, return_p50=420)]
    c3 = [dict(env_steps=0, return_p50=500)]
    assert first_crossing([c1, c2], 400) == 200
    assert first_crossing([c1, c2, c3], 400) == 100
    assert first_crossing([c2], 500) == math.inf


def test_write_curve_csv_append(tmp_path):
    row = dict(variant="plain", seed=0, lr=0.1, env_steps=0, return_p25=1, return_p50=2, return_p75=3, extra=9)
    write_curve_csv(tmp_path / "c.csv", [row])
    write_curve_csv(tmp_path / "c.csv", [row], append=True)
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 3
