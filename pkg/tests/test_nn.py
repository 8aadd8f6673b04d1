import numpy as np
import pytest

from equistruct.nn import (
    ARCHS,
    build_network,
    check_network_equivariance,
    load_checkpoint,
    sample_states,
    save_checkpoint,
    softmax,
)

PARAMS = {
    ("mlp_cartpole", "equivariant"): 12928,
    ("mlp_cartpole", "nullspace"): 12864,
    ("mlp_cartpole", "random"): 25792,
    ("plain_mlp", "equivariant"): 13093,
    ("cnn_gridworld", "equivariant"): 36112,
    ("cnn_gridworld", "nullspace"): 106800,
    ("cnn_gridworld", "random"): 142912,
    ("plain_cnn", "equivariant"): 33606,
}


@pytest.mark.parametrize("arch,variant", sorted(PARAMS))
def test_parameter_counts(arch, variant):
    assert build_network(arch, variant).num_parameters == PARAMS[(arch, variant)]


def test_published_mlp_widths():
    assert build_network("plain_mlp", hidden=(64, 128)).num_parameters == 9027
    assert build_network("plain_mlp", hidden=(64, 64)).num_parameters == 4675


@pytest.mark.parametrize("arch", ["mlp_cartpole", "cnn_gridworld"])
def test_equivariant_networks(arch):
    net = build_network(arch, seed=3)
    assert check_network_equivariance(net, n_states=200) <= 1e-6


@pytest.mark.parametrize("arch,variant", [("mlp_cartpole", "nullspace"), ("mlp_cartpole", "random"),
                                          ("plain_mlp", "equivariant"), ("cnn_gridworld", "random"),
                                          ("plain_cnn", "equivariant")])
def test_baselines_are_not_equivariant(arch, variant):
    assert check_network_equivariance(build_network(arch, variant), n_states=64) > 1e-3


def test_outputs_and_backward_shapes():
    for arch in ARCHS:
        net = build_network(arch)
        obs = sample_states(net.env_id, 3, np.random.default_rng(0))
        logits, values = net.forward(obs)
        assert logits.shape == (3, net.num_actions) and values.shape == (3,)
        net.backward(np.ones_like(logits), np.ones_like(values))
        assert all(p.shape == g.shape for p, g in zip(net.params, net.grads))
        np.testing.assert_allclose(net.policy(obs).sum(axis=1), 1.0)


def test_softmax_is_stable():
    p = softmax(np.array([[1000.0, 0.0], [-1000.0, -1000.0]]))
    np.testing.assert_allclose(p, [[1.0, 0.0], [0.5, 0.5]])


def test_seeded_construction_is_deterministic():
    a, b = build_network("cnn_gridworld", seed=7), build_network("cnn_gridworld", seed=7)
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))


def test_checkpoint_round_trip(tmp_path):
    net = build_network("mlp_cartpole", "nullspace", seed=2)
    for p in net.params:
        p += 0.01
    path = tmp_path / "net.npz"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    obs = sample_states("cartpole", 5, np.random.default_rng(1))
    np.testing.assert_array_equal(back.forward(obs)[0], net.forward(obs)[0])
    assert back.variant == "nullspace"


def test_unknown_arch_and_variant():
    with pytest.raises(ValueError):
        build_network("resnet")
    with pytest.raises(ValueError):
        build_network("mlp_cartpole", "diagonal")
    with pytest.raises(ValueError):
        build_network("mlp_cartpole", depth=0)
