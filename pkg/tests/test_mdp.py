import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from equistruct.group import make_cyclic_group
from equistruct.mdp import (
    ConvergenceError,
    MDPGroupAction,
    MDPSymmetryError,
    ReductionError,
    TabularMDP,
    TabularPolicy,
    build_homomorphism,
    check_mdp_symmetry,
    check_optimal_value_equivalence,
    compute_orbit,
    evaluate_policy,
    greedy_policy,
    identity_homomorphism,
    lift_policy,
    lifted_policy_invariance,
    mirror_mdp,
    reduce_mdp,
    ring_mdp,
    shipped_examples,
    state_orbits,
    trivial_action,
    value_iteration,
)
from equistruct.mdpfile import MDPFileError, format_mdp, parse_mdp, read_mdp, write_mdp


def test_mirror_closed_form():
    # R = 1 everywhere: V* = 1 / (1 - gamma)
    mdp, action = mirror_mdp(R=np.ones((2, 2)), gamma=0.5)
    hom = build_homomorphism(mdp, action)
    red = reduce_mdp(mdp, hom)
    assert red.n_states == 1 and red.n_actions == 2
    assert value_iteration(red, 1e-12).V[0] == pytest.approx(2.0, abs=1e-10)


@pytest.mark.parametrize("name", sorted(shipped_examples()))
def test_shipped_fixtures_are_equivalent(name):
    mdp, action = shipped_examples()[name]
    hom = build_homomorphism(mdp, action)
    report = check_optimal_value_equivalence(mdp, hom)
    assert report.ok, report.summary()
    assert report.n_abstract_states < mdp.n_states
    red = reduce_mdp(mdp, hom)
    lifted = lift_policy(greedy_policy(value_iteration(red, 1e-12).Q), hom)
    assert lifted_policy_invariance(lifted, action) <= 1e-12
    TabularPolicy(lifted)  # rows are distributions


def test_fixture_sizes():
    sizes = {}
    for name, (mdp, action) in shipped_examples().items():
        hom = build_homomorphism(mdp, action)
        sizes[name] = (hom.n_abstract_states, hom.n_abstract_actions)
    assert sizes == {"mirror": (1, 2), "ring4": (1, 3), "ring8": (2, 3), "corridor6": (3, 2)}


def test_broken_symmetry_reports_witness():
    mdp, action = mirror_mdp(R=[[1.0, 0.5], [0.0, 1.0]])
    report = check_mdp_symmetry(mdp, action)
    assert not report.ok() and report.witness == (0, 1, 1)
    with pytest.raises(MDPSymmetryError) as err:
        build_homomorphism(mdp, action)
    assert err.value.report.reward_residual == pytest.approx(0.5)


def test_trivial_group_gives_identity():
    mdp, _ = ring_mdp(4, 4)
    hom = build_homomorphism(mdp, trivial_action(4, 3))
    ident = identity_homomorphism(mdp)
    assert np.array_equal(hom.sigma, ident.sigma) and np.array_equal(hom.alpha, ident.alpha)
    red = reduce_mdp(mdp, hom)
    assert np.array_equal(red.R, mdp.R) and np.array_equal(red.T, mdp.T)


def test_group_action_validation():
    c2 = make_cyclic_group(2)
    with pytest.raises(ValueError):
        MDPGroupAction(c2, [[0, 1], [0, 0]], [[[0, 1]] * 2] * 2)
    with pytest.raises(ValueError):  # identity must act trivially
        MDPGroupAction(c2, [[1, 0], [0, 1]], [[[0, 1]] * 2] * 2)
    with pytest.raises(ValueError):
        TabularMDP(np.zeros((2, 2)), np.full((2, 2, 2), 0.6), 0.9)
    with pytest.raises(ValueError):
        TabularMDP(np.zeros((2, 2)), np.full((2, 2, 2), 0.5), 1.0)


def test_orbits():
    mdp, action = ring_mdp(8, 4)
    assert state_orbits(action) == [[0, 2, 4, 6], [1, 3, 5, 7]]
    assert compute_orbit(1, action) == frozenset({1, 3, 5, 7})
    assert compute_orbit((0, 1), action) == frozenset({(0, 1), (2, 1), (4, 1), (6, 1)})


def test_value_iteration_matches_policy_evaluation():
    mdp, _ = ring_mdp(8, 4)
    vi = value_iteration(mdp, 1e-12)
    np.testing.assert_allclose(evaluate_policy(mdp, greedy_policy(vi.Q)), vi.V, atol=1e-9)
    with pytest.raises(ConvergenceError):
        value_iteration(mdp, 1e-12, max_iters=3)


def test_non_uniform_abstract_action_counts_rejected():
    # state 0 is fixed by the swap (its two actions merge), states 1 and 2 are exchanged
    c2 = make_cyclic_group(2)
    action = MDPGroupAction(c2, [[0, 1, 2], [0, 2, 1]],
                            [[[0, 1]] * 3, [[1, 0], [0, 1], [0, 1]]])
    T = np.zeros((3, 2, 3))
    T[:, :, 0] = 1.0
    mdp = TabularMDP(np.zeros((3, 2)), T, 0.9)
    assert check_mdp_symmetry(mdp, action).ok()
    with pytest.raises(ValueError, match="abstract action counts"):
        build_homomorphism(mdp, action)


def _symmetrize_mdp(R, T, action):
    """Average R and T over the group so the action becomes a symmetry."""
    G = action.group.order
    Rs, Ts = np.zeros_like(R), np.zeros_like(T)
    for g in range(G):
        L, K = action.state_map[g], action.action_map[g]
        Rs += R[L[:, None], K]
        Ts += T[L[:, None, None], K[:, :, None], L[None, None, :]]
    return Rs / G, Ts / G


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([(4, 4), (8, 4), (8, 2), (6, 3)]), st.integers(0, 10_000),
       st.floats(0.1, 0.95))
def test_random_symmetric_mdps_reduce_exactly(sizes, seed, gamma):
    n, order = sizes
    _, action = ring_mdp(n, order)
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((n, 3))
    T = rng.dirichlet(np.ones(n), size=(n, 3))
    R, T = _symmetrize_mdp(R, T, action)
    mdp = TabularMDP(R, T, gamma)
    hom = build_homomorphism(mdp, action)
    report = check_optimal_value_equivalence(mdp, hom)
    assert report.ok, report.summary()


def test_reduction_gap_detected():
    mdp, action = mirror_mdp()
    hom = build_homomorphism(mdp, action)
    R = mdp.R.copy()
    R[1, 0] = 0.3
    broken = TabularMDP(R, mdp.T, mdp.gamma)
    with pytest.raises(ReductionError):
        reduce_mdp(broken, hom)


# --------------------------------------------------------------------------
# file format

def test_file_round_trip(tmp_path):
    for mdp, action in shipped_examples().values():
        path = tmp_path / "m.mdp"
        write_mdp(path, mdp, action)
        back, back_action = read_mdp(path)
        assert np.array_equal(back.R, mdp.R) and np.array_equal(back.T, mdp.T)
        assert back.gamma == mdp.gamma
        assert np.array_equal(back_action.state_map, action.state_map)
        assert np.array_equal(back_action.action_map, action.action_map)


def test_parse_cyclic_group_and_comments():
    text = """# mirrored pair
    states 2
    actions 2
    gamma 0.9
    R
    1 0
    0 1
    T 0
    0.9 0.1
    0.3 0.7
    T 1
    0.7 0.3
    0.1 0.9
    group cyclic 2
    element 1
    states 1 0
    actions 0 1 0
    actions 1 1 0
    """
    mdp, action = parse_mdp(text)
    ref, ref_action = mirror_mdp()
    assert np.array_equal(mdp.T, ref.T)
    assert np.array_equal(action.action_map, ref_action.action_map)


@pytest.mark.parametrize("text,fragment", [
    ("states 2\nactions 2\nR\n1 0\n0 1\n", "gamma"),
    ("states 2\nactions 2\ngamma 0.9\nR\n1 0\n0 1 2\n", "expected 2 numbers"),
    ("states 1\nactions 1\ngamma 0.9\nR\n1\n", "missing T"),
    ("states 1\nactions 1\ngamma 0.9\nR\n1\nT 0\n1\nelement 1\n", "before 'group'"),
    ("states 1\nactions 1\ngamma 0.9\nbogus 3\n", "unexpected keyword"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(MDPFileError, match=fragment):
        parse_mdp(text)


def test_format_without_group():
    mdp, _ = mirror_mdp()
    text = format_mdp(mdp)
    assert "group" not in text
    assert parse_mdp(text)[1] is None
