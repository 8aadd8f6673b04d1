import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from equistruct.group import (
    RepresentationPair,
    SpatialRepresentation,
    make_cyclic_group,
    permutation_representation,
    regular_representation,
    trivial_representation,
)
from equistruct.nn import _layer_pair
from equistruct.symmetrizer import (
    WeightShape,
    build_basis,
    equivariance_residual,
    orthonormality_residual,
    symmetrize,
)
from equistruct.verify import _augmented_pair, constraint_nullity


def swap_pair():
    c2 = make_cyclic_group(2)
    swap = permutation_representation(c2, [[0, 1], [1, 0]])
    return RepresentationPair(swap, swap)


def test_symmetrize_worked_example():
    S = symmetrize(np.array([[1.0, 2.0], [3.0, 5.0]]), swap_pair())
    np.testing.assert_allclose(S, [[3.0, 2.5], [2.5, 3.0]])


def test_residual_of_non_equivariant_matrix():
    assert equivariance_residual(np.array([[1.0, 0.0], [0.0, 0.0]]), swap_pair()) == 1.0


def test_swap_ranks():
    shape = WeightShape(2, 2, bias=False)
    ranks = {v: build_basis(swap_pair(), shape, v).rank for v in ("equivariant", "nullspace", "random")}
    assert ranks == {"equivariant": 2, "nullspace": 2, "random": 4}


reps = st.sampled_from(["regular", "trivial", "trivial2", "spatial"])


def _rep(kind, n):
    g = make_cyclic_group(n)
    if kind == "regular":
        return regular_representation(g), None
    if kind == "trivial":
        return trivial_representation(g), None
    if kind == "trivial2":
        return trivial_representation(g, 2), None
    return SpatialRepresentation(regular_representation(g), (2, 2)), (2, 2)


@st.composite
def pairs(draw):
    n = draw(st.sampled_from([1, 2, 3, 4]))
    kind = draw(reps)
    if kind == "spatial":
        n = 4  # quarter turns only represent the cyclic group of order 4
    rin, spatial = _rep(kind, n)
    rout, _ = _rep(draw(reps.filter(lambda k: k != "spatial")), n)
    bias = draw(st.booleans())
    d_in = rin.fiber.dim if spatial else rin.dim
    return RepresentationPair(rin, rout), WeightShape(rout.dim, d_in, spatial, bias=bias)


@settings(max_examples=40, deadline=None)
@given(pairs(), st.integers(0, 2**31 - 1))
def test_symmetrizer_properties(ps, seed):
    pair, shape = ps
    aug = _augmented_pair(pair, shape)
    W = np.random.default_rng(seed).standard_normal((3, *shape.matrix_shape))
    S = symmetrize(W, aug)
    assert equivariance_residual(S, aug) <= 1e-10  # symmetric
    assert np.abs(symmetrize(S, aug) - S).max() <= 1e-12  # idempotent
    # linear
    np.testing.assert_allclose(symmetrize(2 * W[0] - W[1], aug), 2 * S[0] - S[1], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(pairs())
def test_basis_rank_matches_constraint_nullity(ps):
    pair, shape = ps
    eq = build_basis(pair, shape)
    null = build_basis(pair, shape, "nullspace")
    assert eq.rank == constraint_nullity(pair, shape)
    assert eq.rank + null.rank == shape.size
    assert orthonormality_residual(eq.vectors) < 1e-10
    if eq.rank and null.rank:
        cross = eq.vectors.reshape(eq.rank, -1) @ null.vectors.reshape(null.rank, -1).T
        assert np.abs(cross).max() < 1e-10
    for v in eq.vectors:
        assert equivariance_residual(v, eq.pair) < 1e-10
        # fixing: equivariant weights are left unchanged
        assert np.abs(symmetrize(v, eq.pair) - v).max() < 1e-10


def test_rank_independent_of_seed_and_sample_count():
    pair, shape = _layer_pair("gridworld", "hidden")
    ranks = {build_basis(pair, shape, seed=s).rank for s in range(10)}
    ranks |= {build_basis(pair, shape, num_samples=shape.size + 50).rank}
    assert ranks == {constraint_nullity(pair, shape)}


def test_shipped_layer_ranks():
    assert build_basis(*_layer_pair("cartpole", "first")).rank == 5
    assert build_basis(*_layer_pair("gridworld", "conv1")).rank == 50
    assert build_basis(*_layer_pair("gridworld", "conv2")).rank == 101


def test_same_seed_same_basis():
    a = build_basis(*_layer_pair("cartpole", "hidden"), seed=3)
    b = build_basis(*_layer_pair("cartpole", "hidden"), seed=3)
    assert a.fingerprint() == b.fingerprint()


def test_random_basis_is_full_rank_and_not_equivariant():
    pair, shape = _layer_pair("cartpole", "first")
    basis = build_basis(pair, shape, "random")
    assert basis.rank == shape.size
    assert orthonormality_residual(basis.vectors) < 1e-10
    assert max(equivariance_residual(v, basis.pair) for v in basis.vectors) > 1e-3


def test_conv1_filters_are_rotated_copies():
    basis = build_basis(*_layer_pair("gridworld", "conv1"))
    f = basis.as_filters()  # (rank, 4, 1, 7, 7)
    for i in range(basis.rank):
        for g in range(4):
            np.testing.assert_allclose(f[i, (g + 1) % 4, 0], np.rot90(f[i, g, 0], k=-1), atol=1e-12)


def test_errors():
    pair, shape = _layer_pair("cartpole", "first")
    with pytest.raises(ValueError):
        build_basis(pair, shape, num_samples=shape.size - 1)
    with pytest.raises(ValueError):
        build_basis(pair, shape, "bogus")
    with pytest.raises(ValueError):
        symmetrize(np.zeros((3, 3)), pair)
    with pytest.raises(ValueError):
        build_basis(pair, WeightShape(3, 4))


def test_trivial_group_keeps_everything():
    g = make_cyclic_group(1)
    pair = RepresentationPair(trivial_representation(g, 3), trivial_representation(g, 3))
    assert build_basis(pair, WeightShape(3, 3, bias=False)).rank == 9
    assert build_basis(pair, WeightShape(3, 3, bias=False), "nullspace").rank == 0
