"""Property suites behind ``equistruct verify``.

Each suite returns a list of :class:`PropertyResult` rows (name, measured
residual, tolerance). The brute-force oracle for basis ranks solves the
stacked linear constraints ``K_g W - W L_g = 0`` directly with
``scipy.linalg.null_space``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import null_space

from .envs import (
    CartPoleState,
    GridWorldState,
    apply_env_transform,
    cartpole_step,
    gridworld_step,
    make_env,
    observe,
    transform_action,
)
from .group import (
    RepresentationPair,
    SpatialRepresentation,
    augment_bias,
    make_cyclic_group,
    permutation_representation,
    regular_representation,
    trivial_representation,
)
from .layers import BasisConv, BasisLinear, ReLU, init_layer
from .mdp import (
    _reduce,
    build_homomorphism,
    check_optimal_value_equivalence,
    lift_policy,
    lifted_policy_invariance,
    greedy_policy,
    reduce_mdp,
    shipped_examples,
    value_iteration,
)
from .nn import _layer_pair, build_network, check_network_equivariance, sample_states
from .symmetrizer import (
    WeightShape,
    build_basis,
    equivariance_residual,
    orthonormality_residual,
    symmetrize,
)

__all__ = [
    "PropertyResult",
    "SUITES",
    "run_suite",
    "format_results",
    "shipped_pairs",
    "constraint_nullity",
    "relative_error",
    "finite_difference_grads",
    "symmetrizer_suite",
    "basis_suite",
    "layers_suite",
    "network_suite",
    "mdp_suite",
    "envs_suite",
    "coupled_trajectory_gap",
]


@dataclass(frozen=True)
class PropertyResult:
    suite: str
    name: str
    residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.residual <= self.tol)


LAYERS = {
    "cartpole": ("first", "hidden", "policy", "value"),
    "gridworld": ("conv1", "conv2", "hidden", "policy", "value"),
}


def _toy_pairs() -> list[tuple[RepresentationPair, WeightShape]]:
    c2 = make_cyclic_group(2)
    swap = permutation_representation(c2, [[0, 1], [1, 0]], name="swap")
    c3, c4 = make_cyclic_group(3), make_cyclic_group(4)
    out = []
    for rin, rout, spatial in (
        (swap, swap, None),
        (regular_representation(c3), regular_representation(c3), None),
        (regular_representation(c4), trivial_representation(c4), None),
        (trivial_representation(c4), regular_representation(c4), None),
        (SpatialRepresentation(trivial_representation(c4), (3, 3)), regular_representation(c4), (3, 3)),
        (SpatialRepresentation(regular_representation(c4), (2, 2)), regular_representation(c4), (2, 2)),
    ):
        d_in = rin.fiber.dim if spatial else rin.dim
        name = f"C{rin.group.order}/{rin.name or 'spatial'}->{rout.name}"
        for bias in (True, False):
            out.append((RepresentationPair(rin, rout, name=name + ("+b" if bias else "")),
                        WeightShape(rout.dim, d_in, spatial, bias=bias)))
    return out


def shipped_pairs(include_toys: bool = True) -> list[tuple[RepresentationPair, WeightShape]]:
    """Every layer pair used by the shipped networks (and a few small extras)."""
    pairs = [_layer_pair(env, layer) for env, layers in LAYERS.items() for layer in layers]
    return pairs + (_toy_pairs() if include_toys else [])


def _augmented_pair(pair: RepresentationPair, shape: WeightShape) -> RepresentationPair:
    if not shape.bias:
        return pair
    return RepresentationPair(augment_bias(pair.rep_in), pair.rep_out, name=pair.name)


def constraint_nullity(pair: RepresentationPair, shape: WeightShape) -> int:
    """Dimension of ``{W : K_g W = W L_g for all g}`` by direct null-space computation."""
    aug = _augmented_pair(pair, shape)
    K, L = aug.rep_out.matrices, aug.rep_in.matrices
    n, m = K.shape[1], L.shape[1]
    rows = [np.kron(K[g], np.eye(m)) - np.kron(np.eye(n), L[g].T) for g in range(aug.group.order)]
    return null_space(np.vstack(rows), rcond=1e-10).shape[1]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), 1e-12)
    return float(np.abs(a - b).max(initial=0.0)) / scale


def finite_difference_grads(params: list[np.ndarray], loss: Callable[[], float],
                            eps: float = 1e-6) -> list[np.ndarray]:
    """Central differences of ``loss`` with respect to every entry of ``params``."""
    out = []
    for p in params:
        fd = np.zeros_like(p)
        flat, fflat = p.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss()
            flat[i] = orig - eps
            lo = loss()
            flat[i] = orig
            fflat[i] = (hi - lo) / (2 * eps)
        out.append(fd)
    return out


# --------------------------------------------------------------------------
# Suites

def symmetrizer_suite(n_weights: int = 100, seed: int = 0) -> list[PropertyResult]:
    rng = np.random.default_rng(seed)
    sym = fix = idem = 0.0
    for pair, shape in shipped_pairs():
        aug = _augmented_pair(pair, shape)
        W = rng.standard_normal((n_weights, *shape.matrix_shape))
        S = symmetrize(W, aug)
        SS = symmetrize(S, aug)
        sym = max(sym, equivariance_residual(S, aug))
        idem = max(idem, float(np.abs(SS - S).max()))
        # equivariant weights built independently from the basis are fixed points
        basis = build_basis(pair, shape)
        if basis.rank:
            E = np.tensordot(rng.standard_normal((n_weights, basis.rank)), basis.vectors, axes=(1, 0))
            fix = max(fix, float(np.abs(symmetrize(E, aug) - E).max()))
    return [
        PropertyResult("symmetrizer", "symmetric: K_g S(W) = S(W) L_g", sym, 1e-10),
        PropertyResult("symmetrizer", "fixing: S(W) = W for equivariant W", fix, 1e-10),
        PropertyResult("symmetrizer", "idempotence: S(S(W)) = S(W)", idem, 1e-12),
    ]


def basis_suite(max_dim: int = 64, seeds: int = 10) -> list[PropertyResult]:
    rank_gap = seed_gap = ortho = cross = sum_gap = eq_res = 0.0
    checked = 0
    for pair, shape in shipped_pairs():
        if shape.size > max_dim:
            continue
        checked += 1
        ranks = []
        for s in range(seeds):
            eq = build_basis(pair, shape, "equivariant", seed=s)
            ranks.append(eq.rank)
        eq = build_basis(pair, shape, "equivariant", seed=0)
        null = build_basis(pair, shape, "nullspace", seed=0)
        oracle = constraint_nullity(pair, shape)
        rank_gap = max(rank_gap, abs(eq.rank - oracle))
        seed_gap = max(seed_gap, max(ranks) - min(ranks))
        ortho = max(ortho, orthonormality_residual(eq.vectors), orthonormality_residual(null.vectors))
        if eq.rank and null.rank:
            cross = max(cross, float(np.abs(eq.vectors.reshape(eq.rank, -1)
                                            @ null.vectors.reshape(null.rank, -1).T).max()))
        sum_gap = max(sum_gap, abs(eq.rank + null.rank - shape.size))
        for v in eq.vectors:
            eq_res = max(eq_res, equivariance_residual(v, eq.pair))
    return [
        PropertyResult("basis", f"rank = constraint nullity ({checked} shapes)", rank_gap, 0),
        PropertyResult("basis", f"rank identical across {seeds} seeds", seed_gap, 0),
        PropertyResult("basis", "bases orthonormal", ortho, 1e-10),
        PropertyResult("basis", "equivariant ⊥ nullspace", cross, 1e-10),
        PropertyResult("basis", "rank(eq) + rank(null) = dim", sum_gap, 0),
        PropertyResult("basis", "basis vectors equivariant", eq_res, 1e-10),
        PropertyResult("basis", "cartpole first layer rank = 5",
                       abs(build_basis(*_layer_pair("cartpole", "first")).rank - 5), 0),
    ]


def _small_basis_net(seed: int = 0):
    pair, shape = _layer_pair("cartpole", "first")
    first = build_basis(pair, shape)
    hidden = build_basis(*_layer_pair("cartpole", "hidden"))
    rng = np.random.default_rng(seed)
    return [init_layer(first, 1, 3, "xavier", rng), ReLU(), init_layer(hidden, 3, 2, "xavier", rng)]


def _small_conv_net(seed: int = 0):
    c4 = make_cyclic_group(4)
    reg = regular_representation(c4)
    p1 = RepresentationPair(SpatialRepresentation(trivial_representation(c4), (3, 3)), reg)
    p2 = RepresentationPair(SpatialRepresentation(reg, (3, 3)), reg)
    b1 = build_basis(p1, WeightShape(4, 1, (3, 3)))
    b2 = build_basis(p2, WeightShape(4, 4, (3, 3)))
    rng = np.random.default_rng(seed)
    return [init_layer(b1, 1, 2, "he", rng, stride=2), ReLU(), init_layer(b2, 2, 2, "he", rng)]


def _layer_stack_grad_error(layers, x: np.ndarray, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)

    def run():
        h = x
        for m in layers:
            h = m.forward(h)
        return h

    target = rng.standard_normal(run().shape)

    def loss():
        return float((run() * target).sum())

    loss()
    dh = target
    for m in reversed(layers):
        dh = m.backward(dh)
    params = [p for m in layers for p in m.params]
    analytic = [g.copy() for m in layers for g in m.grads]
    numeric = finite_difference_grads(params, loss)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def layers_suite(seed: int = 0) -> list[PropertyResult]:
    rng = np.random.default_rng(seed)
    mlp = _small_basis_net(seed)
    x = rng.standard_normal((5, 1, 4))
    mlp_err = _layer_stack_grad_error(mlp, x, seed)
    conv = _small_conv_net(seed)
    conv_err = _layer_stack_grad_error(conv, rng.standard_normal((2, 1, 1, 9, 9)), seed)

    # layer-level equivariance of a single random basis layer
    pair, shape = _layer_pair("gridworld", "conv2")
    layer = init_layer(build_basis(pair, shape), 2, 3, "he", rng)
    z = rng.standard_normal((4, 2, 4, 5, 5))
    y = layer.forward(z)
    eq = 0.0
    for g in range(4):
        zg = pair.rep_in.act(g, z.reshape(4, 2, -1)).reshape(z.shape)
        yg = pair.rep_out.act(g, y.reshape(4, 3, 4)).reshape(y.shape)
        eq = max(eq, float(np.abs(layer.forward(zg) - yg).max()))
    return [
        PropertyResult("layers", "BasisLinear 2-layer gradient vs finite differences", mlp_err, 1e-5),
        PropertyResult("layers", "BasisConv 2-layer gradient vs finite differences", conv_err, 1e-5),
        PropertyResult("layers", "BasisConv layer equivariance", eq, 1e-10),
    ]


def network_equivariance(net, n_states: int = 1000, seed: int = 0, chunk: int = 250) -> float:
    states = sample_states(net.env_id, n_states, np.random.default_rng(seed))
    return max(check_network_equivariance(net, states=states[i:i + chunk])
               for i in range(0, n_states, chunk))


def a2c_grad_error(seed: int = 0, augment: str = "none", clip_eps: float | None = None) -> float:
    from .rl import TrainConfig, a2c_loss, make_head

    cfg = TrainConfig(augment=augment, clip_eps=clip_eps)
    net = build_network("mlp_cartpole", width_divisor=16, seed=seed)
    rng = np.random.default_rng(seed)
    obs = rng.standard_normal((8, 4))
    act = rng.integers(2, size=8)
    adv, ret = rng.standard_normal(8), rng.standard_normal(8)
    old = make_head(net, obs).logp[np.arange(8), act] + rng.normal(0, 0.3, 8)
    a2c_loss(net, obs, act, adv, ret, cfg, old_log_probs=old)
    analytic = [g.copy() for g in net.grads]
    numeric = finite_difference_grads(
        net.params, lambda: a2c_loss(net, obs, act, adv, ret, cfg, old_log_probs=old, backward=False).total)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def network_suite(n_states: int = 1000, seed: int = 0) -> list[PropertyResult]:
    out = []
    for arch in ("mlp_cartpole", "cnn_gridworld"):
        net = build_network(arch, seed=seed)
        out.append(PropertyResult("network", f"{arch} policy equivariance / value invariance",
                                  network_equivariance(net, n_states, seed), 1e-6))
    for aug, clip in (("none", None), ("averaged", None), ("none", 0.2)):
        label = f"A2C loss gradient vs finite differences (augment={aug}, clip={clip})"
        out.append(PropertyResult("network", label, a2c_grad_error(seed, aug, clip), 1e-4))
    return out


def mdp_suite() -> list[PropertyResult]:
    out = []
    for name, (mdp, action) in shipped_examples().items():
        hom = build_homomorphism(mdp, action)
        red_gap = _reduce(mdp, hom)[2]
        rep = check_optimal_value_equivalence(mdp, hom)
        abstract = reduce_mdp(mdp, hom)
        lifted = lift_policy(greedy_policy(value_iteration(abstract, 1e-12).Q), hom)
        out += [
            PropertyResult("mdp", f"{name}: reduction well-defined", red_gap, 1e-10),
            PropertyResult("mdp", f"{name}: V* and Q* equivalence", max(rep.value_gap, rep.q_gap), 1e-8),
            PropertyResult("mdp", f"{name}: lifted greedy policy optimal", rep.lifted_policy_gap, 1e-8),
            PropertyResult("mdp", f"{name}: lifted policy invariance", lifted_policy_invariance(lifted, action), 1e-12),
        ]
    return out


def coupled_trajectory_gap(env_id: str, g: int, steps: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Run an env and its ``g``-rotated twin on shared seeds for ``steps`` steps.

    Returns the largest observation and reward differences between the
    transformed original trajectory and the twin's trajectory.
    """
    base, twin = make_env(env_id, seed, frame=0), make_env(env_id, seed, frame=g)
    act_rng = np.random.default_rng(seed + 1)
    o, ot = base.reset(), twin.reset()
    obs_gap = float(np.abs(apply_env_transform(env_id, g, o) - ot).max())
    rew_gap = 0.0
    n_actions = base.num_actions
    for _ in range(steps):
        a = int(act_rng.integers(n_actions))
        o, r, d = base.step(a)
        ot, rt, dt = twin.step(transform_action(env_id, g, a))
        obs_gap = max(obs_gap, float(np.abs(apply_env_transform(env_id, g, o) - ot).max()))
        # the underlying states match too, not only the egocentric images
        obs_gap = max(obs_gap, _state_gap(apply_env_transform(env_id, g, base.state), twin.state))
        rew_gap = max(rew_gap, abs(r - rt), float(d != dt))
        if d:
            o, ot = base.reset(), twin.reset()
    return obs_gap, rew_gap


def _state_gap(a, b) -> float:
    if isinstance(a, CartPoleState):
        return float(np.abs(a.vector() - b.vector()).max())
    return float(a != b)


def envs_suite(steps: int = 1000, seed: int = 0) -> list[PropertyResult]:
    out = []
    for env_id, order in (("cartpole", 2), ("gridworld", 4)):
        worst_obs = worst_rew = 0.0
        for g in range(order):
            o, r = coupled_trajectory_gap(env_id, g, steps, seed)
            worst_obs, worst_rew = max(worst_obs, o), max(worst_rew, r)
        out += [
            PropertyResult("envs", f"{env_id}: coupled trajectories, state difference", worst_obs, 0.0),
            PropertyResult("envs", f"{env_id}: coupled trajectories, reward difference", worst_rew, 0.0),
        ]
    out.append(PropertyResult("envs", "pure transitions commute with the group",
                              _transition_commutation(seed), 0.0))
    return out


def _transition_commutation(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(200):
        s = CartPoleState(*rng.uniform(-0.1, 0.1, 4))
        a = int(rng.integers(2))
        for g in range(2):
            lhs, r1, _ = cartpole_step(apply_env_transform("cartpole", g, s), transform_action("cartpole", g, a))
            rhs, r2, _ = cartpole_step(s, a)
            worst = max(worst, _state_gap(lhs, apply_env_transform("cartpole", g, rhs)), abs(r1 - r2))
        gs = GridWorldState(tuple(rng.integers(7, size=2)), tuple(rng.integers(7, size=2)))
        if gs.agent == gs.prey:
            continue
        a = int(rng.integers(5))
        for g in range(4):
            r_a, r_b = np.random.default_rng(g), np.random.default_rng(g)
            lhs, r1, _ = gridworld_step(apply_env_transform("gridworld", g, gs),
                                        transform_action("gridworld", g, a), r_a, frame=g)
            rhs, r2, _ = gridworld_step(gs, a, r_b)
            worst = max(worst, _state_gap(lhs, apply_env_transform("gridworld", g, rhs)), abs(r1 - r2))
            worst = max(worst, float(np.abs(observe(lhs) - apply_env_transform("gridworld", g, observe(rhs))).max()))
    return worst


SUITES: dict[str, Callable[[], list[PropertyResult]]] = {
    "symmetrizer": lambda: symmetrizer_suite() + basis_suite(),
    "layers": layers_suite,
    "network": network_suite,
    "mdp": mdp_suite,
    "envs": envs_suite,
}


def run_suite(name: str) -> tuple[list[PropertyResult], float]:
    if name == "all":
        results, total = [], 0.0
        for key in SUITES:
            r, t = run_suite(key)
            results += r
            total += t
        return results, total
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; expected one of {sorted(SUITES) + ['all']}")
    start = time.perf_counter()
    results = SUITES[name]()
    return results, time.perf_counter() - start


def format_results(results: list[PropertyResult]) -> str:
    width = max((len(r.name) for r in results), default=10)
    lines = [f"{'suite':<12} {'property':<{width}} {'residual':>11} {'tol':>9}  status"]
    for r in results:
        lines.append(f"{r.suite:<12} {r.name:<{width}} {r.residual:>11.3e} {r.tol:>9.1e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
