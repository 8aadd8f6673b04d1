"""Tabular MDPs with group symmetries and their homomorphic reductions.

A group acts on an MDP by permuting states (``state_map[g]``) and, per
state, permuting actions (``action_map[g, s]``). When reward and transition
tables are invariant under that action the MDP can be folded onto its
orbits: each orbit becomes one abstract state, and the actions at the orbit
representative, up to its stabilizer, become the abstract actions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable

import numpy as np

from .group import FiniteGroup, make_cyclic_group

__all__ = [
    "TabularMDP",
    "MDPGroupAction",
    "MDPHomomorphism",
    "TabularPolicy",
    "SymmetryReport",
    "ValueIterationResult",
    "EquivalenceReport",
    "MDPSymmetryError",
    "ReductionError",
    "ConvergenceError",
    "compute_orbit",
    "state_orbits",
    "check_mdp_symmetry",
    "build_homomorphism",
    "identity_homomorphism",
    "reduce_mdp",
    "value_iteration",
    "evaluate_policy",
    "greedy_policy",
    "lift_policy",
    "lifted_policy_invariance",
    "check_optimal_value_equivalence",
    "trivial_action",
    "mirror_mdp",
    "ring_mdp",
    "corridor_mdp",
    "shipped_examples",
]


class MDPSymmetryError(ValueError):
    def __init__(self, report: "SymmetryReport"):
        self.report = report
        super().__init__(f"MDP is not symmetric under the group action: {report}")


class ReductionError(ValueError):
    def __init__(self, message: str, witness: tuple):
        self.witness = witness
        super().__init__(f"{message}; witness {witness}")


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        super().__init__(f"value iteration did not converge in {iterations} sweeps "
                         f"(last residual {residual:.3g})")


@dataclass(frozen=True, eq=False)
class TabularMDP:
    R: np.ndarray  # [S, A]
    T: np.ndarray  # [S, A, S']
    gamma: float

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64)
        T = np.array(self.T, dtype=np.float64)
        if R.ndim != 2 or T.shape != (*R.shape, R.shape[0]):
            raise ValueError(f"inconsistent shapes R{R.shape} T{T.shape}")
        if (T < 0).any() or np.abs(T.sum(axis=2) - 1.0).max() > 1e-12:
            raise ValueError("every T[s, a, :] must be a probability distribution")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        R.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)

    @property
    def n_states(self) -> int:
        return self.R.shape[0]

    @property
    def n_actions(self) -> int:
        return self.R.shape[1]


@dataclass(frozen=True, eq=False)
class MDPGroupAction:
    """``state_map[g][s] = L_g[s]``; ``action_map[g][s][a] = K_g^s[a]``."""

    group: FiniteGroup
    state_map: np.ndarray  # [G, S]
    action_map: np.ndarray  # [G, S, A]

    def __post_init__(self):
        sm = np.array(self.state_map, dtype=np.int64)
        am = np.array(self.action_map, dtype=np.int64)
        n = self.group.order
        if sm.ndim != 2 or sm.shape[0] != n or am.shape[:2] != sm.shape:
            raise ValueError(f"maps do not match group order {n}: {sm.shape}, {am.shape}")
        S, A = sm.shape[1], am.shape[2]
        for g in range(n):
            if sorted(sm[g]) != list(range(S)):
                raise ValueError(f"state_map[{g}] is not a permutation")
            for s in range(S):
                if sorted(am[g, s]) != list(range(A)):
                    raise ValueError(f"action_map[{g}][{s}] is not a permutation")
        e = self.group.identity
        if not np.array_equal(sm[e], np.arange(S)) or not np.array_equal(am[e], np.tile(np.arange(A), (S, 1))):
            raise ValueError("identity element must act trivially")
        for g in range(n):
            for h in range(n):
                gh = self.group.compose[g, h]
                if not np.array_equal(sm[gh], sm[g][sm[h]]):
                    raise ValueError(f"state maps do not compose for ({g}, {h})")
                # K_{gh}^s = K_g^{L_h s} o K_h^s
                composed = np.take_along_axis(am[g][sm[h]], am[h], axis=1)
                if not np.array_equal(am[gh], composed):
                    raise ValueError(f"action maps do not compose for ({g}, {h})")
        sm.setflags(write=False)
        am.setflags(write=False)
        object.__setattr__(self, "state_map", sm)
        object.__setattr__(self, "action_map", am)

    @property
    def n_states(self) -> int:
        return self.state_map.shape[1]

    @property
    def n_actions(self) -> int:
        return self.action_map.shape[2]


def trivial_action(n_states: int, n_actions: int) -> MDPGroupAction:
    return MDPGroupAction(
        make_cyclic_group(1),
        np.arange(n_states)[None],
        np.tile(np.arange(n_actions), (1, n_states, 1)),
    )


@dataclass(frozen=True, eq=False)
class MDPHomomorphism:
    """State map ``sigma[s]`` and state-dependent action map ``alpha[s, a]``."""

    sigma: np.ndarray  # [S]
    alpha: np.ndarray  # [S, A]
    n_abstract_states: int
    n_abstract_actions: int

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=np.int64)
        alpha = np.array(self.alpha, dtype=np.int64)
        if set(sigma.tolist()) != set(range(self.n_abstract_states)):
            raise ValueError("sigma is not surjective onto the abstract states")
        for s in range(alpha.shape[0]):
            if set(alpha[s].tolist()) != set(range(self.n_abstract_actions)):
                raise ValueError(f"alpha[{s}] is not surjective onto the abstract actions")
        sigma.setflags(write=False)
        alpha.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "alpha", alpha)

    def representatives(self) -> np.ndarray:
        """Smallest concrete state mapped to each abstract state."""
        reps = np.full(self.n_abstract_states, -1)
        for s in range(len(self.sigma) - 1, -1, -1):
            reps[self.sigma[s]] = s
        return reps


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray  # [S, A]

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("policy rows must be non-negative and sum to 1")


def compute_orbit(x: int | tuple[int, int], action: MDPGroupAction) -> frozenset[Hashable]:
    """Orbit of a state ``s`` or a state-action pair ``(s, a)``."""
    if isinstance(x, tuple):
        s, a = x
        return frozenset(
            (int(action.state_map[g, s]), int(action.action_map[g, s, a]))
            for g in range(action.group.order)
        )
    return frozenset(int(action.state_map[g, x]) for g in range(action.group.order))


def state_orbits(action: MDPGroupAction) -> list[list[int]]:
    """Orbits of the state space, each sorted, ordered by smallest member."""
    seen, orbits = set(), []
    for s in range(action.n_states):
        if s not in seen:
            orb = sorted(compute_orbit(s, action))
            seen.update(orb)
            orbits.append(orb)
    return orbits


@dataclass(frozen=True)
class SymmetryReport:
    reward_residual: float
    transition_residual: float
    witness: tuple[int, int, int] | None = None  # (s, a, g) of the worst violation

    def ok(self, tol: float = 1e-10) -> bool:
        return self.reward_residual <= tol and self.transition_residual <= tol


def check_mdp_symmetry(mdp: TabularMDP, action: MDPGroupAction, tol: float = 1e-10) -> SymmetryReport:
    """Residuals of R(s,a) = R(L s, K^s a) and T(s'|s,a) = T(L s'|L s, K^s a)."""
    if (action.n_states, action.n_actions) != (mdp.n_states, mdp.n_actions):
        raise ValueError("group action and MDP have different state/action counts")
    r_worst = t_worst = 0.0
    witness, worst = None, -1.0
    for g in range(action.group.order):
        L, K = action.state_map[g], action.action_map[g]
        dr = np.abs(mdp.R - mdp.R[L[:, None], K])
        dt = np.abs(mdp.T - mdp.T[L[:, None, None], K[:, :, None], L[None, None, :]]).max(axis=2)
        r_worst = max(r_worst, float(dr.max()))
        t_worst = max(t_worst, float(dt.max()))
        both = np.maximum(dr, dt)
        if both.max() > worst:
            worst = float(both.max())
            s, a = np.unravel_index(int(both.argmax()), both.shape)
            witness = (int(s), int(a), g)
    return SymmetryReport(r_worst, t_worst, witness if worst > tol else None)


def identity_homomorphism(mdp: TabularMDP) -> MDPHomomorphism:
    return MDPHomomorphism(np.arange(mdp.n_states), np.tile(np.arange(mdp.n_actions), (mdp.n_states, 1)),
                           mdp.n_states, mdp.n_actions)


def build_homomorphism(mdp: TabularMDP, action: MDPGroupAction, tol: float = 1e-10) -> MDPHomomorphism:
    """Group-structured homomorphism onto the orbit MDP.

    Each state maps to its orbit (indexed in order of smallest member).
    Actions are transported to the orbit representative by the smallest
    group element that reaches it, then identified up to the stabilizer of
    the representative. Orbits whose stabilizers induce different numbers
    of abstract actions cannot share one abstract action set; that case is
    rejected.
    """
    report = check_mdp_symmetry(mdp, action, tol)
    if not report.ok(tol):
        raise MDPSymmetryError(report)
    S, A, G = mdp.n_states, mdp.n_actions, action.group.order
    orbits = state_orbits(action)
    sigma = np.empty(S, dtype=np.int64)
    for i, orb in enumerate(orbits):
        sigma[orb] = i

    # abstract actions at each representative: orbits of its stabilizer
    rep_classes = []
    for orb in orbits:
        rep = orb[0]
        stab = [g for g in range(G) if action.state_map[g, rep] == rep]
        cls = np.full(A, -1)
        k = 0
        for a in range(A):
            if cls[a] < 0:
                cls[[action.action_map[g, rep, a] for g in stab]] = k
                k += 1
        rep_classes.append(cls)
    counts = {int(c.max()) + 1 for c in rep_classes}
    if len(counts) != 1:
        raise ValueError(f"orbits induce different abstract action counts {sorted(counts)}")

    alpha = np.empty((S, A), dtype=np.int64)
    for s in range(S):
        rep = orbits[sigma[s]][0]
        g = next(g for g in range(G) if action.state_map[g, s] == rep)
        alpha[s] = rep_classes[sigma[s]][action.action_map[g, s]]
    hom = MDPHomomorphism(sigma, alpha, len(orbits), counts.pop())

    for g in range(G):
        L, K = action.state_map[g], action.action_map[g]
        if not (np.array_equal(sigma[L], sigma)
                and np.array_equal(np.take_along_axis(alpha[L], K, axis=1), alpha)):
            raise ReductionError("homomorphism is not constant on orbits", (g,))
    return hom


def _reduce(mdp: TabularMDP, hom: MDPHomomorphism):
    S, A = mdp.n_states, mdp.n_actions
    nS, nA = hom.n_abstract_states, hom.n_abstract_actions
    # aggregate next-state mass over each abstract state
    agg = np.zeros((S, A, nS))
    np.add.at(agg, (slice(None), slice(None), hom.sigma), mdp.T)
    R = np.full((nS, nA), np.nan)
    T = np.full((nS, nA, nS), np.nan)
    gap, witness = 0.0, None
    for s in range(S):
        for a in range(A):
            i, j = hom.sigma[s], hom.alpha[s, a]
            if np.isnan(R[i, j]):
                R[i, j], T[i, j] = mdp.R[s, a], agg[s, a]
                continue
            d = max(abs(R[i, j] - mdp.R[s, a]), float(np.abs(T[i, j] - agg[s, a]).max()))
            if d > gap:
                gap, witness = d, (s, a, i, j)
    return R, T, gap, witness


def reduce_mdp(mdp: TabularMDP, hom: MDPHomomorphism, tol: float = 1e-10,
               strict: bool = True) -> TabularMDP:
    """Abstract MDP with R-bar and T-bar read off any preimage.

    With ``strict`` the disagreement between preimages must stay within
    ``tol``; otherwise the first preimage (by state, then action index)
    defines the abstract entry.
    """
    R, T, gap, witness = _reduce(mdp, hom)
    if strict and gap > tol:
        raise ReductionError(f"reduction is ill-defined (disagreement {gap:.3g})", witness)
    return TabularMDP(R, T, mdp.gamma)


@dataclass(frozen=True)
class ValueIterationResult:
    V: np.ndarray
    Q: np.ndarray
    policy: np.ndarray  # greedy action per state
    residual: float
    iterations: int


def _q_values(mdp: TabularMDP, V: np.ndarray) -> np.ndarray:
    return mdp.R + mdp.gamma * mdp.T @ V


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iters: int = 100_000) -> ValueIterationResult:
    """Synchronous sweeps until the sup-norm Bellman residual of V is <= tol."""
    V = np.zeros(mdp.n_states)
    residual = np.inf
    for it in range(1, max_iters + 1):
        Q = _q_values(mdp, V)
        V_new = Q.max(axis=1)
        residual = float(np.abs(V_new - V).max())
        if residual <= tol:
            return ValueIterationResult(V, Q, Q.argmax(axis=1), residual, it)
        V = V_new
    raise ConvergenceError(residual, max_iters)


def evaluate_policy(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    """Exact V^pi from the linear Bellman system."""
    P = np.einsum("sa,sat->st", policy, mdp.T)
    r = np.einsum("sa,sa->s", policy, mdp.R)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P, r)


def greedy_policy(Q: np.ndarray) -> np.ndarray:
    """One-hot policy on the first maximizing action."""
    pol = np.zeros_like(Q)
    pol[np.arange(Q.shape[0]), Q.argmax(axis=1)] = 1.0
    return pol


def lift_policy(abstract_policy: np.ndarray, hom: MDPHomomorphism) -> np.ndarray:
    """Split each abstract action's mass uniformly over its preimage at every state."""
    abstract_policy = np.asarray(abstract_policy, dtype=np.float64)
    S, A = hom.alpha.shape
    lifted = np.empty((S, A))
    for s in range(S):
        counts = np.bincount(hom.alpha[s], minlength=hom.n_abstract_actions)
        lifted[s] = abstract_policy[hom.sigma[s], hom.alpha[s]] / counts[hom.alpha[s]]
    return lifted


def lifted_policy_invariance(policy: np.ndarray, action: MDPGroupAction) -> float:
    """``max |pi(a|s) - pi(K_g^s a | L_g s)|`` over g, s, a."""
    worst = 0.0
    for g in range(action.group.order):
        L, K = action.state_map[g], action.action_map[g]
        worst = max(worst, float(np.abs(policy - policy[L[:, None], K]).max()))
    return worst


@dataclass(frozen=True)
class EquivalenceReport:
    n_abstract_states: int
    n_abstract_actions: int
    reduction_gap: float
    value_gap: float
    q_gap: float
    lifted_policy_gap: float
    tol: float

    @property
    def ok(self) -> bool:
        return max(self.reduction_gap, self.value_gap, self.q_gap, self.lifted_policy_gap) <= self.tol

    def summary(self) -> str:
        return (f"abstract states {self.n_abstract_states}, abstract actions {self.n_abstract_actions}\n"
                f"reduction gap   {self.reduction_gap:.3e}\n"
                f"max |V - Vbar|  {self.value_gap:.3e}\n"
                f"max |Q - Qbar|  {self.q_gap:.3e}\n"
                f"lifted policy   {self.lifted_policy_gap:.3e}\n"
                f"{'OK' if self.ok else 'VIOLATED'} at tol {self.tol:g}")


def check_optimal_value_equivalence(mdp: TabularMDP, hom: MDPHomomorphism, tol: float = 1e-8,
                                    vi_tol: float = 1e-12) -> EquivalenceReport:
    """Solve both MDPs and compare V*, Q*, and the lifted greedy policy's value."""
    R, T, gap, _ = _reduce(mdp, hom)
    abstract = TabularMDP(R, T, mdp.gamma)
    full = value_iteration(mdp, vi_tol)
    red = value_iteration(abstract, vi_tol)
    v_gap = float(np.abs(full.V - red.V[hom.sigma]).max())
    q_gap = float(np.abs(full.Q - red.Q[hom.sigma[:, None], hom.alpha]).max())
    lifted = lift_policy(greedy_policy(red.Q), hom)
    pol_gap = float(np.abs(evaluate_policy(mdp, lifted) - full.V).max())
    return EquivalenceReport(hom.n_abstract_states, hom.n_abstract_actions, gap, v_gap, q_gap, pol_gap, tol)


# --------------------------------------------------------------------------
# Shipped symmetric examples

def mirror_mdp(R=None, gamma: float = 0.9) -> tuple[TabularMDP, MDPGroupAction]:
    """Two states and two actions, symmetric under swapping both."""
    R = np.array([[1.0, 0.0], [0.0, 1.0]]) if R is None else np.asarray(R, float)
    T = np.array([
        [[0.9, 0.1], [0.3, 0.7]],
        [[0.7, 0.3], [0.1, 0.9]],
    ])
    c2 = make_cyclic_group(2)
    action = MDPGroupAction(c2, [[0, 1], [1, 0]], [[[0, 1], [0, 1]], [[1, 0], [1, 0]]])
    return TabularMDP(R, T, gamma), action


def ring_mdp(n_states: int = 4, group_order: int = 4, slip: float = 0.1,
             gamma: float = 0.9) -> tuple[TabularMDP, MDPGroupAction]:
    """States on a ring; actions stay / clockwise / counter-clockwise.

    The cyclic group of ``group_order`` rotates the ring by
    ``n_states // group_order`` positions. Reward is earned by landing on a
    state whose index is a multiple of that shift, so it is invariant.
    """
    if n_states % group_order:
        raise ValueError("group order must divide the ring size")
    shift = n_states // group_order
    T = np.zeros((n_states, 3, n_states))
    for s in range(n_states):
        for a, step in enumerate((0, 1, -1)):
            T[s, a, (s + step) % n_states] += 1.0 - slip
            T[s, a, s] += slip
    goal = (np.arange(n_states) % shift == 0).astype(float) if shift > 1 else np.ones(n_states)
    R = T @ goal
    grp = make_cyclic_group(group_order)
    sm = [[(s + g * shift) % n_states for s in range(n_states)] for g in range(group_order)]
    am = np.tile(np.arange(3), (group_order, n_states, 1))
    return TabularMDP(R, T, gamma), MDPGroupAction(grp, sm, am)


def corridor_mdp(length: int = 6, slip: float = 0.1, gamma: float = 0.9) -> tuple[TabularMDP, MDPGroupAction]:
    """A corridor with rewarding ends, reflected end to end (left <-> right)."""
    if length % 2:
        raise ValueError("corridor length must be even so no state is fixed by the reflection")
    T = np.zeros((length, 2, length))
    for s in range(length):
        for a, step in enumerate((-1, 1)):
            T[s, a, min(max(s + step, 0), length - 1)] += 1.0 - slip
            T[s, a, min(max(s - step, 0), length - 1)] += slip
    ends = np.zeros(length)
    ends[[0, -1]] = 1.0
    R = T @ ends
    c2 = make_cyclic_group(2)
    sm = [list(range(length)), list(range(length - 1, -1, -1))]
    am = [[[0, 1]] * length, [[1, 0]] * length]
    return TabularMDP(R, T, gamma), MDPGroupAction(c2, sm, am)


def shipped_examples() -> dict[str, tuple[TabularMDP, MDPGroupAction]]:
    return {
        "mirror": mirror_mdp(),
        "ring4": ring_mdp(4, 4),
        "ring8": ring_mdp(8, 4),
        "corridor6": corridor_mdp(6),
    }
