"""Finite groups and their linear representations.

Groups are stored as integer Cayley tables. Representations expose two
actions on the trailing axis of an array, ``act`` (rho(g) x) and
``act_transpose`` (rho(g)^T x), which is all the symmetrizer needs. Dense
matrices are always available for verification, but spatial
representations never materialize them on the hot path.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "FiniteGroup",
    "Representation",
    "PermutationRepresentation",
    "SpatialRepresentation",
    "BiasAugmentedRepresentation",
    "RepresentationPair",
    "RepresentationReport",
    "NotARepresentationError",
    "EnvRepresentations",
    "make_cyclic_group",
    "trivial_representation",
    "regular_representation",
    "permutation_representation",
    "matrix_representation",
    "verify_representation",
    "augment_bias",
    "rotate_clockwise",
    "cartpole_representations",
    "gridworld_representations",
    "format_representation",
]


class NotARepresentationError(ValueError):
    """Raised when supplied matrices or permutations do not compose like the group."""

    def __init__(self, g: int, h: int, residual: float):
        self.g, self.h, self.residual = g, h, residual
        super().__init__(
            f"rho({g}) rho({h}) != rho({g}*{h}) (residual {residual:.3g})"
        )


class FiniteGroup:
    """A finite group given by its composition table.

    ``compose[g, h]`` is the index of ``g*h``. The table is validated on
    construction (closure, identity, inverses, associativity) so every
    instance is a genuine group.
    """

    def __init__(self, compose: np.ndarray | Sequence[Sequence[int]], name: str = ""):
        table = np.array(compose, dtype=np.int64)
        if table.ndim != 2 or table.shape[0] != table.shape[1] or table.shape[0] == 0:
            raise ValueError("composition table must be a non-empty square array")
        n = table.shape[0]
        if table.min() < 0 or table.max() >= n:
            raise ValueError("composition table is not closed")
        ids = [e for e in range(n) if np.array_equal(table[e], np.arange(n))
               and np.array_equal(table[:, e], np.arange(n))]
        if not ids:
            raise ValueError("composition table has no identity element")
        identity = ids[0]
        inverse = np.full(n, -1, dtype=np.int64)
        for g in range(n):
            hits = np.flatnonzero(table[g] == identity)
            if len(hits) != 1 or table[hits[0], g] != identity:
                raise ValueError(f"element {g} has no two-sided inverse")
            inverse[g] = hits[0]
        # (ab)c == a(bc) for all triples
        left = table[table[:, :, None], np.arange(n)[None, None, :]]
        right = table[np.arange(n)[:, None, None], table[None, :, :]]
        if not np.array_equal(left, right):
            raise ValueError("composition table is not associative")

        table.setflags(write=False)
        inverse.setflags(write=False)
        self.compose = table
        self.identity = int(identity)
        self.inverse = inverse
        self.name = name or f"G{n}"

    @property
    def order(self) -> int:
        return self.compose.shape[0]

    def __len__(self) -> int:
        return self.order

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FiniteGroup) and np.array_equal(self.compose, other.compose)

    def __hash__(self) -> int:
        return hash(self.compose.tobytes())

    def __repr__(self) -> str:
        return f"FiniteGroup({self.name}, order={self.order})"


def make_cyclic_group(n: int) -> FiniteGroup:
    """Z_n with ``compose(i, j) = (i + j) mod n``."""
    if n < 1:
        raise ValueError(f"cyclic group order must be >= 1, got {n}")
    idx = np.arange(n)
    return FiniteGroup((idx[:, None] + idx[None, :]) % n, name=f"C{n}")


class Representation:
    """A representation given by one dense ``dim x dim`` matrix per element."""

    def __init__(self, group: FiniteGroup, matrices: np.ndarray, name: str = ""):
        mats = np.array(matrices, dtype=np.float64)
        if mats.ndim != 3 or mats.shape[0] != group.order or mats.shape[1] != mats.shape[2]:
            raise ValueError(
                f"expected {group.order} square matrices, got array of shape {mats.shape}"
            )
        mats.setflags(write=False)
        self.group = group
        self._matrices = mats
        self.name = name

    @property
    def dim(self) -> int:
        return self._matrices.shape[1]

    @property
    def matrices(self) -> np.ndarray:
        return self._matrices

    @property
    def orthogonal(self) -> bool:
        m = self.matrices
        eye = np.eye(self.dim)
        return all(np.allclose(mg.T @ mg, eye, atol=1e-12) for mg in m)

    def matrix(self, g: int) -> np.ndarray:
        return self.matrices[g]

    def act(self, g: int, x: np.ndarray) -> np.ndarray:
        """rho(g) applied to every vector on the last axis of ``x``."""
        return x @ self._matrices[g].T

    def act_transpose(self, g: int, x: np.ndarray) -> np.ndarray:
        """rho(g)^T applied to every vector on the last axis of ``x``."""
        return x @ self._matrices[g]

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name or '?'}, group={self.group.name}, dim={self.dim})"


class PermutationRepresentation(Representation):
    """Permutation matrices, kept alongside the index form for O(d) application.

    The matrix for ``g`` sends basis vector ``j`` to ``perms[g][j]``.
    """

    def __init__(self, group: FiniteGroup, perms: np.ndarray, name: str = ""):
        perms = np.array(perms, dtype=np.int64)
        d = perms.shape[1]
        mats = np.zeros((group.order, d, d))
        for g, p in enumerate(perms):
            mats[g, p, np.arange(d)] = 1.0
        super().__init__(group, mats, name=name)
        inv = np.argsort(perms, axis=1)
        perms.setflags(write=False)
        inv.setflags(write=False)
        self.perms = perms
        self._inv_perms = inv

    @property
    def orthogonal(self) -> bool:
        return True

    def act(self, g: int, x: np.ndarray) -> np.ndarray:
        # (P x)[p[j]] = x[j]  <=>  (P x)[i] = x[p^-1[i]]
        return x[..., self._inv_perms[g]]

    def act_transpose(self, g: int, x: np.ndarray) -> np.ndarray:
        return x[..., self.perms[g]]


def rotate_clockwise(g: int, x: np.ndarray) -> np.ndarray:
    """Rotate the last two axes of ``x`` clockwise by ``g`` quarter turns."""
    return np.rot90(x, k=-g, axes=(-2, -1))


class SpatialRepresentation(Representation):
    """A group acting on ``(fiber, height, width)`` tensors.

    The fiber axis transforms by ``fiber`` (e.g. a cyclic roll of the
    representation dimension) and the two spatial axes by ``spatial(g, x)``
    (e.g. ``numpy.rot90``). Vectors are the row-major flattening of
    ``(fiber.dim, height, width)``. The spatial map must be a permutation of
    pixels, so the whole action is orthogonal.
    """

    def __init__(
        self,
        fiber: Representation,
        size: tuple[int, int],
        spatial: Callable[[int, np.ndarray], np.ndarray] = rotate_clockwise,
        name: str = "",
    ):
        self.group = fiber.group
        self.fiber = fiber
        self.size = (int(size[0]), int(size[1]))
        self.spatial = spatial
        self.name = name

    @property
    def dim(self) -> int:
        return self.fiber.dim * self.size[0] * self.size[1]

    @cached_property
    def matrices(self) -> np.ndarray:
        eye = np.eye(self.dim)
        mats = np.stack([self.act(g, eye).T for g in range(self.group.order)])
        mats.setflags(write=False)
        return mats

    @property
    def orthogonal(self) -> bool:
        return self.fiber.orthogonal

    def act(self, g: int, x: np.ndarray) -> np.ndarray:
        lead = x.shape[:-1]
        t = x.reshape(*lead, self.fiber.dim, *self.size)
        t = np.moveaxis(self.fiber.act(g, np.moveaxis(t, -3, -1)), -1, -3)
        t = self.spatial(g, t)
        return np.ascontiguousarray(t).reshape(*lead, self.dim)

    def act_transpose(self, g: int, x: np.ndarray) -> np.ndarray:
        return self.act(int(self.group.inverse[g]), x)


class BiasAugmentedRepresentation(Representation):
    """``rho`` extended by one trailing coordinate that every element fixes."""

    def __init__(self, base: Representation):
        self.group = base.group
        self.base = base
        self.name = f"{base.name}+1" if base.name else "bias"

    @property
    def dim(self) -> int:
        return self.base.dim + 1

    @cached_property
    def matrices(self) -> np.ndarray:
        n, d = self.group.order, self.base.dim
        mats = np.zeros((n, d + 1, d + 1))
        mats[:, :d, :d] = self.base.matrices
        mats[:, d, d] = 1.0
        mats.setflags(write=False)
        return mats

    @property
    def orthogonal(self) -> bool:
        return self.base.orthogonal

    def act(self, g: int, x: np.ndarray) -> np.ndarray:
        return np.concatenate([self.base.act(g, x[..., :-1]), x[..., -1:]], axis=-1)

    def act_transpose(self, g: int, x: np.ndarray) -> np.ndarray:
        return np.concatenate([self.base.act_transpose(g, x[..., :-1]), x[..., -1:]], axis=-1)


def augment_bias(rep: Representation) -> Representation:
    return BiasAugmentedRepresentation(rep)


@dataclass(frozen=True)
class RepresentationPair:
    """Input and output representations of one layer (the (L_g, K_g) operators)."""

    rep_in: Representation
    rep_out: Representation
    name: str = ""

    def __post_init__(self):
        if self.rep_in.group != self.rep_out.group:
            raise ValueError("input and output representations belong to different groups")

    @property
    def group(self) -> FiniteGroup:
        return self.rep_in.group


@dataclass(frozen=True)
class RepresentationReport:
    max_residual: float
    identity_residual: float
    ok: bool
    worst: tuple[int, int] | None = None


def verify_representation(rep: Representation, tol: float = 1e-10) -> RepresentationReport:
    """Measure how far ``rep`` is from being a group homomorphism."""
    mats = rep.matrices
    group = rep.group
    worst, worst_pair = 0.0, None
    for g in range(group.order):
        prods = mats[g] @ mats  # rho(g) rho(h) for all h
        res = np.abs(prods - mats[group.compose[g]]).max(axis=(1, 2))
        h = int(np.argmax(res))
        if res[h] > worst or worst_pair is None:
            worst, worst_pair = float(res[h]), (g, h)
    ident = float(np.abs(mats[group.identity] - np.eye(rep.dim)).max())
    invertible = all(np.linalg.matrix_rank(m) == rep.dim for m in mats)
    ok = worst <= tol and ident <= tol and invertible
    return RepresentationReport(worst, ident, ok, worst_pair)


def _check_composition(group: FiniteGroup, rep: Representation, tol: float = 1e-10) -> None:
    report = verify_representation(rep, tol)
    if not report.ok:
        g, h = report.worst if report.worst else (group.identity, group.identity)
        raise NotARepresentationError(g, h, max(report.max_residual, report.identity_residual))


def permutation_representation(
    group: FiniteGroup, perms: Sequence[Sequence[int]], name: str = ""
) -> PermutationRepresentation:
    """Permutation representation; ``perms[g][j]`` is where ``g`` sends index ``j``."""
    perms = np.array(perms, dtype=np.int64)
    if perms.ndim != 2 or perms.shape[0] != group.order:
        raise ValueError(f"need one permutation per group element, got shape {perms.shape}")
    d = perms.shape[1]
    for g, p in enumerate(perms):
        if sorted(p.tolist()) != list(range(d)):
            raise ValueError(f"perms[{g}] is not a permutation of 0..{d - 1}")
    for g in range(group.order):
        for h in range(group.order):
            # (g h)(j) must equal g(h(j))
            if not np.array_equal(perms[g][perms[h]], perms[group.compose[g, h]]):
                raise NotARepresentationError(g, h, 1.0)
    if not np.array_equal(perms[group.identity], np.arange(d)):
        raise NotARepresentationError(group.identity, group.identity, 1.0)
    return PermutationRepresentation(group, perms, name=name)


def matrix_representation(group: FiniteGroup, matrices, name: str = "", tol: float = 1e-10) -> Representation:
    rep = Representation(group, matrices, name=name)
    _check_composition(group, rep, tol)
    return rep


def trivial_representation(group: FiniteGroup, dim: int = 1) -> PermutationRepresentation:
    """Every element acts as the identity; used for invariant (value) outputs."""
    return PermutationRepresentation(
        group, np.tile(np.arange(dim), (group.order, 1)), name=f"trivial{dim}"
    )


def regular_representation(group: FiniteGroup) -> PermutationRepresentation:
    """The group acting on itself by left multiplication (dimension |G|)."""
    return PermutationRepresentation(group, group.compose.copy(), name="regular")


@dataclass(frozen=True)
class EnvRepresentations:
    """The representations a policy/value network for one environment needs."""

    state: Representation
    intermediate: Representation
    policy: Representation
    value: Representation

    @property
    def group(self) -> FiniteGroup:
        return self.state.group

    @property
    def first_layer(self) -> RepresentationPair:
        return RepresentationPair(self.state, self.intermediate, name="first")


def cartpole_representations() -> EnvRepresentations:
    """C2 reflection: states negate, the two actions swap."""
    c2 = make_cyclic_group(2)
    state = Representation(c2, np.stack([np.eye(4), -np.eye(4)]), name="cartpole-state")
    swap = PermutationRepresentation(c2, [[0, 1], [1, 0]], name="cartpole-policy")
    intermediate = PermutationRepresentation(c2, [[0, 1], [1, 0]], name="regular")
    return EnvRepresentations(state, intermediate, swap, trivial_representation(c2))


def gridworld_representations(size: tuple[int, int] = (21, 21)) -> EnvRepresentations:
    """C4 rotation: images turn clockwise, actions (noop, up, right, down, left) cycle.

    ``state`` acts on single-channel images of ``size``; layer-specific
    filter representations are built by the network from the same pieces.
    """
    c4 = make_cyclic_group(4)
    state = SpatialRepresentation(trivial_representation(c4), size, name="gridworld-state")
    intermediate = PermutationRepresentation(
        c4, [[(j + g) % 4 for j in range(4)] for g in range(4)], name="regular"
    )
    # noop fixed; up -> right -> down -> left -> up per quarter turn
    policy = PermutationRepresentation(
        c4, [[0] + [1 + (j + g) % 4 for j in range(4)] for g in range(4)], name="gridworld-policy"
    )
    return EnvRepresentations(state, intermediate, policy, trivial_representation(c4))


def format_representation(rep: Representation) -> str:
    """Text dump: one ``element g`` header per group element followed by matrix rows."""
    lines = [f"# {rep.name or 'representation'} group={rep.group.name} dim={rep.dim}"]
    for g in range(rep.group.order):
        lines.append(f"element {g}")
        for row in rep.matrices[g]:
            lines.append(" ".join(f"{v:g}" for v in row))
    return "\n".join(lines) + "\n"
