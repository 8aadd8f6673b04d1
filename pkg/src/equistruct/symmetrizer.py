"""Equivariant weight subspaces by symmetrization and SVD.

A weight matrix ``W`` maps the input space of ``pair.rep_in`` to the output
space of ``pair.rep_out``. It is equivariant when ``K_g W = W L_g`` for every
group element. ``symmetrize`` is the group average that projects onto that
subspace; ``build_basis`` samples, projects, and extracts an orthonormal
basis with an SVD.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .group import RepresentationPair, augment_bias

__all__ = [
    "WeightShape",
    "WeightBasis",
    "symmetrize",
    "equivariance_residual",
    "build_basis",
    "orthonormality_residual",
    "VARIANTS",
]

Variant = Literal["equivariant", "nullspace", "random"]
VARIANTS = ("equivariant", "nullspace", "random")


@dataclass(frozen=True)
class WeightShape:
    """Shape of one augmented weight matrix.

    ``d_in`` is the input representation size per spatial location; with
    ``spatial=(h, w)`` the input is a ``(d_in, h, w)`` filter patch. One extra
    bias column is appended when ``bias`` is set.
    """

    d_out: int
    d_in: int
    spatial: tuple[int, int] | None = None
    bias: bool = True

    def __post_init__(self):
        dims = (self.d_out, self.d_in) + (self.spatial or ())
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all weight dimensions must be >= 1, got {dims}")

    @property
    def area(self) -> int:
        return self.spatial[0] * self.spatial[1] if self.spatial else 1

    @property
    def in_features(self) -> int:
        return self.d_in * self.area

    @property
    def d_in_augmented(self) -> int:
        return self.in_features + int(self.bias)

    @property
    def matrix_shape(self) -> tuple[int, int]:
        return (self.d_out, self.d_in_augmented)

    @property
    def size(self) -> int:
        """dim(W_total)."""
        return self.d_out * self.d_in_augmented


@dataclass(frozen=True, eq=False)
class WeightBasis:
    shape: WeightShape
    vectors: np.ndarray  # (rank, d_out, d_in_augmented)
    variant: str
    pair: RepresentationPair
    seed: int = 0
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def rank(self) -> int:
        return self.vectors.shape[0]

    def combine(self, coefficients: np.ndarray) -> np.ndarray:
        """sum_i c_i V_i for a coefficient vector of length ``rank``."""
        return np.tensordot(coefficients, self.vectors, axes=(0, 0))

    def as_filters(self) -> np.ndarray:
        """Vectors without the bias column, reshaped to ``(rank, d_out, d_in, h, w)``."""
        body = self.vectors[..., : self.shape.in_features]
        h, w = self.shape.spatial or (1, 1)
        return body.reshape(self.rank, self.shape.d_out, self.shape.d_in, h, w)

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256(np.ascontiguousarray(self.vectors).tobytes()).hexdigest()[:16]


def _augmented(pair: RepresentationPair, shape: WeightShape) -> RepresentationPair:
    if shape.d_out != pair.rep_out.dim or shape.in_features != pair.rep_in.dim:
        raise ValueError(
            f"weight shape {shape.d_out}x{shape.in_features} does not match "
            f"representations {pair.rep_out.dim}x{pair.rep_in.dim}"
        )
    if not shape.bias:
        return pair
    return RepresentationPair(augment_bias(pair.rep_in), pair.rep_out, name=pair.name)


def _check_shape(W: np.ndarray, pair: RepresentationPair) -> None:
    if W.ndim < 2 or W.shape[-2:] != (pair.rep_out.dim, pair.rep_in.dim):
        raise ValueError(
            f"weight of shape {W.shape[-2:]} incompatible with pair "
            f"({pair.rep_out.dim} x {pair.rep_in.dim})"
        )


def _right(pair: RepresentationPair, g: int, W: np.ndarray) -> np.ndarray:
    # rows of W are input-space covectors: (W L)[i] = L^T W[i]
    return pair.rep_in.act_transpose(g, W)


def _left(pair: RepresentationPair, g: int, W: np.ndarray) -> np.ndarray:
    # columns of W are output-space vectors
    return np.swapaxes(pair.rep_out.act(g, np.swapaxes(W, -1, -2)), -1, -2)


def symmetrize(W: np.ndarray, pair: RepresentationPair) -> np.ndarray:
    """Group average ``(1/|G|) sum_g K_g^-1 W L_g``.

    Accepts a single matrix or a stack with arbitrary leading axes.
    """
    W = np.asarray(W, dtype=np.float64)
    _check_shape(W, pair)
    group = pair.group
    total = np.zeros_like(W)
    for g in range(group.order):
        total += _left(pair, int(group.inverse[g]), _right(pair, g, W))
    return total / group.order


def equivariance_residual(W: np.ndarray, pair: RepresentationPair) -> float:
    """``max_g ||K_g W - W L_g||_inf`` (largest absolute entry)."""
    W = np.asarray(W, dtype=np.float64)
    _check_shape(W, pair)
    worst = 0.0
    for g in range(pair.group.order):
        diff = _left(pair, g, W) - _right(pair, g, W)
        worst = max(worst, float(np.abs(diff).max(initial=0.0)))
    return worst


def orthonormality_residual(vectors: np.ndarray) -> float:
    flat = vectors.reshape(vectors.shape[0], -1)
    if flat.shape[0] == 0:
        return 0.0
    return float(np.abs(flat @ flat.T - np.eye(flat.shape[0])).max())


def build_basis(
    pair: RepresentationPair,
    shape: WeightShape,
    variant: Variant = "equivariant",
    num_samples: int | None = None,
    seed: int = 0,
    singular_tol: float = 1e-6,
) -> WeightBasis:
    """Orthonormal basis of the equivariant weights, or of an ablation subspace.

    ``equivariant`` keeps the right-singular vectors of the stacked,
    symmetrized samples whose singular value exceeds
    ``singular_tol * sigma_max``; ``nullspace`` keeps the rest; ``random``
    skips symmetrization and keeps the full-rank basis of the raw samples.
    A group with no equivariant weights yields an empty (rank 0) basis.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown basis variant {variant!r}; expected one of {VARIANTS}")
    aug = _augmented(pair, shape)
    dim = shape.size
    n = dim + 8 if num_samples is None else int(num_samples)
    if n < dim:
        raise ValueError(f"need at least dim(W_total)={dim} samples, got {n}")

    rng = np.random.default_rng(seed)
    samples = rng.standard_normal((n, *shape.matrix_shape))
    if variant != "random":
        samples = symmetrize(samples, aug)
    _, sv, vt = np.linalg.svd(samples.reshape(n, dim), full_matrices=True)

    if variant == "random":
        keep = vt
    else:
        cutoff = singular_tol * sv[0] if sv.size and sv[0] > 0 else np.inf
        rank = int(np.count_nonzero(sv > cutoff))
        keep = vt[:rank] if variant == "equivariant" else vt[rank:]
    vectors = np.ascontiguousarray(keep.reshape(-1, *shape.matrix_shape))
    vectors.setflags(write=False)
    return WeightBasis(shape, vectors, variant, aug, seed, sv)
