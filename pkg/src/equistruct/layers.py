"""Basis layers and the few plain modules the networks need.

Every module follows the same small protocol: ``forward(x)`` caches what
``backward`` needs, ``backward(dy)`` stores parameter gradients in
``grads`` (aligned with ``params``) and returns the input gradient.

Tensor layouts
--------------
basis linear   [batch, channels, repr]
basis conv     [batch, channels, repr, height, width]
plain linear   [batch, features]
plain conv     [batch, channels, height, width]

Basis layers append an implicit constant-1 slot to every input channel
before contracting with the realized weight
``W[c_out, r_out, c_in, r_in] = sum_i c[i, c_out, c_in] V[i, r_out, r_in]``.
"""
from __future__ import annotations

import math
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .symmetrizer import WeightBasis

__all__ = [
    "Module",
    "BasisLinear",
    "BasisConv",
    "PlainLinear",
    "PlainConv",
    "ReLU",
    "GlobalMaxPool",
    "init_layer",
    "init_std",
    "relu",
    "conv_output_size",
]

Scheme = Literal["xavier", "he"]


class Module:
    params: list[np.ndarray] = []
    grads: list[np.ndarray] = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params)


def init_std(scheme: Scheme, fan_in: int, fan_out: int) -> float:
    if scheme == "xavier":
        return math.sqrt(2.0 / (fan_in + fan_out))
    if scheme == "he":
        return math.sqrt(2.0 / fan_in)
    raise ValueError(f"unknown init scheme {scheme!r}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, kernel: tuple[int, int], stride: int, padding: int) -> np.ndarray:
    """[B, F, H, W] -> [B, OH, OW, F, kh, kw] patches."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, kernel, axis=(-2, -1))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def _col2im(cols: np.ndarray, in_shape: tuple[int, ...], kernel: tuple[int, int],
            stride: int, padding: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add [B, OH, OW, F, kh, kw] patches."""
    b, f, h, w = in_shape
    kh, kw = kernel
    oh, ow = cols.shape[1:3]
    out = np.zeros((b, f, h + 2 * padding, w + 2 * padding))
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # B, F, kh, kw, OH, OW
    for i in range(kh):
        for j in range(kw):
            out[:, :, i: i + stride * oh: stride, j: j + stride * ow: stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


class _BasisLayer(Module):
    def __init__(self, basis: WeightBasis, channels_in: int, channels_out: int,
                 coefficients: np.ndarray | None = None):
        self.basis = basis
        self.channels_in = int(channels_in)
        self.channels_out = int(channels_out)
        shape = (basis.rank, self.channels_out, self.channels_in)
        if coefficients is None:
            coefficients = np.zeros(shape)
        coefficients = np.asarray(coefficients, dtype=np.float64)
        if coefficients.shape != shape:
            raise ValueError(f"coefficients must have shape {shape}, got {coefficients.shape}")
        self.coefficients = coefficients
        self.grad = np.zeros_like(coefficients)
        self._v = basis.vectors.reshape(basis.rank, -1)  # (rank, r_out * k_aug)

    @property
    def params(self):
        return [self.coefficients]

    @property
    def grads(self):
        return [self.grad]

    @property
    def repr_in(self) -> int:
        return self.basis.shape.d_in

    @property
    def repr_out(self) -> int:
        return self.basis.shape.d_out

    def weight(self) -> np.ndarray:
        """Realized weight, shape [c_out, r_out, c_in, k_aug]."""
        r, co, ci = self.coefficients.shape
        ro, k = self.basis.shape.matrix_shape
        flat = self.coefficients.reshape(r, co * ci).T @ self._v  # (co*ci, ro*k)
        return flat.reshape(co, ci, ro, k).transpose(0, 2, 1, 3)

    def _weight_matrix(self) -> np.ndarray:
        co, ro, ci, k = (self.channels_out, self.repr_out, self.channels_in,
                         self.basis.shape.d_in_augmented)
        return self.weight().reshape(co * ro, ci * k)

    def _coefficient_grad(self, dw: np.ndarray) -> np.ndarray:
        # dW [co*ro, ci*k] -> dc[i, co, ci] = <dW[co, :, ci, :], V_i>
        co, ro, ci = self.channels_out, self.repr_out, self.channels_in
        k = self.basis.shape.d_in_augmented
        dw = dw.reshape(co, ro, ci, k).transpose(0, 2, 1, 3).reshape(co * ci, ro * k)
        return (self._v @ dw.T).reshape(-1, co, ci)

    def _augment(self, cols: np.ndarray) -> np.ndarray:
        if not self.basis.shape.bias:
            return cols
        ones = np.ones(cols.shape[:-1] + (1,))
        return np.concatenate([cols, ones], axis=-1)


class BasisLinear(_BasisLayer):
    """Dense layer with weights in the span of a (non-spatial) basis."""

    def forward(self, z: np.ndarray) -> np.ndarray:
        if z.ndim != 3 or z.shape[1:] != (self.channels_in, self.repr_in):
            raise ValueError(
                f"expected input [batch, {self.channels_in}, {self.repr_in}], got {z.shape}"
            )
        za = self._augment(z).reshape(z.shape[0], -1)
        wm = self._weight_matrix()
        self._cache = (za, wm)
        return (za @ wm.T).reshape(z.shape[0], self.channels_out, self.repr_out)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        za, wm = self._cache
        b = dy.shape[0]
        dy = dy.reshape(b, -1)
        self.grad[...] = self._coefficient_grad(dy.T @ za)
        dza = (dy @ wm).reshape(b, self.channels_in, -1)
        return dza[..., : self.repr_in] if self.basis.shape.bias else dza


class BasisConv(_BasisLayer):
    """Cross-correlation whose filters lie in the span of a spatial basis."""

    def __init__(self, basis: WeightBasis, channels_in: int, channels_out: int,
                 coefficients: np.ndarray | None = None, stride: int = 1, padding: int = 0):
        if basis.shape.spatial is None:
            raise ValueError("BasisConv needs a basis with a spatial filter shape")
        super().__init__(basis, channels_in, channels_out, coefficients)
        self.kernel = basis.shape.spatial
        self.stride = int(stride)
        self.padding = int(padding)

    def forward(self, z: np.ndarray) -> np.ndarray:
        if z.ndim != 5 or z.shape[1:3] != (self.channels_in, self.repr_in):
            raise ValueError(
                f"expected input [batch, {self.channels_in}, {self.repr_in}, H, W], got {z.shape}"
            )
        b, ci, ri, h, w = z.shape
        if h + 2 * self.padding < self.kernel[0] or w + 2 * self.padding < self.kernel[1]:
            raise ValueError(f"input {h}x{w} smaller than filter {self.kernel}")
        flat_in = z.reshape(b, ci * ri, h, w)
        cols = _im2col(flat_in, self.kernel, self.stride, self.padding)
        oh, ow = cols.shape[1:3]
        cols = self._augment(cols.reshape(b * oh * ow, ci, -1)).reshape(b * oh * ow, -1)
        wm = self._weight_matrix()
        self._cache = (cols, wm, flat_in.shape, (oh, ow))
        y = (cols @ wm.T).reshape(b, oh, ow, self.channels_out, self.repr_out)
        return y.transpose(0, 3, 4, 1, 2)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        cols, wm, in_shape, (oh, ow) = self._cache
        b = dy.shape[0]
        dy = dy.transpose(0, 3, 4, 1, 2).reshape(b * oh * ow, -1)
        self.grad[...] = self._coefficient_grad(dy.T @ cols)
        dcols = (dy @ wm).reshape(b * oh * ow, self.channels_in, -1)
        if self.basis.shape.bias:
            dcols = dcols[..., :-1]
        kh, kw = self.kernel
        dcols = dcols.reshape(b, oh, ow, self.channels_in * self.repr_in, kh, kw)
        dz = _col2im(dcols, in_shape, self.kernel, self.stride, self.padding)
        return dz.reshape(b, self.channels_in, self.repr_in, *in_shape[-2:])


class PlainLinear(Module):
    def __init__(self, features_in: int, features_out: int, weight=None, bias=None):
        self.weight = np.zeros((features_out, features_in)) if weight is None else np.asarray(weight, float)
        self.bias = np.zeros(features_out) if bias is None else np.asarray(bias, float)
        self._grads = [np.zeros_like(self.weight), np.zeros_like(self.bias)]

    @property
    def params(self):
        return [self.weight, self.bias]

    @property
    def grads(self):
        return self._grads

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ValueError(f"expected input [batch, {self.weight.shape[1]}], got {x.shape}")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, dy):
        self._grads[0][...] = dy.T @ self._x
        self._grads[1][...] = dy.sum(axis=0)
        return dy @ self.weight


class PlainConv(Module):
    def __init__(self, channels_in: int, channels_out: int, kernel: tuple[int, int],
                 stride: int = 1, padding: int = 0, weight=None, bias=None):
        self.kernel = tuple(kernel)
        self.stride, self.padding = int(stride), int(padding)
        wshape = (channels_out, channels_in, *self.kernel)
        self.weight = np.zeros(wshape) if weight is None else np.asarray(weight, float)
        self.bias = np.zeros(channels_out) if bias is None else np.asarray(bias, float)
        self._grads = [np.zeros_like(self.weight), np.zeros_like(self.bias)]

    @property
    def params(self):
        return [self.weight, self.bias]

    @property
    def grads(self):
        return self._grads

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.weight.shape[1]:
            raise ValueError(f"expected input [batch, {self.weight.shape[1]}, H, W], got {x.shape}")
        b = x.shape[0]
        cols = _im2col(x, self.kernel, self.stride, self.padding)
        oh, ow = cols.shape[1:3]
        cols = cols.reshape(b * oh * ow, -1)
        wm = self.weight.reshape(self.weight.shape[0], -1)
        self._cache = (cols, x.shape, (oh, ow))
        y = (cols @ wm.T + self.bias).reshape(b, oh, ow, -1)
        return y.transpose(0, 3, 1, 2)

    def backward(self, dy):
        cols, in_shape, (oh, ow) = self._cache
        b, co = dy.shape[:2]
        dy = dy.transpose(0, 2, 3, 1).reshape(b * oh * ow, co)
        wm = self.weight.reshape(co, -1)
        self._grads[0][...] = (dy.T @ cols).reshape(self.weight.shape)
        self._grads[1][...] = dy.sum(axis=0)
        dcols = (dy @ wm).reshape(b, oh, ow, in_shape[1], *self.kernel)
        return _col2im(dcols, in_shape, self.kernel, self.stride, self.padding)


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


class ReLU(Module):
    params: list = []
    grads: list = []

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._mask, dy, 0.0)


class GlobalMaxPool(Module):
    """Max over the two trailing (spatial) axes; commutes with square rotations."""

    params: list = []
    grads: list = []

    def forward(self, x):
        lead = x.shape[:-2]
        flat = x.reshape(*lead, -1)
        self._shape = x.shape
        self._arg = flat.argmax(axis=-1)
        return np.take_along_axis(flat, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        lead = self._shape[:-2]
        dx = np.zeros((*lead, self._shape[-2] * self._shape[-1]))
        np.put_along_axis(dx, self._arg[..., None], dy[..., None], axis=-1)
        return dx.reshape(self._shape)


def init_layer(
    basis: WeightBasis,
    channels_in: int,
    channels_out: int,
    scheme: Scheme = "xavier",
    seed: int | np.random.Generator = 0,
    stride: int = 1,
    padding: int = 0,
) -> BasisLinear | BasisConv:
    """Basis layer with i.i.d. normal coefficients scaled per ``scheme``.

    Fan-in counts ``channels_in * repr_in * filter_area`` (fan-out likewise),
    so the scale matches an unconstrained layer of the same realized size.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = basis.shape
    fan_in = channels_in * shape.d_in * shape.area
    fan_out = channels_out * shape.d_out * shape.area
    std = init_std(scheme, fan_in, fan_out)
    coeffs = rng.normal(0.0, std, size=(basis.rank, channels_out, channels_in))
    if shape.spatial is None:
        return BasisLinear(basis, channels_in, channels_out, coeffs)
    return BasisConv(basis, channels_in, channels_out, coeffs, stride=stride, padding=padding)
