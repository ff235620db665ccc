"""Orthonormal 2-D DCT-II and its exact inverse, as separable matrix products.

The basis matrix for length M has entries B[u, i] = a(u) * cos((2i+1) u pi / (2M))
with a(0) = sqrt(1/M) and a(u) = sqrt(2/M) otherwise, so B is orthogonal and
the transform preserves Frobenius norm. The forward transform of a 2-d map f
is B_M f B_N^T; the inverse is B_M^T C B_N. Both are plain matmul chains, so
they are differentiable through the engine.

Transforms apply to the trailing two axes; any leading axes (channels,
batch) are carried along unchanged.
"""

from __future__ import annotations

import math

import numpy as np

from . import engine as E
from .engine import ShapeError, Tensor


def basis_matrix(m: int) -> np.ndarray:
    if m < 1:
        raise ShapeError(f"DCT length must be >= 1, got {m}")
    i = np.arange(m)
    u = i[:, None]
    scale = np.full((m, 1), math.sqrt(2.0 / m))
    scale[0, 0] = math.sqrt(1.0 / m)
    return scale * np.cos((2 * i[None, :] + 1) * u * math.pi / (2 * m))


class DctPlan:
    """Cached cosine bases for one (height, width) pair.

    Immutable after construction; safe to share across threads.
    """

    def __init__(self, height: int, width: int):
        self.height = height
        self.width = width
        self.basis_h = basis_matrix(height)
        self.basis_w = basis_matrix(width)
        # constant graph leaves, shared by every dct2/idct2 call
        self._bh = Tensor(self.basis_h)
        self._bh_t = Tensor(self.basis_h.T.copy())
        self._bw = Tensor(self.basis_w)
        self._bw_t = Tensor(self.basis_w.T.copy())

    def _check(self, shape: tuple, what: str) -> None:
        if len(shape) < 2 or shape[-2] != self.height or shape[-1] != self.width:
            raise ShapeError(f"{what}: trailing dims of {shape} do not match "
                             f"plan {self.height}x{self.width}")

    # numpy-only paths for non-differentiable consumers (augmentation, synth)

    def dct2_array(self, x: np.ndarray) -> np.ndarray:
        self._check(x.shape, "dct2")
        return self.basis_h @ x @ self.basis_w.T

    def idct2_array(self, c: np.ndarray) -> np.ndarray:
        self._check(c.shape, "idct2")
        return self.basis_h.T @ c @ self.basis_w


_PLANS: dict[tuple, DctPlan] = {}


def plan_for(height: int, width: int) -> DctPlan:
    key = (height, width)
    if key not in _PLANS:
        _PLANS[key] = DctPlan(height, width)
    return _PLANS[key]


def dct2(image: Tensor, plan: DctPlan) -> Tensor:
    """Coefficient map of `image` (..., M, N), one transform per leading index."""
    plan._check(image.shape, "dct2")
    return E.matmul(E.matmul(plan._bh, image), plan._bw_t)


def idct2(coeffs: Tensor, plan: DctPlan) -> Tensor:
    """Exact inverse of dct2."""
    plan._check(coeffs.shape, "idct2")
    return E.matmul(E.matmul(plan._bh_t, coeffs), plan._bw)
