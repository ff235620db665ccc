"""Learnable three-way frequency partition of DCT coefficient maps.

Two unconstrained scalars are squashed to cutoffs 0 < c1 <= c2 < 1. Sigmoid
ramps of sharpness k around those cutoffs, evaluated on the normalized
frequency index f(i, j) = (i + j) / (M + N - 2), give a low mask and a high
mask; the mid mask is defined as their complement, so the three masks sum
to one at every coefficient position by construction. Multiplying the
coefficient map by each mask and inverting yields three band-specific
images that sum back to the original.
"""

from __future__ import annotations

import math

import numpy as np

from . import engine as E
from .dct import DctPlan, dct2, idct2
from .engine import DomainError, Tensor
from .nn import Module, parameter


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


class CutoffParams(Module):
    """The two learnable cutoff scalars plus the fixed mask sharpness.

    With `ordered=True` (default) the second cutoff is parameterized as
    c2 = c1 + (1 - c1) * sigmoid(raw_c2), which enforces c1 <= c2 < 1 while
    leaving both raw parameters free. `ordered=False` uses two independent
    sigmoids; nothing then prevents the cutoffs from crossing.
    """

    def __init__(self, init_c1: float = 1.0 / 3.0, init_c2: float = 2.0 / 3.0,
                 k: float = 50.0, ordered: bool = True):
        if k <= 0:
            raise DomainError(f"mask sharpness must be positive, got {k}")
        if not (0.0 < init_c1 < 1.0 and init_c1 <= init_c2 < 1.0):
            raise DomainError(f"cutoff initializers must satisfy 0 < c1 <= c2 < 1, "
                              f"got ({init_c1}, {init_c2})")
        self.k = float(k)
        self.ordered = ordered
        self.raw_c1 = parameter(_logit(init_c1))
        if ordered:
            # invert c2 = c1 + (1 - c1) * s  =>  s = (c2 - c1) / (1 - c1)
            frac = (init_c2 - init_c1) / (1.0 - init_c1)
            frac = min(max(frac, 1e-9), 1.0 - 1e-9)
            self.raw_c2 = parameter(_logit(frac))
        else:
            self.raw_c2 = parameter(_logit(init_c2))

    def cutoffs(self) -> tuple[Tensor, Tensor]:
        """(c1, c2) as 0-d graph tensors."""
        c1 = E.sigmoid(self.raw_c1)
        if self.ordered:
            c2 = c1 + (1.0 - c1) * E.sigmoid(self.raw_c2)
        else:
            c2 = E.sigmoid(self.raw_c2)
        return c1, c2

    def cutoff_values(self) -> tuple[float, float]:
        with E.no_grad():
            c1, c2 = self.cutoffs()
        return c1.item(), c2.item()


def frequency_index(m: int, n: int) -> Tensor:
    """Constant map f(i, j) = (i + j) / (M + N - 2), zero for the 1x1 case.

    A 1x1 map has a single DC coefficient; by convention its index is 0
    (all-low-band) rather than 0/0.
    """
    if m < 1 or n < 1:
        raise DomainError(f"frequency index needs positive extents, got {m}x{n}")
    if m == 1 and n == 1:
        return Tensor(np.zeros((1, 1)))
    i = np.arange(m)[:, None]
    j = np.arange(n)[None, :]
    return Tensor((i + j) / float(m + n - 2))


def compute_masks(cut: CutoffParams, f: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Soft (low, mid, high) masks over a frequency-index map.

    low = sigmoid(k (c1 - f)), high = sigmoid(k (f - c2)), mid = 1 - low - high.
    All three are differentiable in the raw cutoffs; they sum to one exactly.
    """
    c1, c2 = cut.cutoffs()
    k = cut.k
    low = E.sigmoid(k * (c1 - f))
    high = E.sigmoid(k * (f - c2))
    # parenthesized so that (low + high) + mid reproduces 1.0 bit-exactly
    mid = 1.0 - (low + high)
    return low, mid, high


def _expand_like(mask: Tensor, shape: tuple) -> Tensor:
    """Replicate an (M, N) mask across the leading axes of `shape`."""
    lead = len(shape) - 2
    out = E.reshape(mask, (1,) * lead + mask.shape)
    for axis in range(lead):
        out = E.expand(out, axis, shape[axis])
    return out


def band_decompose(image: Tensor, cut: CutoffParams,
                   plan: DctPlan) -> tuple[Tensor, Tensor, Tensor]:
    """Split (..., M, N) images into low/mid/high band reconstructions.

    The same mask multiplies every channel's coefficient map. Because the
    masks partition unity and the transform is linear, the three outputs
    sum to the input exactly (up to roundoff).
    """
    coeffs = dct2(image, plan)
    f = frequency_index(plan.height, plan.width)
    bands = []
    for mask in compute_masks(cut, f):
        mask_full = _expand_like(mask, coeffs.shape) if coeffs.ndim > 2 else mask
        bands.append(idct2(E.mul(mask_full, coeffs), plan))
    return tuple(bands)
