"""Softmax-weighted fusion of branch feature vectors.

A vector of raw scores u is softmaxed into convex coefficients; the fused
representation is the coefficient-weighted sum of the branch features. Both
the scores and the branch features receive gradients.
"""

from __future__ import annotations

import numpy as np

from . import engine as E
from .engine import ShapeError, Tensor
from .nn import Module, parameter


class FusionParams(Module):
    def __init__(self, branches: int = 4):
        if branches < 2:
            raise ValueError(f"fusion needs >= 2 branches, got {branches}")
        self.branches = branches
        self.u = parameter(np.zeros(branches))

    def coefficients(self) -> Tensor:
        return E.softmax(self.u)

    def coefficient_values(self) -> np.ndarray:
        with E.no_grad():
            return self.coefficients().data.copy()


def fuse(features: list[Tensor], params: FusionParams) -> Tensor:
    """Convex combination sum_i softmax(u)_i * h_i.

    Branch features may be (D,) vectors or (B, D) batches, but must all
    share one shape.
    """
    if len(features) != params.branches:
        raise ShapeError(f"fusion over {params.branches} branches got "
                         f"{len(features)} feature vectors")
    shape = features[0].shape
    for h in features[1:]:
        if h.shape != shape:
            raise ShapeError(f"branch feature shapes differ: {shape} vs {h.shape}")
    alphas = params.coefficients()
    out = None
    for i, h in enumerate(features):
        term = E.mul(E.tslice(alphas, i), h)
        out = term if out is None else E.add(out, term)
    return out


def fusion_entropy(params: FusionParams) -> Tensor:
    """Shannon entropy of the fusion coefficients (for optional regularization)."""
    alphas = params.coefficients()
    return E.neg(E.tsum(E.mul(alphas, E.log(alphas))))
