"""Variational Bayesian linear classifier head.

Weights and biases carry independent Gaussian posteriors N(mu, exp(l)),
parameterized by mean and log-variance so no constraint is needed to keep
the scale positive. Sampling goes through the location-scale form
w = mu + exp(l/2) * eps with caller-supplied standard-normal eps, which
keeps gradients flowing to mu and l. The KL to an isotropic N(0, sigma_p^2)
prior has the closed form

    sum [ log sigma_p - l/2 + (exp(l) + mu^2) / (2 sigma_p^2) - 1/2 ],

which at sigma_p = 1 reduces to 1/2 * sum(-l + exp(l) + mu^2 - 1).
"""

from __future__ import annotations

import math

import numpy as np

from . import engine as E
from .engine import DomainError, ShapeError, Tensor
from .nn import Module, parameter, trunc_normal
from .rng import Rng


class BayesLinearParams(Module):
    """Posterior means/log-variances for a (classes x features) linear map."""

    def __init__(self, in_dim: int, num_classes: int, rng: Rng,
                 prior_sigma: float = 1.0, init_std: float = 0.05,
                 init_logvar: float = -6.0):
        if prior_sigma <= 0:
            raise DomainError(f"prior scale must be positive, got {prior_sigma}")
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.prior_sigma = float(prior_sigma)
        self.mu_w = parameter(trunc_normal((num_classes, in_dim), init_std, rng.derive("mu_w")))
        self.logvar_w = parameter(np.full((num_classes, in_dim), float(init_logvar)))
        self.mu_b = parameter(np.zeros(num_classes))
        self.logvar_b = parameter(np.full(num_classes, float(init_logvar)))

    def noise_shapes(self) -> tuple[tuple, tuple]:
        return (self.num_classes, self.in_dim), (self.num_classes,)


def sample_weights(p: BayesLinearParams, eps_w, eps_b) -> tuple[Tensor, Tensor]:
    """One reparameterized posterior draw (W, b) from injected noise."""
    eps_w = eps_w if isinstance(eps_w, Tensor) else Tensor(eps_w)
    eps_b = eps_b if isinstance(eps_b, Tensor) else Tensor(eps_b)
    if eps_w.shape != p.mu_w.shape or eps_b.shape != p.mu_b.shape:
        raise ShapeError(f"noise shapes {eps_w.shape}/{eps_b.shape} do not match "
                         f"parameters {p.mu_w.shape}/{p.mu_b.shape}")
    w = E.add(p.mu_w, E.mul(E.exp(E.mul(p.logvar_w, 0.5)), eps_w))
    b = E.add(p.mu_b, E.mul(E.exp(E.mul(p.logvar_b, 0.5)), eps_b))
    return w, b


def logits(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """z = W x + b for a single feature vector x in R^D."""
    if x.ndim != 1 or x.shape[0] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"logits: incompatible shapes x={x.shape}, W={w.shape}, b={b.shape}")
    z = E.matmul(w, E.reshape(x, (x.shape[0], 1)))
    return E.add(E.reshape(z, (w.shape[0],)), b)


def batch_logits(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """z = x W^T + b for (B, D) features."""
    z = E.matmul(x, E.transpose(w))
    bias = E.expand(E.reshape(b, (1, b.shape[0])), 0, x.shape[0])
    return E.add(z, bias)


def _kl_term(mu: Tensor, logvar: Tensor, prior_sigma: float) -> Tensor:
    log_sp = math.log(prior_sigma)
    inv_2sp2 = 0.5 / (prior_sigma * prior_sigma)
    per_param = (log_sp - 0.5) - E.mul(logvar, 0.5) \
        + E.mul(E.add(E.exp(logvar), E.mul(mu, mu)), inv_2sp2)
    return E.tsum(per_param)


def kl_loss(p: BayesLinearParams) -> Tensor:
    """Closed-form KL(posterior || prior), summed over weights and biases."""
    if p.prior_sigma <= 0:
        raise DomainError(f"prior scale must be positive, got {p.prior_sigma}")
    return E.add(_kl_term(p.mu_w, p.logvar_w, p.prior_sigma),
                 _kl_term(p.mu_b, p.logvar_b, p.prior_sigma))


def predictive_logits(x: Tensor, p: BayesLinearParams, mode: str = "mean",
                      rng: Rng | None = None, samples: int = 1) -> Tensor:
    """Inference-time logits: posterior-mean weights, or an MC average.

    The paper-side training objective never fixes a prediction rule; mean
    mode is the default and mc(S) averages S sampled logit vectors.
    """
    if mode == "mean":
        return logits(x, p.mu_w, p.mu_b)
    if mode == "mc":
        if samples < 1:
            raise DomainError(f"mc mode needs >= 1 sample, got {samples}")
        if rng is None:
            raise DomainError("mc mode needs an rng for posterior draws")
        acc = None
        for _ in range(samples):
            w, b = sample_weights(p, rng.normals(p.mu_w.shape), rng.normals(p.mu_b.shape))
            z = logits(x, w, b)
            acc = z if acc is None else E.add(acc, z)
        return E.div(acc, float(samples))
    raise DomainError(f"unknown predictive mode {mode!r}")
