"""Variational latent space: affine mean/log-variance heads, reparameterized
sampling, analytic KL against the standard-normal prior, and the combined
variational loss (negative ELBO, so minimizing it tightens the bound).

Every function accepts a single example vector [F] or a batch [B,F]; batch
reductions are means over examples, so loss magnitudes do not depend on batch
size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "LOG_VAR_MIN",
    "LOG_VAR_MAX",
    "LatentHead",
    "LatentCode",
    "ReconHead",
    "encode",
    "reparameterize",
    "kl_standard_normal",
    "reconstruction_loglik",
    "variational_loss",
]

# exp() of +-10 spans ~9 decades of sigma^2; anything past that is numerics, not signal
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0

_LOG_2PI = math.log(2.0 * math.pi)


def _fan_in_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class LatentHead:
    """Affine heads mapping encoder features to (mu, log sigma^2)."""

    w_mean: Tensor
    b_mean: Tensor
    w_logvar: Tensor
    b_logvar: Tensor
    latent_dim: int

    @classmethod
    def create(cls, feature_dim, latent_dim, rng, dtype=None, logvar_bias=-4.0):
        """Fan-in-uniform mean head; the log-variance head starts small and
        biased negative so the latent is near-deterministic at initialization
        (sigma ~ e^(logvar_bias/2)) instead of drowning the mean in noise."""
        dtype = dtype or ad.default_dtype()
        return cls(
            w_mean=Tensor(_fan_in_uniform(rng, (latent_dim, feature_dim), feature_dim, dtype), requires_grad=True),
            b_mean=Tensor(np.zeros(latent_dim, dtype=dtype), requires_grad=True),
            w_logvar=Tensor(0.1 * _fan_in_uniform(rng, (latent_dim, feature_dim), feature_dim, dtype), requires_grad=True),
            b_logvar=Tensor(np.full(latent_dim, logvar_bias, dtype=dtype), requires_grad=True),
            latent_dim=latent_dim,
        )

    def params(self, prefix):
        return {
            f"{prefix}.w_mean": self.w_mean,
            f"{prefix}.b_mean": self.b_mean,
            f"{prefix}.w_logvar": self.w_logvar,
            f"{prefix}.b_logvar": self.b_logvar,
        }


@dataclass
class LatentCode:
    """Per-example posterior parameters plus the reparameterized draws.

    Invariant: samples[l] == mu + exp(log_var / 2) * epsilons[l] exactly, by
    construction through `reparameterize`.
    """

    mu: Tensor
    log_var: Tensor
    samples: list
    epsilons: list


@dataclass
class ReconHead:
    """Two-layer decoder mapping a latent sample back to encoder-feature space."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, latent_dim, feature_dim, hidden_dim, rng, dtype=None):
        dtype = dtype or ad.default_dtype()
        return cls(
            w1=Tensor(_fan_in_uniform(rng, (hidden_dim, latent_dim), latent_dim, dtype), requires_grad=True),
            b1=Tensor(np.zeros(hidden_dim, dtype=dtype), requires_grad=True),
            w2=Tensor(_fan_in_uniform(rng, (feature_dim, hidden_dim), hidden_dim, dtype), requires_grad=True),
            b2=Tensor(np.zeros(feature_dim, dtype=dtype), requires_grad=True),
        )

    def params(self, prefix):
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }

    def __call__(self, z):
        single = z.ndim == 1
        if single:
            z = ad.reshape(z, (1, z.shape[0]))
        h = ad.relu(z @ self.w1.T + self.b1)
        out = h @ self.w2.T + self.b2
        if single:
            out = ad.reshape(out, (out.shape[1],))
        return out


def _check_feature_dim(x, head):
    feat = x.shape[-1]
    expected = head.w_mean.shape[1]
    if feat != expected:
        raise ValueError(f"feature dim {feat} does not match head input dim {expected}")


def encode(x_features, head):
    """Affine heads: mu = W_mu x + b_mu, log_var = W_lv x + b_lv (clamped)."""
    x = x_features if isinstance(x_features, Tensor) else Tensor(x_features)
    _check_feature_dim(x, head)
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.shape[0]))
    mu = x @ head.w_mean.T + head.b_mean
    log_var = ad.clip(x @ head.w_logvar.T + head.b_logvar, LOG_VAR_MIN, LOG_VAR_MAX)
    if single:
        mu = ad.reshape(mu, (head.latent_dim,))
        log_var = ad.reshape(log_var, (head.latent_dim,))
    return mu, log_var


def reparameterize(mu, log_var, eps):
    """z = mu + exp(log_var / 2) * eps, differentiable in mu and log_var.

    `eps` is a fixed noise draw (numpy array or constant tensor); no gradient
    flows into it.
    """
    eps_t = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=mu.dtype))
    if eps_t.shape != mu.shape or mu.shape != log_var.shape:
        raise ValueError(
            f"shape mismatch: mu {mu.shape}, log_var {log_var.shape}, eps {eps_t.shape}"
        )
    sigma = ad.exp(0.5 * log_var)
    return mu + sigma * eps_t


def kl_standard_normal(mu, log_var):
    """KL(q || N(0, I)) = -1/2 sum_i (1 + log var_i - mu_i^2 - var_i), >= 0.

    Summed over latent dimensions; averaged over the batch when given [B, I]
    inputs. This is the divergence itself (a nonnegative number); the ELBO
    carries it with a minus sign.
    """
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    log_var = log_var if isinstance(log_var, Tensor) else Tensor(log_var)
    if mu.shape != log_var.shape:
        raise ValueError(f"shape mismatch: mu {mu.shape} vs log_var {log_var.shape}")
    inner = 1.0 + log_var - mu * mu - ad.exp(log_var)
    per_example = -0.5 * ad.tsum(inner, axis=-1)
    if mu.ndim == 1:
        return per_example
    return ad.tmean(per_example)


def reconstruction_loglik(x_features, z, recon):
    """Unit-variance Gaussian log-likelihood of x under the decoded z.

    log p(x|z) = -1/2 ||x - recon(z)||^2 - (dim/2) log(2 pi). `z` may be a
    single sample or a list of samples; lists are averaged, matching a
    multi-draw Monte-Carlo estimate. Batched inputs are averaged over examples.
    """
    x = x_features if isinstance(x_features, Tensor) else Tensor(x_features)
    samples = z if isinstance(z, (list, tuple)) else [z]
    dim = x.shape[-1]
    total = None
    for zl in samples:
        xhat = recon(zl)
        if xhat.shape != x.shape:
            raise ValueError(f"reconstruction shape {xhat.shape} != feature shape {x.shape}")
        diff = x - xhat
        per_example = -0.5 * ad.tsum(diff * diff, axis=-1) + (-0.5 * dim * _LOG_2PI)
        ll = per_example if x.ndim == 1 else ad.tmean(per_example)
        total = ll if total is None else total + ll
    return (1.0 / len(samples)) * total


def variational_loss(code, x_features, recon):
    """Negative ELBO: KL(q || prior) minus the reconstruction log-likelihood.

    Minimizing this maximizes the evidence lower bound. The beta weighting
    applied during meta-training lives in the caller; this value is unweighted.
    """
    return kl_standard_normal(code.mu, code.log_var) - reconstruction_loglik(
        x_features, code.samples, recon
    )
