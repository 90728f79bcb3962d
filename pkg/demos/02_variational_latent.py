#!/usr/bin/env python3
"""The variational latent space in isolation: encode features to a posterior,
sample with the reparameterization trick, and check the analytic KL against a
Monte-Carlo estimate."""

import math

import numpy as np

from metalatent import autodiff as ad
from metalatent import latent
from metalatent.autodiff import Tensor

rng = np.random.default_rng(42)
feature_dim, latent_dim = 12, 4

with ad.precision("float64"):
    head = latent.LatentHead.create(feature_dim, latent_dim, rng)
    recon = latent.ReconHead.create(latent_dim, feature_dim, hidden_dim=16, rng=rng)

    x = Tensor(rng.standard_normal(feature_dim))
    mu, log_var = latent.encode(x, head)
    print("posterior mean:   ", np.round(mu.data, 3))
    print("posterior log-var:", np.round(log_var.data, 3))

    # z = mu + sigma * eps keeps the sampling differentiable in (mu, log_var).
    eps = rng.standard_normal(latent_dim)
    z = latent.reparameterize(mu, log_var, eps)
    print("one latent sample:", np.round(z.data, 3))

    # Analytic KL to the standard-normal prior...
    kl = float(latent.kl_standard_normal(mu, log_var).data)
    print(f"analytic KL(q || N(0,I)) = {kl:.4f}")

    # ...matches a brute-force Monte-Carlo estimate of E_q[log q - log p].
    n = 200_000
    sigma = np.exp(0.5 * log_var.data)
    draws = mu.data + sigma * rng.standard_normal((n, latent_dim))
    log_q = (-0.5 * ((draws - mu.data) / sigma) ** 2 - 0.5 * math.log(2 * math.pi) - 0.5 * log_var.data).sum(1)
    log_p = (-0.5 * draws**2 - 0.5 * math.log(2 * math.pi)).sum(1)
    mc = float((log_q - log_p).mean())
    print(f"Monte-Carlo KL over {n} draws = {mc:.4f} (rel err {abs(mc - kl) / kl:.2%})")

    # The combined variational loss is a negative evidence lower bound:
    # minimizing it pulls the posterior toward the prior AND makes the decoded
    # sample reconstruct the input features.
    code = latent.LatentCode(mu=mu, log_var=log_var, samples=[z], epsilons=[eps])
    loss = latent.variational_loss(code, x, recon)
    print(f"variational loss (negative ELBO): {float(loss.data):.4f}")

    # Gradients flow into the heads, the decoder, and nothing else.
    params = {**head.params("head"), **recon.params("recon")}
    grads = ad.grad(loss, params)
    gnorms = {k: float(np.abs(v).max()) for k, v in grads.items()}
    print("largest head gradient:", max(gnorms, key=gnorms.get))

    # A few descent steps tighten the bound.
    for _ in range(200):
        mu2, lv2 = latent.encode(x, head)
        code2 = latent.LatentCode(
            mu=mu2, log_var=lv2, samples=[latent.reparameterize(mu2, lv2, eps)], epsilons=[eps]
        )
        loss2 = latent.variational_loss(code2, x, recon)
        grads = ad.grad(loss2, params)
        for name, p in params.items():
            p.data = p.data - 0.01 * grads[name]
    print(f"variational loss after 200 steps: {float(loss2.data):.4f}")
