"""Central-difference gradient oracle and the self-check suites.

The oracle is deliberately independent of the reverse-mode engine: it only
perturbs raw parameter arrays and re-evaluates a scalar function, so agreement
between the two is meaningful evidence rather than a tautology.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

__all__ = [
    "NonDeterministicFunction",
    "finite_difference_gradient",
    "max_relative_error",
    "run_gradient_suites",
]


class NonDeterministicFunction(RuntimeError):
    """Two baseline evaluations of the checked function disagreed."""


def finite_difference_gradient(f, params, h=1e-5, coords=None):
    """Central differences (f(p+h) - f(p-h)) / (2h) per coordinate.

    `f` is a zero-argument callable returning a scalar; it must read the
    current contents of the tensors in `params` (name -> Tensor). `coords`
    optionally restricts probing to flat indices per parameter name; unprobed
    coordinates are left at zero in the result.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")

    def evaluate():
        out = f()
        return float(out.data) if isinstance(out, ad.Tensor) else float(out)

    base1 = evaluate()
    base2 = evaluate()
    if base1 != base2:
        raise NonDeterministicFunction(
            f"baseline evaluations differ: {base1!r} vs {base2!r}"
        )
    grads = {}
    for name, p in params.items():
        probe = range(p.data.size) if coords is None else coords[name]
        g = np.zeros(p.data.size, dtype=np.float64)
        for i in probe:
            old = p.data.flat[i]
            p.data.flat[i] = old + h
            fp = evaluate()
            p.data.flat[i] = old - h
            fm = evaluate()
            p.data.flat[i] = old
            g[i] = (fp - fm) / (2.0 * h)
        grads[name] = g.reshape(p.data.shape)
    return grads


def max_relative_error(analytic, numeric, coords=None, floor=1e-6):
    """Worst relative disagreement |a - n| / max(|a|, |n|, floor) over coords."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        af, nf = np.asarray(a, dtype=np.float64).reshape(-1), np.asarray(n).reshape(-1)
        idx = np.arange(af.size) if coords is None else np.asarray(coords[name])
        if idx.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(af[idx]), np.abs(nf[idx])), floor)
        err = np.abs(af[idx] - nf[idx]) / denom
        worst = max(worst, float(err.max()))
    return worst


def _sample_coords(params, rng, per_param):
    return {
        name: rng.choice(p.data.size, size=min(per_param, p.data.size), replace=False)
        for name, p in params.items()
    }


# ---------------------------------------------------------------------------
# self-check suites (used by the `gradcheck` CLI command and acceptance tests)
# ---------------------------------------------------------------------------


def _suite_primitives(seed):
    rng = np.random.default_rng(seed)
    w1 = ad.Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    w2 = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    x = ad.Tensor(rng.standard_normal((6, 5)))
    params = {"w1": w1, "w2": w2, "b": b}

    def f():
        h = ad.relu(x @ w1)
        out = h @ w2 + b
        return ad.tsum(ad.logsumexp(out, axis=-1)) + ad.tmean(ad.exp(ad.clip(out, -3, 3)))

    analytic = ad.grad(f(), params)
    numeric = finite_difference_gradient(f, params)
    return max_relative_error(analytic, numeric)


def _suite_conv(seed):
    rng = np.random.default_rng(seed)
    x = ad.Tensor(rng.standard_normal((2, 6, 6)))
    k = ad.Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
    kb = ad.Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
    params = {"k": k, "kb": kb}

    def f():
        y = ad.conv2d(x, k, stride=1, padding=1) + ad.reshape(kb, (3, 1, 1))
        return ad.tsum(ad.maxpool2x2(ad.relu(y)))

    analytic = ad.grad(f(), params)
    numeric = finite_difference_gradient(f, params)
    return max_relative_error(analytic, numeric)


def _suite_variational(seed):
    from . import latent

    rng = np.random.default_rng(seed)
    feat_dim, latent_dim = 6, 3
    head = latent.LatentHead.create(feat_dim, latent_dim, rng)
    recon = latent.ReconHead.create(latent_dim, feat_dim, hidden_dim=5, rng=rng)
    x = ad.Tensor(rng.standard_normal((4, feat_dim)))
    eps = [rng.standard_normal((4, latent_dim))]
    params = {**head.params("head"), **recon.params("recon")}

    def f():
        mu, log_var = latent.encode(x, head)
        code = latent.LatentCode(
            mu=mu,
            log_var=log_var,
            samples=[latent.reparameterize(mu, log_var, e) for e in eps],
            epsilons=eps,
        )
        return latent.variational_loss(code, x, recon)

    analytic = ad.grad(f(), params)
    numeric = finite_difference_gradient(f, params)
    return max_relative_error(analytic, numeric)


def _suite_ridge(seed):
    from . import baselearners as bl

    rng = np.random.default_rng(seed)
    feats = ad.Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    onehot = np.eye(3)[rng.integers(0, 3, size=6)]
    params = {"feats": feats}

    def f():
        sol = bl.ridge_solve(feats, onehot, ridge_reg=0.3)
        return ad.tsum(ad.mul(sol.weights, sol.weights))

    analytic = ad.grad(f(), params)
    numeric = finite_difference_gradient(f, params)
    return max_relative_error(analytic, numeric)


def _suite_svm(seed):
    from . import baselearners as bl

    rng = np.random.default_rng(seed)
    labels = np.array([0, 0, 1, 1, 2, 2])
    base = np.repeat(np.eye(3) * 2.0, 2, axis=0)
    feats = ad.Tensor(base + 0.25 * rng.standard_normal((6, 3)), requires_grad=True)
    # tight solver tolerance: finite differences divide solution noise by 2h
    cfg = bl.SolverConfig(C=1.0, tol=1e-11, max_iters=100)
    params = {"feats": feats}

    def f():
        sol = bl.svm_cs_solve(feats, labels, cfg)
        probe = ad.Tensor(np.linspace(-1, 1, sol.weights.size).reshape(sol.weights.shape))
        return ad.tsum(ad.mul(sol.weights, probe))

    analytic = ad.grad(f(), params)
    numeric = finite_difference_gradient(f, params, h=1e-4)
    return max_relative_error(analytic, numeric)


def _suite_meta(seed):
    from . import episodes, model, training

    rng = np.random.default_rng(seed)
    mcfg = model.ModelConfig(
        in_channels=1,
        image_side=2,
        conv_channels=(4,),
        latent_dim=3,
        decoder_channels=(4,),
        decoder_spatial=1,
        recon_hidden=4,
    )
    mp = model.MetaParams.create(mcfg, rng)
    cfg = training.TrainConfig(
        way=2,
        shot=1,
        query_per_class=2,
        inner_steps=0,
        base_learner="svm",
        latent_dim=3,
        solver_tol=1e-11,
        solver_max_iters=100,
    )
    data = episodes.synth_generate("gaussian_blobs", 4, 8, 2, seed=seed, difficulty=0.3)
    ep = episodes.sample_episode(data, episodes.EpisodeSpec(2, 1, 2), rng)
    eps_draws = [rng.standard_normal((ep.support_x.shape[0] + ep.query_x.shape[0], 3))]
    params = mp.params()

    def f():
        return training.episode_meta_loss(ep, mp, cfg, eps_draws)

    coords = _sample_coords(params, np.random.default_rng(seed + 1), per_param=4)
    analytic = ad.grad(f(), params)
    numeric = finite_difference_gradient(f, params, h=1e-5, coords=coords)
    return max_relative_error(analytic, numeric, coords=coords)


SUITES = (
    ("primitive_ops", _suite_primitives, 1e-4),
    ("conv_pool", _suite_conv, 1e-4),
    ("variational_loss", _suite_variational, 1e-4),
    ("ridge_implicit", _suite_ridge, 1e-3),
    ("svm_implicit", _suite_svm, 1e-3),
    ("full_meta_loss", _suite_meta, 1e-3),
)


def run_gradient_suites(seed=0):
    """Run every finite-difference suite in 64-bit mode.

    Returns a list of (name, max_rel_error, tolerance, passed).
    """
    results = []
    with ad.precision("float64"):
        for name, fn, tol in SUITES:
            err = fn(seed)
            results.append((name, err, tol, err < tol))
    return results
