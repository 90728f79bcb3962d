"""Episodic two-loop training: per-episode convex adaptation in the inner
loop, outer-loop optimization of the shared parameters against query loss plus
the weighted variational loss, plus the deterministic evaluation protocol.

Episode sampling and noise use independent streams derived from
(master_seed, tag, index), so training order, validation sets, and evaluation
are reproducible regardless of threading; gradients within a meta-batch are
reduced in fixed episode order.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import baselearners as bl
from . import episodes as eps_mod
from . import latent
from . import model as model_mod
from .optim import OptimizerState, sgd_nesterov_step

__all__ = [
    "TrainConfig",
    "MetricsReport",
    "lr_schedule",
    "inner_adapt",
    "meta_loss",
    "episode_meta_loss",
    "meta_train",
    "meta_evaluate",
    "ci95_halfwidth",
    "metrics_csv",
    "summary_json",
]

DEFAULT_LR_ANCHORS = ((1, 0.1), (20, 0.006), (40, 0.0012), (50, 0.00024))

CSV_COLUMNS = "epoch,split,mean_acc,ci95,ce_loss,var_loss,beta,varphi,lambda"


@dataclass
class TrainConfig:
    epochs: int = 60
    episodes_per_epoch: int = 1000
    meta_batch_size: int = 4
    way: int = 5
    shot: int = 1
    query_per_class: int = 15
    lr_anchors: tuple = DEFAULT_LR_ANCHORS
    inner_steps: int = 1
    base_learner: str = "svm"
    latent_dim: int = 64
    master_seed: int = 0
    mc_samples: int = 1
    var_loss_on: str = "both"
    val_episodes: int = 200
    threads: int = 1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    svm_c: float = 0.1
    ridge_reg: float = 1.0
    solver_tol: float = 1e-8
    solver_max_iters: int = 50
    lambda_init: float = 0.01
    varphi_init: float = 1.0
    beta_init: float = 0.1
    model: model_mod.ModelConfig = field(default_factory=model_mod.ModelConfig)

    def __post_init__(self):
        for name in ("epochs", "episodes_per_epoch", "meta_batch_size", "mc_samples", "threads"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.inner_steps < 0:
            raise ValueError(f"inner_steps must be >= 0, got {self.inner_steps}")
        if self.base_learner not in ("svm", "rr"):
            raise ValueError(f"base_learner must be 'svm' or 'rr', got {self.base_learner!r}")
        if self.var_loss_on not in ("support", "query", "both"):
            raise ValueError(f"var_loss_on must be support/query/both, got {self.var_loss_on!r}")
        anchors = tuple((int(e), float(lr)) for e, lr in self.lr_anchors)
        if any(b[0] <= a[0] for a, b in zip(anchors, anchors[1:])):
            raise ValueError(f"lr anchor epochs must be ascending, got {anchors}")
        self.lr_anchors = anchors
        if self.model.latent_dim != self.latent_dim:
            self.model = model_mod.ModelConfig(
                in_channels=self.model.in_channels,
                image_side=self.model.image_side,
                conv_channels=self.model.conv_channels,
                latent_dim=self.latent_dim,
                decoder_channels=self.model.decoder_channels,
                decoder_spatial=self.model.decoder_spatial,
                recon_hidden=self.model.recon_hidden,
            )
        self.episode_spec = eps_mod.EpisodeSpec(self.way, self.shot, self.query_per_class)

    def solver_config(self):
        return bl.SolverConfig(
            C=self.svm_c, ridge_reg=self.ridge_reg, tol=self.solver_tol, max_iters=self.solver_max_iters
        )


@dataclass
class MetricsReport:
    accuracies: np.ndarray
    mean_acc: float
    ci95: float | None
    ce_loss: float
    var_loss: float
    curves: list = field(default_factory=list)
    wall_clock: float = 0.0
    optimizer_state: OptimizerState | None = None


def ci95_halfwidth(values):
    """1.96 * sample stdev / sqrt(n); None when n < 2 (stdev undefined)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to summarize")
    if v.size == 1:
        return None
    return float(1.96 * v.std(ddof=1) / np.sqrt(v.size))


def lr_schedule(epoch, anchors=None):
    """Piecewise-constant outer learning rate from (epoch, lr) anchors."""
    if epoch < 1:
        raise ValueError(f"epoch is 1-based, got {epoch}")
    anchors = tuple(anchors) if anchors is not None else DEFAULT_LR_ANCHORS
    lr = anchors[0][1]
    for e, value in anchors:
        if epoch >= e:
            lr = value
    return lr


def inner_adapt(support_features, support_labels, mp, cfg, steps=None):
    """Convex solve on the support set, then `steps` unrolled gradient
    refinements of the weights at the learned inner step size."""
    steps = cfg.inner_steps if steps is None else steps
    if steps < 0:
        raise ValueError(f"refinement steps must be >= 0, got {steps}")
    y = np.asarray(support_labels)
    if cfg.base_learner == "svm":
        sol = bl.svm_cs_solve(support_features, y, cfg.solver_config(), n_classes=cfg.way)
    else:
        onehot = np.eye(cfg.way, dtype=np.float64)[y]
        sol = bl.ridge_solve(support_features, onehot, cfg.ridge_reg)
    if steps > 0:
        sol = bl.refine_weights(
            sol, support_features, y, scale=mp.logit_scale(), step_size=mp.inner_lr(), steps=steps
        )
    return sol


def _slice_code(code, enc_features, start, stop):
    sliced = latent.LatentCode(
        mu=ad.rows(code.mu, start, stop),
        log_var=ad.rows(code.log_var, start, stop),
        samples=[ad.rows(z, start, stop) for z in code.samples],
        epsilons=[e[start:stop] for e in code.epsilons],
    )
    return sliced, ad.rows(enc_features, start, stop)


def meta_loss(episode, solution, embedded, mp, cfg):
    """Query-set cross-entropy plus the weighted variational loss.

    `embedded` holds features and latent codes for the episode batch laid out
    support-first. The variational term covers support, query, or both sets
    (cfg.var_loss_on) and is mean-reduced over examples either way.
    """
    n_support = episode.support_y.shape[0]
    n_total = n_support + episode.query_y.shape[0]
    query_feats = ad.rows(embedded.features, n_support, n_total)
    logits = bl.scaled_logits(solution, query_feats, mp.logit_scale())
    ce = bl.episode_ce_loss(logits, episode.query_y)

    if cfg.var_loss_on == "both":
        code, target = embedded.code, embedded.enc_features
    elif cfg.var_loss_on == "support":
        code, target = _slice_code(embedded.code, embedded.enc_features, 0, n_support)
    else:
        code, target = _slice_code(embedded.code, embedded.enc_features, n_support, n_total)
    var = latent.variational_loss(code, target, mp.recon_head)
    return ce + mp.var_weight() * var, ce, var, logits


def _episode_forward(episode, mp, cfg, noise):
    x_all = np.concatenate([episode.support_x, episode.query_x], axis=0)
    embedded = model_mod.embed(x_all, mp, noise=noise, n_samples=cfg.mc_samples)
    n_support = episode.support_y.shape[0]
    support_feats = ad.rows(embedded.features, 0, n_support)
    solution = inner_adapt(support_feats, episode.support_y, mp, cfg)
    loss, ce, var, logits = meta_loss(episode, solution, embedded, mp, cfg)
    acc = float(np.mean(bl.predictions(logits) == episode.query_y))
    stats = {"acc": acc, "ce": float(ce.data), "var": float(var.data), "loss": float(loss.data)}
    return loss, stats


def episode_meta_loss(episode, mp, cfg, noise):
    """Full differentiable pipeline for one episode; returns the scalar loss."""
    return _episode_forward(episode, mp, cfg, noise)[0]


def _train_episode_job(episode, mp, cfg, noise, params):
    loss, stats = _episode_forward(episode, mp, cfg, noise)
    grads = ad.grad(loss, params)
    return grads, stats


def meta_train(train_split, val_split, cfg):
    """Run the two-loop procedure; returns best-on-validation parameters and
    the per-epoch metrics report."""
    _check_disjoint(train_split, val_split)
    t0 = time.perf_counter()
    rng_init = eps_mod.seed_stream(cfg.master_seed, "init")
    mp = model_mod.MetaParams.create(
        cfg.model, rng_init,
        lambda_init=cfg.lambda_init, varphi_init=cfg.varphi_init, beta_init=cfg.beta_init,
    )
    params = mp.params()
    opt = OptimizerState.for_params(params, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    curves = []
    best_val = -np.inf
    best_arrays = None
    last_val_accs = np.zeros(0)
    has_val = val_split is not None and val_split.n_classes() >= cfg.way

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_schedule(epoch, cfg.lr_anchors)
        ep_accs, ep_ce, ep_var = [], [], []
        index = (epoch - 1) * cfg.episodes_per_epoch
        remaining = cfg.episodes_per_epoch
        while remaining > 0:
            batch = min(cfg.meta_batch_size, remaining)
            jobs = []
            for j in range(batch):
                i = index + j
                episode = eps_mod.sample_episode(
                    train_split, cfg.episode_spec, eps_mod.seed_stream(cfg.master_seed, "train-episode", i)
                )
                noise = eps_mod.seed_stream(cfg.master_seed, "train-noise", i)
                jobs.append((episode, noise))
            try:
                if cfg.threads > 1:
                    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                        results = list(
                            pool.map(lambda job: _train_episode_job(job[0], mp, cfg, job[1], params), jobs)
                        )
                else:
                    results = [_train_episode_job(ep, mp, cfg, nz, params) for ep, nz in jobs]
            except ad.NonFiniteError as err:
                raise RuntimeError(
                    f"non-finite meta loss at epoch {epoch}, episode {index}: {err}"
                ) from err
            total = {name: None for name in params}
            for grads, stats in results:  # fixed episode order: deterministic reduction
                for name, g in grads.items():
                    total[name] = g if total[name] is None else total[name] + g
                ep_accs.append(stats["acc"])
                ep_ce.append(stats["ce"])
                ep_var.append(stats["var"])
            sgd_nesterov_step(params, total, lr, opt)
            index += batch
            remaining -= batch

        scalars = _scalar_values(mp)
        curves.append(
            {
                "epoch": epoch,
                "split": "train",
                "mean_acc": float(np.mean(ep_accs)),
                "ci95": ci95_halfwidth(ep_accs),
                "ce_loss": float(np.mean(ep_ce)),
                "var_loss": float(np.mean(ep_var)),
                **scalars,
            }
        )
        if has_val and cfg.val_episodes > 0:
            vrep = meta_evaluate(val_split, mp, episodes=cfg.val_episodes, seed=cfg.master_seed, cfg=cfg, tag="val")
            curves.append(
                {
                    "epoch": epoch,
                    "split": "val",
                    "mean_acc": vrep.mean_acc,
                    "ci95": vrep.ci95,
                    "ce_loss": vrep.ce_loss,
                    "var_loss": vrep.var_loss,
                    **scalars,
                }
            )
            last_val_accs = vrep.accuracies
            if vrep.mean_acc > best_val:
                best_val = vrep.mean_acc
                best_arrays = {k: v.data.copy() for k, v in params.items()}

    if best_arrays is not None:
        for name, p in params.items():
            p.data = best_arrays[name]

    mean_acc = best_val if best_arrays is not None else (curves[-1]["mean_acc"] if curves else 0.0)
    report = MetricsReport(
        accuracies=np.asarray(last_val_accs),
        mean_acc=float(mean_acc),
        ci95=ci95_halfwidth(last_val_accs) if last_val_accs.size else None,
        ce_loss=curves[-1]["ce_loss"] if curves else 0.0,
        var_loss=curves[-1]["var_loss"] if curves else 0.0,
        curves=curves,
        wall_clock=time.perf_counter() - t0,
        optimizer_state=opt,
    )
    return mp, report


def meta_evaluate(split, mp, episodes=1000, seed=0, cfg=None, tag="eval", stochastic=False):
    """Evaluation protocol: deterministic embedding (epsilon = 0 unless
    `stochastic`), no parameter updates, mean accuracy with its 95% interval."""
    if cfg is None:
        cfg = TrainConfig()
    if split is None or split.n_classes() == 0:
        raise ValueError("cannot evaluate on an empty split")
    if episodes < 1:
        raise ValueError(f"episode count must be >= 1, got {episodes}")
    t0 = time.perf_counter()
    accs, ces, vars_ = [], [], []
    with ad.no_grad():
        for i in range(episodes):
            episode = eps_mod.sample_episode(
                split, cfg.episode_spec, eps_mod.seed_stream(seed, f"{tag}-episode", i)
            )
            noise = eps_mod.seed_stream(seed, f"{tag}-noise", i) if stochastic else None
            _, stats = _episode_forward(episode, mp, cfg, noise)
            accs.append(stats["acc"])
            ces.append(stats["ce"])
            vars_.append(stats["var"])
    accs = np.asarray(accs)
    return MetricsReport(
        accuracies=accs,
        mean_acc=float(accs.mean()),
        ci95=ci95_halfwidth(accs),
        ce_loss=float(np.mean(ces)),
        var_loss=float(np.mean(vars_)),
        curves=[],
        wall_clock=time.perf_counter() - t0,
    )


def _scalar_values(mp):
    return {
        "beta": float(mp.var_weight().data),
        "varphi": float(mp.logit_scale().data),
        "lambda": float(mp.inner_lr().data),
    }


def _check_disjoint(*splits):
    seen = {}
    for split in splits:
        if split is None:
            continue
        for c in split.class_ids:
            if c in seen:
                raise ValueError(f"class {c!r} appears in more than one split")
            seen[c] = True


# ---------------------------------------------------------------------------
# metrics serialization (fixed-format CSV plus a JSON summary)
# ---------------------------------------------------------------------------


def _fmt(value):
    if value is None:
        return "na"
    return f"{value:.6f}"


def metrics_csv(curves):
    """Render per-epoch rows with the fixed column set, newline-terminated."""
    lines = [CSV_COLUMNS]
    for row in curves:
        lines.append(
            ",".join(
                [
                    str(row["epoch"]),
                    row["split"],
                    _fmt(row["mean_acc"]),
                    _fmt(row["ci95"]),
                    _fmt(row["ce_loss"]),
                    _fmt(row["var_loss"]),
                    _fmt(row["beta"]),
                    _fmt(row["varphi"]),
                    _fmt(row["lambda"]),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def summary_json(cfg, report, extra=None):
    payload = {
        "config": _config_dict(cfg),
        "mean_acc": report.mean_acc,
        "ci95": report.ci95,
        "ce_loss": report.ce_loss,
        "var_loss": report.var_loss,
        "episodes": int(report.accuracies.size),
        "wall_clock_sec": round(report.wall_clock, 3),
    }
    if extra:
        payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _config_dict(cfg):
    d = asdict(cfg)
    d.pop("episode_spec", None)
    d["lr_anchors"] = [list(a) for a in cfg.lr_anchors]
    d["model"] = asdict(cfg.model)
    return d
