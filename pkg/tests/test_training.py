"""Two-loop training machinery: schedules, adaptation, the meta loss, the
evaluation protocol, and end-to-end determinism on tiny configurations."""

import numpy as np
import pytest

from metalatent import autodiff as ad
from metalatent import baselearners as bl
from metalatent import episodes as E
from metalatent import model as M
from metalatent import training as T


def tiny_model_config(latent_dim=4):
    return M.ModelConfig(
        in_channels=1,
        image_side=8,
        conv_channels=(4, 8),
        latent_dim=latent_dim,
        decoder_channels=(4, 6),
        decoder_spatial=2,
        recon_hidden=4,
    )


def tiny_train_config(**overrides):
    defaults = dict(
        epochs=1,
        episodes_per_epoch=4,
        meta_batch_size=2,
        way=2,
        shot=1,
        query_per_class=2,
        lr_anchors=((1, 0.01),),
        inner_steps=1,
        base_learner="svm",
        latent_dim=4,
        master_seed=5,
        val_episodes=2,
        model=tiny_model_config(),
    )
    defaults.update(overrides)
    return T.TrainConfig(**defaults)


def tiny_splits(seed=11, n_classes=8):
    data = E.synth_generate("gaussian_blobs", n_classes, 8, 8, seed=seed, difficulty=0.4)
    ids = list(data.class_ids)
    third = n_classes // 3 if n_classes >= 6 else 2
    return E.make_splits(data, ids[: n_classes - 2 * third], ids[n_classes - 2 * third : n_classes - third], ids[n_classes - third :])


# -- learning-rate schedule ---------------------------------------------------


@pytest.mark.parametrize(
    "epoch,lr",
    [(1, 0.1), (5, 0.1), (19, 0.1), (20, 0.006), (39, 0.006), (40, 0.0012), (49, 0.0012), (50, 0.00024), (59, 0.00024), (200, 0.00024)],
)
def test_lr_schedule_published_anchors(epoch, lr):
    assert T.lr_schedule(epoch) == lr


def test_lr_schedule_rejects_epoch_below_one():
    with pytest.raises(ValueError):
        T.lr_schedule(0)


def test_lr_schedule_monotone_nonincreasing():
    values = [T.lr_schedule(e) for e in range(1, 80)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_lr_schedule_custom_anchors():
    anchors = ((1, 0.5), (3, 0.25))
    assert T.lr_schedule(2, anchors) == 0.5
    assert T.lr_schedule(3, anchors) == 0.25


# -- inner adaptation ---------------------------------------------------------


def _episode_and_embed(cfg, seed=0):
    train, _, _ = tiny_splits()
    rng = np.random.default_rng(seed)
    ep = E.sample_episode(train, cfg.episode_spec, rng)
    mp = M.MetaParams.create(
        cfg.model, np.random.default_rng(seed + 1),
        lambda_init=cfg.lambda_init, varphi_init=cfg.varphi_init, beta_init=cfg.beta_init,
    )
    x_all = np.concatenate([ep.support_x, ep.query_x], axis=0)
    emb = M.embed(x_all, mp, noise=None)
    return ep, mp, emb


def test_inner_adapt_zero_steps_returns_convex_solution():
    cfg = tiny_train_config(inner_steps=0)
    ep, mp, emb = _episode_and_embed(cfg)
    feats = ad.rows(emb.features, 0, 2)
    sol = T.inner_adapt(feats, ep.support_y, mp, cfg)
    direct = bl.svm_cs_solve(feats, ep.support_y, cfg.solver_config(), n_classes=2)
    assert np.array_equal(sol.weights.data, direct.weights.data)


def test_inner_adapt_vanishing_step_size_keeps_solution():
    cfg = tiny_train_config(inner_steps=3, lambda_init=1e-12)
    ep, mp, emb = _episode_and_embed(cfg)
    feats = ad.rows(emb.features, 0, 2)
    refined = T.inner_adapt(feats, ep.support_y, mp, cfg)
    base = bl.svm_cs_solve(feats, ep.support_y, cfg.solver_config(), n_classes=2)
    assert np.abs(refined.weights.data - base.weights.data).max() < 1e-8


def test_inner_adapt_refinement_does_not_increase_support_loss():
    """On separable blobs, one refinement step keeps support accuracy at 1 and
    does not increase the support cross-entropy."""
    data = E.synth_generate("gaussian_blobs", 6, 10, 8, seed=2, difficulty=0.1)
    # large C so the convex solve fits the five distinct support points exactly
    cfg = tiny_train_config(way=5, query_per_class=1, inner_steps=1, lambda_init=0.01, epochs=1, svm_c=50.0)
    mp = M.MetaParams.create(cfg.model, np.random.default_rng(0))
    ep = E.sample_episode(data, cfg.episode_spec, np.random.default_rng(4))
    emb = M.embed(np.concatenate([ep.support_x, ep.query_x]), mp, noise=None)
    feats = ad.rows(emb.features, 0, 5)
    scale = mp.logit_scale()

    base = T.inner_adapt(feats, ep.support_y, mp, cfg, steps=0)
    refined = T.inner_adapt(feats, ep.support_y, mp, cfg, steps=1)

    def support_ce(sol):
        return float(bl.episode_ce_loss(bl.scaled_logits(sol, feats, scale), ep.support_y).data)

    pred = bl.predictions(bl.scaled_logits(refined, feats, scale))
    assert np.array_equal(pred, ep.support_y)
    assert support_ce(refined) <= support_ce(base) + 1e-9


def test_inner_adapt_ridge_branch():
    cfg = tiny_train_config(base_learner="rr", inner_steps=0)
    ep, mp, emb = _episode_and_embed(cfg)
    feats = ad.rows(emb.features, 0, 2)
    sol = T.inner_adapt(feats, ep.support_y, mp, cfg)
    assert sol.kind == "ridge"
    assert sol.weights.shape == (2, cfg.model.feature_dim)


# -- meta loss ----------------------------------------------------------------


def test_meta_loss_beta_zero_is_query_ce():
    cfg = tiny_train_config()
    ep, mp, emb = _episode_and_embed(cfg)
    mp.beta_raw.data = np.asarray(-60.0, dtype=mp.beta_raw.dtype)  # softplus -> ~0
    feats = ad.rows(emb.features, 0, 2)
    sol = T.inner_adapt(feats, ep.support_y, mp, cfg)
    loss, ce, _, _ = T.meta_loss(ep, sol, emb, mp, cfg)
    assert float(loss.data) == pytest.approx(float(ce.data), rel=1e-6)


def test_meta_loss_recomposes_from_parts():
    cfg = tiny_train_config()
    ep, mp, emb = _episode_and_embed(cfg, seed=3)
    feats = ad.rows(emb.features, 0, 2)
    sol = T.inner_adapt(feats, ep.support_y, mp, cfg)
    loss, ce, var, _ = T.meta_loss(ep, sol, emb, mp, cfg)
    beta = float(mp.var_weight().data)
    assert float(loss.data) == pytest.approx(float(ce.data) + beta * float(var.data), rel=1e-5)


@pytest.mark.parametrize("where", ["support", "query", "both"])
def test_meta_loss_var_scope_options(where):
    cfg = tiny_train_config(var_loss_on=where)
    ep, mp, emb = _episode_and_embed(cfg, seed=4)
    feats = ad.rows(emb.features, 0, 2)
    sol = T.inner_adapt(feats, ep.support_y, mp, cfg)
    loss, _, var, _ = T.meta_loss(ep, sol, emb, mp, cfg)
    assert np.isfinite(float(loss.data))
    assert np.isfinite(float(var.data))


def test_outer_gradient_flows_through_variational_path():
    """The encoder gradient changes when beta is zeroed: both terms of the
    meta objective reach the shared encoder."""
    cfg = tiny_train_config()
    train, _, _ = tiny_splits()
    ep = E.sample_episode(train, cfg.episode_spec, np.random.default_rng(0))
    n_examples = ep.support_y.size + ep.query_y.size
    noise = [np.random.default_rng(1).standard_normal((n_examples, cfg.latent_dim)).astype(np.float32)]

    def encoder_grad(beta_raw_value):
        mp = M.MetaParams.create(cfg.model, np.random.default_rng(2))
        mp.beta_raw.data = np.asarray(beta_raw_value, dtype=mp.beta_raw.dtype)
        params = mp.params()
        loss = T.episode_meta_loss(ep, mp, cfg, noise)
        return ad.grad(loss, params)["enc.conv0.w"]

    with_var = encoder_grad(0.0)  # softplus(0) ~ 0.69
    without = encoder_grad(-60.0)
    assert np.abs(with_var - without).max() > 1e-8


# -- embed ---------------------------------------------------------------


def test_embed_deterministic_with_zero_noise():
    cfg = tiny_model_config()
    mp = M.MetaParams.create(cfg, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((3, 1, 8, 8)).astype(np.float32)
    a = M.embed(x, mp, noise=None)
    b = M.embed(x, mp, noise=None)
    assert np.array_equal(a.features.data, b.features.data)
    assert all(np.array_equal(z.data, a.code.mu.data) for z in a.code.samples)


def test_embed_same_seed_bit_identical():
    cfg = tiny_model_config()
    mp = M.MetaParams.create(cfg, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((3, 1, 8, 8)).astype(np.float32)
    a = M.embed(x, mp, noise=np.random.default_rng(7))
    b = M.embed(x, mp, noise=np.random.default_rng(7))
    assert a.features.data.tobytes() == b.features.data.tobytes()


def test_embed_latent_dim_64_gives_64_entry_mu():
    cfg = M.ModelConfig(in_channels=1, image_side=8, conv_channels=(4, 8), latent_dim=64,
                        decoder_channels=(4,), decoder_spatial=2, recon_hidden=4)
    mp = M.MetaParams.create(cfg, np.random.default_rng(0))
    x = np.zeros((2, 1, 8, 8), dtype=np.float32)
    out = M.embed(x, mp, noise=None)
    assert out.code.mu.shape == (2, 64)


def test_embed_input_shape_validation():
    cfg = tiny_model_config()
    mp = M.MetaParams.create(cfg, np.random.default_rng(0))
    with pytest.raises(ValueError, match="expected input"):
        M.embed(np.zeros((2, 1, 9, 9), dtype=np.float32), mp)


def test_embed_multi_sample():
    cfg = tiny_model_config()
    mp = M.MetaParams.create(cfg, np.random.default_rng(0))
    x = np.zeros((2, 1, 8, 8), dtype=np.float32)
    out = M.embed(x, mp, noise=np.random.default_rng(3), n_samples=3)
    assert len(out.code.samples) == 3
    assert len(out.code.epsilons) == 3


# -- meta_train ---------------------------------------------------------------


def test_meta_train_fixed_seed_bit_identical_checkpoints():
    train, val, _ = tiny_splits()
    cfg = tiny_train_config()
    mp1, rep1 = T.meta_train(train, val, cfg)
    mp2, rep2 = T.meta_train(train, val, cfg)
    a1 = mp1.checkpoint_arrays()
    a2 = mp2.checkpoint_arrays()
    assert set(a1) == set(a2)
    for name in a1:
        assert a1[name].tobytes() == a2[name].tobytes(), name
    assert T.metrics_csv(rep1.curves) == T.metrics_csv(rep2.curves)


def test_meta_train_zero_epochs_returns_initial_params():
    train, val, _ = tiny_splits()
    cfg = tiny_train_config(epochs=0)
    mp, report = T.meta_train(train, val, cfg)
    assert report.curves == []
    reference = M.MetaParams.create(
        cfg.model, E.seed_stream(cfg.master_seed, "init"),
        lambda_init=cfg.lambda_init, varphi_init=cfg.varphi_init, beta_init=cfg.beta_init,
    )
    for name, p in mp.params().items():
        assert np.array_equal(p.data, reference.params()[name].data)


def test_meta_train_threads_match_sequential():
    train, val, _ = tiny_splits()
    seq = T.meta_train(train, val, tiny_train_config(threads=1))
    par = T.meta_train(train, val, tiny_train_config(threads=4))
    a1, a2 = seq[0].checkpoint_arrays(), par[0].checkpoint_arrays()
    for name in a1:
        assert a1[name].tobytes() == a2[name].tobytes(), name
    assert T.metrics_csv(seq[1].curves) == T.metrics_csv(par[1].curves)


def test_meta_train_overlapping_splits_rejected():
    train, val, _ = tiny_splits()
    with pytest.raises(ValueError, match="more than one split"):
        T.meta_train(train, train, tiny_train_config())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_meta_train_aborts_on_nonfinite_loss():
    train, val, _ = tiny_splits()
    cfg = tiny_train_config()
    real_create = M.MetaParams.create.__func__

    def broken(cls, config, rng, **kw):
        mp = real_create(cls, config, rng, **kw)
        mp.enc_convs[0][0].data[:] = 1e30  # forces float32 overflow in conv
        return mp

    M.MetaParams.create = classmethod(broken)
    try:
        with pytest.raises(RuntimeError, match="non-finite meta loss at epoch 1"):
            T.meta_train(train, val, cfg)
    finally:
        M.MetaParams.create = classmethod(real_create)


def test_meta_train_without_validation_split():
    train, _, _ = tiny_splits()
    mp, report = T.meta_train(train, None, tiny_train_config())
    assert all(r["split"] == "train" for r in report.curves)


# -- meta_evaluate ------------------------------------------------------------


def test_meta_evaluate_difficulty_zero_reports_perfect_constant():
    """All-identical class examples: every episode scores 1.0, ci95 = 0."""
    data = E.synth_generate("gaussian_blobs", 4, 6, 8, seed=1, difficulty=0.0)
    cfg = tiny_train_config()
    mp = M.MetaParams.create(cfg.model, np.random.default_rng(0))
    rep = T.meta_evaluate(data, mp, episodes=5, seed=3, cfg=cfg)
    assert rep.mean_acc == 1.0
    assert rep.ci95 == 0.0


def test_meta_evaluate_same_seed_identical_reports():
    _, _, test = tiny_splits()
    cfg = tiny_train_config()
    mp = M.MetaParams.create(cfg.model, np.random.default_rng(0))
    r1 = T.meta_evaluate(test, mp, episodes=4, seed=9, cfg=cfg)
    r2 = T.meta_evaluate(test, mp, episodes=4, seed=9, cfg=cfg)
    assert np.array_equal(r1.accuracies, r2.accuracies)
    assert r1.mean_acc == r2.mean_acc


def test_meta_evaluate_never_mutates_params():
    _, _, test = tiny_splits()
    cfg = tiny_train_config()
    mp = M.MetaParams.create(cfg.model, np.random.default_rng(0))
    before = M.checksum_params(mp)
    T.meta_evaluate(test, mp, episodes=3, seed=0, cfg=cfg)
    assert M.checksum_params(mp) == before


def test_meta_evaluate_empty_split_rejected():
    cfg = tiny_train_config()
    mp = M.MetaParams.create(cfg.model, np.random.default_rng(0))
    empty = E.Dataset((), {}, {}, "empty")
    with pytest.raises(ValueError, match="empty"):
        T.meta_evaluate(empty, mp, episodes=2, seed=0, cfg=cfg)
    _, _, test = tiny_splits()
    with pytest.raises(ValueError, match="episode count"):
        T.meta_evaluate(test, mp, episodes=0, seed=0, cfg=cfg)


def test_meta_evaluate_stochastic_flag_changes_outcome():
    _, _, test = tiny_splits()
    cfg = tiny_train_config()
    mp = M.MetaParams.create(cfg.model, np.random.default_rng(0))
    det = T.meta_evaluate(test, mp, episodes=3, seed=2, cfg=cfg)
    sto = T.meta_evaluate(test, mp, episodes=3, seed=2, cfg=cfg, stochastic=True)
    assert det.ce_loss != sto.ce_loss


# -- confidence intervals -------------------------------------------------


def test_ci95_two_episode_fixture():
    """Accuracies {1, 0}: mean 0.5, halfwidth 1.96 * 0.7071 / sqrt(2) = 0.980."""
    assert T.ci95_halfwidth([1.0, 0.0]) == pytest.approx(1.96 * np.std([1.0, 0.0], ddof=1) / np.sqrt(2))
    assert T.ci95_halfwidth([1.0, 0.0]) == pytest.approx(0.9800, abs=1e-4)


def test_ci95_single_value_undefined():
    assert T.ci95_halfwidth([0.8]) is None


def test_ci95_constant_values():
    assert T.ci95_halfwidth([0.8, 0.8, 0.8]) == pytest.approx(0.0, abs=1e-12)


def test_ci95_empty_rejected():
    with pytest.raises(ValueError):
        T.ci95_halfwidth([])


# -- config and metrics -----------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ValueError, match="base_learner"):
        tiny_train_config(base_learner="forest")
    with pytest.raises(ValueError, match="ascending"):
        tiny_train_config(lr_anchors=((1, 0.1), (1, 0.2)))
    with pytest.raises(ValueError, match="var_loss_on"):
        tiny_train_config(var_loss_on="everything")
    with pytest.raises(ValueError, match="inner_steps"):
        tiny_train_config(inner_steps=-1)


def test_train_config_propagates_latent_dim_to_model():
    cfg = tiny_train_config(latent_dim=6)
    assert cfg.model.latent_dim == 6


def test_metrics_csv_format():
    curves = [
        {"epoch": 1, "split": "train", "mean_acc": 0.5, "ci95": 0.01, "ce_loss": 2.0,
         "var_loss": 3.0, "beta": 0.1, "varphi": 1.0, "lambda": 0.01},
        {"epoch": 1, "split": "val", "mean_acc": 0.6, "ci95": None, "ce_loss": 1.0,
         "var_loss": 2.0, "beta": 0.1, "varphi": 1.0, "lambda": 0.01},
    ]
    text = T.metrics_csv(curves)
    lines = text.strip().split("\n")
    assert lines[0] == "epoch,split,mean_acc,ci95,ce_loss,var_loss,beta,varphi,lambda"
    assert lines[1].startswith("1,train,0.500000,0.010000")
    assert ",na," in lines[2]


def test_checkpoint_round_trip_restores_model():
    cfg = tiny_model_config()
    mp = M.MetaParams.create(cfg, np.random.default_rng(4))
    arrays = mp.checkpoint_arrays()
    restored = M.MetaParams.from_checkpoint_arrays(arrays)
    assert restored.config == cfg
    for name, p in mp.params().items():
        assert np.array_equal(p.data, restored.params()[name].data)
    x = np.random.default_rng(5).standard_normal((2, 1, 8, 8)).astype(np.float32)
    a = M.embed(x, mp, noise=None).features.data
    b = M.embed(x, restored, noise=None).features.data
    assert np.array_equal(a, b)
