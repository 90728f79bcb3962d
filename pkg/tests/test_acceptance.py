"""Acceptance suite: one test per acceptance criterion, each printing a
PASS/FAIL line. The heavy desk-scale trainings are shared module fixtures.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
"""

import contextlib
import time
from pathlib import Path

import numpy as np
import pytest

from metalatent import autodiff as ad
from metalatent import baselearners as bl
from metalatent import cli
from metalatent import episodes as E
from metalatent import gradcheck as gc
from metalatent import latent
from metalatent import model as M
from metalatent import training as T
from metalatent.autodiff import Tensor

from test_baselearners import FIXED_INSTANCES, _instance, solve_dual_fista
from test_latent import mc_kl_estimate

REPO_ROOT = Path(__file__).resolve().parent.parent

# desk-scale setup shared by criteria 4b, 5, and 6
SIDE = 16
DATA_SEED = 7
TRAIN_SEED = 7
EVAL_SEED = 99
TEST_EPISODES = 300


@contextlib.contextmanager
def criterion(number, name):
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE {number} ({name}): FAIL")
        raise
    print(f"\nACCEPTANCE {number} ({name}): PASS")


def desk_config(latent_dim):
    mcfg = M.ModelConfig(
        in_channels=1, image_side=SIDE, conv_channels=(16, 32, 64), latent_dim=latent_dim
    )
    return T.TrainConfig(
        epochs=10,
        episodes_per_epoch=200,
        meta_batch_size=4,
        way=5,
        shot=1,
        query_per_class=15,
        inner_steps=1,
        base_learner="svm",
        latent_dim=latent_dim,
        master_seed=TRAIN_SEED,
        val_episodes=40,
        lr_anchors=((1, 0.001), (7, 0.0004)),
        beta_init=0.01,
        varphi_init=1.0,
        svm_c=0.1,
        model=mcfg,
    )


@pytest.fixture(scope="module")
def desk_splits():
    data = E.synth_generate("gaussian_blobs", 30, 40, SIDE, seed=DATA_SEED, difficulty=0.5)
    ids = list(data.class_ids)
    train, val, test = E.make_splits(data, ids[:20], ids[20:25], ids[25:30])
    (train, val, test), _ = E.normalize_by_train(train, val, test)
    return train, val, test


@pytest.fixture(scope="module")
def desk_runs(desk_splits):
    """Criterion-5 training (latent 64) plus the latent-8 twin for criterion 6."""
    train, val, test = desk_splits
    runs = {}
    for dim in (64, 8):
        cfg = desk_config(dim)
        t0 = time.perf_counter()
        mp, report = T.meta_train(train, val, cfg)
        train_time = time.perf_counter() - t0
        rep = T.meta_evaluate(test, mp, episodes=TEST_EPISODES, seed=EVAL_SEED, cfg=cfg)
        runs[dim] = {"mp": mp, "cfg": cfg, "report": report, "test": rep, "train_time": train_time}
    cfg64 = runs[64]["cfg"]
    mp0 = M.MetaParams.create(
        cfg64.model,
        E.seed_stream(cfg64.master_seed, "init"),
        lambda_init=cfg64.lambda_init,
        varphi_init=cfg64.varphi_init,
        beta_init=cfg64.beta_init,
    )
    runs["untrained"] = T.meta_evaluate(test, mp0, episodes=TEST_EPISODES, seed=EVAL_SEED, cfg=cfg64)
    return runs


def test_criterion_1_docs_state_full_scale_caveat():
    """Published full-scale numbers are out of reach here and the README must
    say so, citing the headline value verbatim."""
    with criterion(1, "full-scale caveat in docs"):
        readme = " ".join((REPO_ROOT / "README.md").read_text().split())
        assert "62.53" in readme and "0.64" in readme
        assert "ResNet-12" in readme
        assert "not reproducible at desk scale" in readme
        assert "property suite" in readme.lower()


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_criterion_2_gradient_oracle_suite():
    with criterion(2, "gradient oracles < 1e-3 in < 2 min"):
        t0 = time.perf_counter()
        results = gc.run_gradient_suites(seed=0)
        elapsed = time.perf_counter() - t0
        for name, err, tol, ok in results:
            print(f"  {name:20s} max_rel_err={err:.3e} (tol {tol:.0e})")
            assert ok, f"{name}: {err} >= {tol}"
            assert err < 1e-3
        assert elapsed < 120.0, f"gradient suites took {elapsed:.1f}s"


def test_criterion_3_analytic_vs_monte_carlo_kl():
    with criterion(3, "analytic vs Monte-Carlo KL within 2%"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(31)
        worst = 0.0
        for _ in range(20):
            mu = rng.standard_normal(8)
            log_var = rng.uniform(-1.0, 1.0, 8)
            analytic = float(
                latent.kl_standard_normal(
                    Tensor(mu, dtype=np.float64), Tensor(log_var, dtype=np.float64)
                ).data
            )
            estimate = mc_kl_estimate(mu, log_var, 100_000, rng)
            rel = abs(estimate - analytic) / abs(analytic)
            worst = max(worst, rel)
            assert rel < 0.02, f"MC KL off by {rel:.3%}"
        elapsed = time.perf_counter() - t0
        print(f"  worst relative error {worst:.4%} over 20 draws in {elapsed:.1f}s")
        assert elapsed < 30.0


def test_criterion_4_convex_solver_oracles(desk_splits):
    train, _, test = desk_splits
    with criterion(4, "convex-solver oracles"):
        # 4a: SVM objective vs independent dual ascent on 5 fixed instances
        for seed, m, d, k, c in FIXED_INSTANCES:
            X, y = _instance(seed, m, d, k)
            with ad.precision("float64"):
                sol = bl.svm_cs_solve(Tensor(X), y, bl.SolverConfig(C=c, tol=1e-10, max_iters=100))
            _, dual_value = solve_dual_fista(X, y, c)
            gap = abs(sol.objective - dual_value)
            assert gap < 1e-4, f"instance {seed}: objective gap {gap}"
        print("  5/5 fixed SVM instances within 1e-4 of the dual oracle")

        # 4b: KKT residual <= 1e-8 across a 500-episode run
        cfg = desk_config(64)
        mp = M.MetaParams.create(cfg.model, E.seed_stream(cfg.master_seed, "init"))
        worst = 0.0
        with ad.no_grad():
            for i in range(500):
                ep = E.sample_episode(test, cfg.episode_spec, E.seed_stream(13, "kkt", i))
                emb = M.embed(ep.support_x, mp, noise=None)
                sol = bl.svm_cs_solve(emb.features, ep.support_y, cfg.solver_config(), n_classes=cfg.way)
                worst = max(worst, sol.kkt_residual)
        print(f"  worst KKT residual over 500 episodes: {worst:.2e}")
        assert worst <= 1e-8

        # 4c: ridge against the explicit inverse
        rng = np.random.default_rng(41)
        for _ in range(5):
            X = rng.standard_normal((6, 4))
            Y = np.eye(3)[rng.integers(0, 3, 6)]
            sol = bl.ridge_solve(Tensor(X, dtype=np.float64), Y, ridge_reg=0.1)
            ref = (np.linalg.inv(X.T @ X + 0.1 * np.eye(4)) @ X.T @ Y).T
            assert np.abs(sol.weights.data - ref).max() < 1e-10
        print("  ridge matches direct inverse to 1e-10")


def test_criterion_5_desk_scale_learning(desk_runs):
    with criterion(5, "desk-scale 5-way 1-shot learning"):
        run = desk_runs[64]
        trained = run["test"].mean_acc
        untrained = desk_runs["untrained"].mean_acc
        print(
            f"  trained {trained:.4f} vs untrained {untrained:.4f} over {TEST_EPISODES} episodes"
            f" (training took {run['train_time']:.0f}s)"
        )
        assert trained >= 0.90, f"meta-test accuracy {trained:.4f} < 0.90"
        assert trained > untrained + 0.25, f"gain {trained - untrained:.4f} < 0.25"
        assert run["train_time"] < 15 * 60, f"training took {run['train_time']:.0f}s"


def test_criterion_6_latent_dimension_trend(desk_runs):
    with criterion(6, "latent dim 64 >= dim 8 at desk scale"):
        acc64 = desk_runs[64]["test"].mean_acc
        acc8 = desk_runs[8]["test"].mean_acc
        print(f"  dim 64: {acc64:.4f}, dim 8: {acc8:.4f} (shared seeds)")
        assert acc64 >= acc8


TINY_ARGS = [
    "--synthetic", "gaussian_blobs", "--n-classes", "8", "--per-class", "8",
    "--image-side", "8", "--train-classes", "4", "--val-classes", "2",
    "--test-classes", "2", "--way", "2", "--shot", "1", "--query", "2",
    "--latent-dim", "4", "--conv-channels", "4,8", "--epochs", "2",
    "--episodes-per-epoch", "6", "--meta-batch", "2", "--val-episodes", "3",
    "--lr-anchors", "1:0.01", "--seed", "17",
]


def test_criterion_7_determinism(tmp_path, capsys):
    with criterion(7, "bit-deterministic training"):
        def run(tag, threads):
            ckpt = tmp_path / f"{tag}.mlat"
            csv = tmp_path / f"{tag}.csv"
            code = cli.main(
                ["train", *TINY_ARGS, "--threads", str(threads),
                 "--checkpoint-out", str(ckpt), "--metrics-out", str(csv),
                 "--summary-out", str(tmp_path / f"{tag}.json")]
            )
            assert code == 0
            return ckpt.read_bytes(), csv.read_bytes()

        ck1, csv1 = run("a", 1)
        ck2, csv2 = run("b", 1)
        ck4, csv4 = run("c", 4)
        capsys.readouterr()
        assert ck1 == ck2, "repeat run changed the checkpoint bytes"
        assert csv1 == csv2, "repeat run changed the metrics CSV"
        assert csv1 == csv4, "thread count changed the metrics CSV"
        assert ck1 == ck4, "thread count changed the checkpoint bytes"


def test_criterion_8_evaluation_protocol(desk_splits):
    with criterion(8, "evaluation protocol"):
        # hand-computed CI fixture: accuracies {1, 0}
        hw = T.ci95_halfwidth([1.0, 0.0])
        assert hw == pytest.approx(0.980, abs=5e-4)
        assert T.ci95_halfwidth([0.8]) is None

        # full reports use 1.96 s / sqrt(n), and evaluation never mutates params
        _, _, test = desk_splits
        cfg = desk_config(8)
        mp = M.MetaParams.create(cfg.model, np.random.default_rng(0))
        before = M.checksum_params(mp)
        rep = T.meta_evaluate(test, mp, episodes=25, seed=5, cfg=cfg)
        assert M.checksum_params(mp) == before, "evaluation mutated parameters"
        expected = 1.96 * rep.accuracies.std(ddof=1) / np.sqrt(rep.accuracies.size)
        assert rep.ci95 == pytest.approx(expected, rel=1e-9)
        assert rep.mean_acc == pytest.approx(rep.accuracies.mean(), rel=1e-12)
        print(f"  CI fixture 0.5 ± {hw:.3f}; checksum stable over 25 episodes")


def test_criterion_9_schedule_fidelity():
    with criterion(9, "published schedule and optimizer constants"):
        assert T.lr_schedule(1) == 0.1
        assert T.lr_schedule(19) == 0.1
        assert T.lr_schedule(20) == 0.006
        assert T.lr_schedule(39) == 0.006
        assert T.lr_schedule(40) == 0.0012
        assert T.lr_schedule(49) == 0.0012
        assert T.lr_schedule(50) == 0.00024
        assert T.lr_schedule(60) == 0.00024
        from metalatent.optim import OptimizerState

        state = OptimizerState.for_params({})
        assert state.momentum == 0.9
        assert state.weight_decay == 0.0005
        print("  anchors 0.1/0.006/0.0012/0.00024 at epochs 1/20/40/50; momentum 0.9, decay 5e-4")
