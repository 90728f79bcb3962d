"""Interior-point QP solver against hand-solved KKT systems."""

import numpy as np
import pytest

from metalatent import qp


def test_unconstrained_stationarity():
    prob = qp.QProblem(Q=np.array([[1.0]]), p=np.array([-1.0]))
    sol = qp.qp_solve(prob)
    assert sol.x[0] == pytest.approx(1.0, abs=1e-10)


def test_upper_bound_active_with_multiplier():
    """min x^2/2 - x s.t. x <= 0.5: solution 0.5, multiplier 0.5."""
    prob = qp.QProblem(Q=np.array([[1.0]]), p=np.array([-1.0]), upper=np.array([0.5]))
    sol = qp.qp_solve(prob, tol=1e-9)
    assert sol.x[0] == pytest.approx(0.5, abs=1e-8)
    assert sol.ineq_duals[0] == pytest.approx(0.5, abs=1e-7)
    assert sol.residual <= 1e-9


def test_random_psd_with_equality_matches_kkt_solve():
    rng = np.random.default_rng(3)
    B = rng.standard_normal((8, 8))
    Q = B @ B.T + 0.5 * np.eye(8)
    p = rng.standard_normal(8)
    A = rng.standard_normal((1, 8))
    b = rng.standard_normal(1)
    sol = qp.qp_solve(qp.QProblem(Q=Q, p=p, A=A, b=b))
    kkt = np.block([[Q, A.T], [A, np.zeros((1, 1))]])
    ref = np.linalg.solve(kkt, np.concatenate([-p, b]))
    assert np.abs(sol.x - ref[:8]).max() < 1e-8


def test_box_constrained_random_psd():
    """Clipped coordinates satisfy KKT; verified against scipy-free projection logic."""
    rng = np.random.default_rng(9)
    Q = np.eye(4)
    p = -np.array([2.0, -3.0, 0.25, 0.0])
    lo = -np.ones(4)
    hi = np.ones(4)
    sol = qp.qp_solve(qp.QProblem(Q=Q, p=p, lower=lo, upper=hi), tol=1e-9)
    # separable: solution is clip(-p, lo, hi)
    assert np.allclose(sol.x, np.clip(-p, lo, hi), atol=1e-8)
    assert sol.residual <= 1e-9


def test_crossed_bounds_rejected():
    with pytest.raises(qp.InfeasibleProblemError):
        qp.QProblem(Q=np.eye(2), p=np.zeros(2), lower=np.array([1.0, 0.0]), upper=np.array([0.0, 1.0]))


def test_asymmetric_q_rejected():
    with pytest.raises(ValueError, match="symmetric"):
        qp.QProblem(Q=np.array([[1.0, 2.0], [0.0, 1.0]]), p=np.zeros(2))


def test_nonconvergence_carries_residual():
    rng = np.random.default_rng(1)
    B = rng.standard_normal((6, 6))
    prob = qp.QProblem(
        Q=B @ B.T + 0.1 * np.eye(6),
        p=rng.standard_normal(6),
        lower=-np.ones(6),
        upper=np.ones(6),
    )
    with pytest.raises(qp.QPNonConvergenceError) as err:
        qp.qp_solve(prob, tol=1e-30, max_iters=1)  # below float64 resolution
    assert err.value.residual > 0
    assert err.value.iters == 1


def test_solver_hits_tight_tolerance_with_polish():
    rng = np.random.default_rng(12)
    for trial in range(10):
        B = rng.standard_normal((10, 10))
        prob = qp.QProblem(
            Q=B @ B.T,
            p=rng.standard_normal(10),
            A=np.ones((1, 10)),
            b=np.zeros(1),
            upper=rng.uniform(0.1, 1.0, 10),
        )
        sol = qp.qp_solve(prob, tol=1e-10, max_iters=60)
        assert sol.residual <= 1e-10


def test_equality_only_infeasible_detected():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    b = np.array([1.0, 2.0])  # inconsistent rows
    with pytest.raises(qp.InfeasibleProblemError):
        qp.qp_solve(qp.QProblem(Q=np.eye(2), p=np.zeros(2), A=A, b=b))
