"""Per-episode convex classifiers: ridge regression and the Crammer-Singer
multiclass SVM, both differentiable with respect to the input features.

The SVM is solved through its dual

    min_L  1/2 L' kron(XX', I_K) L - sum_n L[n, y_n]
    s.t.   sum_k L[n, k] = 0            for every n
           L[n, k] <= C * [k == y_n]    for every n, k

whose stationarity recovers the primal weights w_k = sum_n L[n, k] x_n.
Backward passes differentiate the KKT system at the solution with the active
set held fixed, so outer-loop gradients flow through the argmin itself.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import qp
from .autodiff import Tensor

__all__ = [
    "SolverConfig",
    "BaseLearnerSolution",
    "DegenerateSolutionError",
    "DegenerateSolutionWarning",
    "ridge_solve",
    "svm_cs_solve",
    "solve_backward",
    "scaled_logits",
    "episode_ce_loss",
    "predictions",
]

# membership is ambiguous when multiplier and constraint gap are both this close to zero
_DEGENERATE_EPS = 1e-6


class DegenerateSolutionError(RuntimeError):
    """The reduced KKT system at the solution is (near-)singular."""


class DegenerateSolutionWarning(UserWarning):
    """A constraint is weakly active: multiplier and gap both near zero."""


@dataclass
class SolverConfig:
    C: float = 0.1
    ridge_reg: float = 1.0
    tol: float = 1e-8
    max_iters: int = 50

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError(f"C must be positive, got {self.C}")
        if self.ridge_reg <= 0:
            raise ValueError(f"ridge_reg must be positive, got {self.ridge_reg}")
        if self.tol <= 0:
            raise ValueError(f"tol must be positive, got {self.tol}")


@dataclass
class BaseLearnerSolution:
    """Adapted classifier weights plus solver diagnostics.

    `weights` is a [K, feature_dim] tensor wired into the surrounding graph;
    its backward rule is implicit differentiation (see `solve_backward`).
    """

    weights: Tensor
    duals: np.ndarray | None
    slacks: np.ndarray | None
    solver_iters: int
    kkt_residual: float
    objective: float
    kind: str
    _ctx: dict = field(default_factory=dict, repr=False)


def _ridge_backward(ctx, upstream):
    """Closed-form gradient of W = (X'X + r I)^(-1) X'Y w.r.t. X."""
    X, Y, A, W_cols = ctx["X"], ctx["Y"], ctx["A"], ctx["W_cols"]
    G = np.asarray(upstream, dtype=np.float64).T  # [D, K]
    S = np.linalg.solve(A, G)
    return Y @ S.T - X @ (W_cols @ S.T + S @ W_cols.T)


def _svm_backward(ctx, upstream):
    """Implicit-function-theorem gradient of the SVM weights w.r.t. features.

    Solves the (symmetric) reduced KKT system at the fixed active set; the
    feature gradient combines the explicit w_k = sum_n L[n,k] x_n term with
    the sensitivity of the dual solution through the Gram matrix.
    """
    X, lam, Q, A = ctx["X"], ctx["lam"], ctx["Q"], ctx["A"]
    z, gap = ctx["bound_duals"], ctx["bound_gaps"]
    M, K = lam.shape
    Gw = np.asarray(upstream, dtype=np.float64)  # [K, D]

    direct = lam @ Gw  # [M, D]
    g = (X @ Gw.T).reshape(-1)  # dL/d(lambda flat)

    if np.any((z < _DEGENERATE_EPS) & (gap < _DEGENERATE_EPS)):
        warnings.warn(
            "weakly active SVM dual constraint: implicit gradient may be one-sided",
            DegenerateSolutionWarning,
            stacklevel=3,
        )
    active = z > gap
    E = np.eye(M * K)[active]
    n_act = E.shape[0]
    m = A.shape[0]
    kkt = np.block(
        [
            [Q, A.T, E.T],
            [A, np.zeros((m, m)), np.zeros((m, n_act))],
            [E, np.zeros((n_act, m)), np.zeros((n_act, n_act))],
        ]
    )
    rhs = np.concatenate([g, np.zeros(m + n_act)])
    try:
        xi = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as err:
        raise DegenerateSolutionError(
            "reduced KKT system is singular (stationarity block)"
        ) from err
    if np.abs(kkt @ xi - rhs).max() > 1e-6 * max(1.0, np.abs(rhs).max()):
        raise DegenerateSolutionError("reduced KKT system is near-singular (solve inaccurate)")

    Xi = xi[: M * K].reshape(M, K)
    implicit = -(Xi @ lam.T + lam @ Xi.T) @ X
    return direct + implicit


def solve_backward(solution, upstream_grad):
    """Gradient of a scalar loss w.r.t. the solver's input features.

    `upstream_grad` is the loss gradient w.r.t. the weights [K, feature_dim].
    Zero upstream gives exactly zero feature gradients.
    """
    if solution.kind == "ridge":
        return _ridge_backward(solution._ctx, upstream_grad)
    if solution.kind == "svm":
        return _svm_backward(solution._ctx, upstream_grad)
    raise ValueError(f"unknown base-learner kind {solution.kind!r}")


def ridge_solve(features, labels_onehot, ridge_reg):
    """Multi-output ridge regression W = (X'X + r I)^(-1) X' Y, as [K, D] weights."""
    feats = features if isinstance(features, Tensor) else Tensor(features)
    Y = np.asarray(labels_onehot, dtype=np.float64)
    if feats.ndim != 2 or Y.ndim != 2 or Y.shape[0] != feats.shape[0]:
        raise ValueError(f"inconsistent shapes: features {feats.shape}, labels {Y.shape}")
    if ridge_reg <= 0:
        raise ValueError(f"ridge_reg must be positive, got {ridge_reg}")
    X = feats.data.astype(np.float64)
    D = X.shape[1]
    A = X.T @ X + ridge_reg * np.eye(D)
    W_cols = np.linalg.solve(A, X.T @ Y)  # [D, K]
    ctx = {"X": X, "Y": Y, "A": A, "W_cols": W_cols}
    resid = float(np.abs(A @ W_cols - X.T @ Y).max())
    objective = float(np.sum((X @ W_cols - Y) ** 2) + ridge_reg * np.sum(W_cols**2))

    sol_holder = {}

    def bw(g):
        return (solve_backward(sol_holder["sol"], g).astype(feats.dtype),)

    weights = ad.make_op(W_cols.T.astype(feats.dtype), "ridge_solve", (feats,), bw)
    sol = BaseLearnerSolution(
        weights=weights,
        duals=None,
        slacks=None,
        solver_iters=0,
        kkt_residual=resid,
        objective=objective,
        kind="ridge",
        _ctx=ctx,
    )
    sol_holder["sol"] = sol
    return sol


def _check_labels(labels, n_classes):
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1:
        raise ValueError(f"labels must be a vector, got shape {y.shape}")
    K = int(y.max()) + 1 if n_classes is None else int(n_classes)
    if K < 2:
        raise ValueError(f"need at least 2 classes, got {K}")
    if y.min() < 0 or y.max() >= K:
        raise ValueError(f"labels outside [0, {K})")
    return y, K


def svm_primal_objective(X, y, W, C):
    """1/2 sum_k ||w_k||^2 + C sum_n xi_n with slacks recovered from W."""
    scores = X @ W.T
    M = X.shape[0]
    margins = scores[np.arange(M), y][:, None] - scores
    viol = 1.0 - np.eye(W.shape[0])[y] - margins
    xi = np.maximum(viol.max(axis=1), 0.0)
    return float(0.5 * np.sum(W**2) + C * xi.sum()), xi


def svm_cs_solve(features, labels, cfg, n_classes=None):
    """Crammer-Singer multiclass SVM through its dual QP.

    Returns the primal weights [K, D] (graph-wired), the dual matrix L [M, K],
    the recovered slacks, and solver diagnostics. Raises QPNonConvergenceError
    (carrying the residual) when the interior point stalls above cfg.tol.
    """
    feats = features if isinstance(features, Tensor) else Tensor(features)
    if feats.ndim != 2:
        raise ValueError(f"features must be [M, D], got shape {feats.shape}")
    y, K = _check_labels(labels, n_classes)
    M, D = feats.shape
    if y.shape[0] != M:
        raise ValueError(f"{y.shape[0]} labels for {M} examples")

    X = feats.data.astype(np.float64)
    gram = X @ X.T
    Q = np.kron(gram, np.eye(K))
    onehot = np.eye(K)[y]
    p = -onehot.reshape(-1)
    A = np.kron(np.eye(M), np.ones((1, K)))
    b = np.zeros(M)
    upper = (cfg.C * onehot).reshape(-1)

    prob = qp.QProblem(Q=Q, p=p, A=A, b=b, upper=upper)
    qsol = qp.qp_solve(prob, tol=cfg.tol, max_iters=cfg.max_iters)

    lam = qsol.x.reshape(M, K)
    W64 = lam.T @ X  # [K, D]
    objective, xi = svm_primal_objective(X, y, W64, cfg.C)
    ctx = {
        "X": X,
        "lam": lam,
        "Q": Q,
        "A": A,
        "bound_duals": qsol.ineq_duals,
        "bound_gaps": qsol.slacks,
    }

    sol_holder = {}

    def bw(g):
        return (solve_backward(sol_holder["sol"], g).astype(feats.dtype),)

    weights = ad.make_op(W64.astype(feats.dtype), "svm_cs_solve", (feats,), bw)
    sol = BaseLearnerSolution(
        weights=weights,
        duals=lam,
        slacks=xi,
        solver_iters=qsol.iters,
        kkt_residual=qsol.residual,
        objective=objective,
        kind="svm",
        _ctx=ctx,
    )
    sol_holder["sol"] = sol
    return sol


def scaled_logits(solution, features, scale):
    """logits[n, k] = scale * w_k . f(x_n); scale must be positive."""
    W = solution.weights if isinstance(solution, BaseLearnerSolution) else solution
    feats = features if isinstance(features, Tensor) else Tensor(features)
    scale_t = scale if isinstance(scale, Tensor) else Tensor(np.asarray(scale, dtype=feats.dtype))
    if float(scale_t.data) <= 0:
        raise ValueError(f"logit scale must be positive, got {float(scale_t.data)}")
    return scale_t * (feats @ W.T)


def episode_ce_loss(logits, labels):
    """Summed negative log-likelihood: sum_n [-logit[n, y_n] + logsumexp_k logit[n, k]].

    Summed (not averaged) over the set, so the value scales with set size.
    """
    lg = logits if isinstance(logits, Tensor) else Tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    return ad.tsum(ad.logsumexp(lg, axis=-1) - ad.pick(lg, y))


def predictions(logits):
    """Argmax class per row; exact ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)


def refine_weights(solution, support_features, support_labels, scale, step_size, steps):
    """Unrolled gradient refinement of the convex solution on the support loss.

    Each step applies W <- W - step * dW where dW is the closed-form gradient
    of the summed cross-entropy (scale * (softmax - onehot))' F, expressed in
    primitives so outer gradients flow through scale, step size, and features.
    """
    W = solution.weights
    feats = support_features
    y = np.asarray(support_labels, dtype=np.int64)
    K = W.shape[0]
    onehot = np.eye(K, dtype=feats.data.dtype)[y]
    for _ in range(steps):
        probs = ad.softmax(scale * (feats @ W.T), axis=-1)
        gradW = scale * ((probs - onehot).T @ feats)
        W = W - step_size * gradW
    return replace(solution, weights=W)
