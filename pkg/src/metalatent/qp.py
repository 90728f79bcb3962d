"""Dense primal-dual interior-point solver for small convex QPs.

Solves   min 1/2 x'Qx + p'x   s.t.  Ax = b,  l <= x <= u

with Q symmetric PSD. Problems here are tiny (tens of variables per episode),
so every linear solve is a dense factorization; no sparsity, no scaling
heuristics. The solver returns multipliers for all constraint groups because
downstream implicit differentiation needs them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "QProblem",
    "QPSolution",
    "InfeasibleProblemError",
    "UnboundedProblemError",
    "QPNonConvergenceError",
    "qp_solve",
    "kkt_residual",
]


class InfeasibleProblemError(RuntimeError):
    pass


class UnboundedProblemError(RuntimeError):
    pass


class QPNonConvergenceError(RuntimeError):
    """Iteration budget exhausted; carries the best residual reached."""

    def __init__(self, residual, iters):
        super().__init__(f"no convergence after {iters} iterations, residual {residual:.3e}")
        self.residual = residual
        self.iters = iters


@dataclass
class QProblem:
    """Quadratic program data. `lower`/`upper` may contain +-inf entries."""

    Q: np.ndarray
    p: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        n = self.p.shape[0]
        if self.Q.shape != (n, n):
            raise ValueError(f"Q shape {self.Q.shape} inconsistent with p of length {n}")
        if not np.allclose(self.Q, self.Q.T, atol=1e-10):
            raise ValueError("Q must be symmetric")
        if (self.A is None) != (self.b is None):
            raise ValueError("A and b must be given together")
        if self.A is not None:
            self.A = np.asarray(self.A, dtype=np.float64)
            self.b = np.asarray(self.b, dtype=np.float64)
            if self.A.shape != (self.b.shape[0], n):
                raise ValueError(f"A shape {self.A.shape} inconsistent with b/{n} vars")
        for name in ("lower", "upper"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if v.shape != (n,):
                    raise ValueError(f"{name} must have {n} entries")
                setattr(self, name, v)
        if self.lower is not None and self.upper is not None:
            if np.any(self.lower > self.upper):
                raise InfeasibleProblemError("crossed bounds: lower > upper")

    def n_vars(self):
        return self.p.shape[0]

    def ineq_rows(self):
        """Stack finite bounds into G x <= h rows; returns (G, h, kind, index).

        kind is +1 for an upper bound row (x_i <= u_i) and -1 for a lower
        bound row (-x_i <= -l_i); index is the variable the row constrains.
        """
        n = self.n_vars()
        rows, rhs, kinds, idxs = [], [], [], []
        if self.upper is not None:
            for i in np.flatnonzero(np.isfinite(self.upper)):
                e = np.zeros(n)
                e[i] = 1.0
                rows.append(e)
                rhs.append(self.upper[i])
                kinds.append(1)
                idxs.append(i)
        if self.lower is not None:
            for i in np.flatnonzero(np.isfinite(self.lower)):
                e = np.zeros(n)
                e[i] = -1.0
                rows.append(e)
                rhs.append(-self.lower[i])
                kinds.append(-1)
                idxs.append(i)
        if rows:
            return np.array(rows), np.array(rhs), np.array(kinds), np.array(idxs)
        return np.zeros((0, n)), np.zeros(0), np.zeros(0, dtype=int), np.zeros(0, dtype=int)


@dataclass
class QPSolution:
    x: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    slacks: np.ndarray
    iters: int
    residual: float
    objective: float


def _objective(prob, x):
    return float(0.5 * x @ prob.Q @ x + prob.p @ x)


def kkt_residual(prob, x, eq_duals, ineq_duals, G, h):
    """Worst KKT violation: stationarity, feasibility, complementary slackness."""
    rd = prob.Q @ x + prob.p
    if prob.A is not None:
        rd = rd + prob.A.T @ eq_duals
    if G.shape[0]:
        rd = rd + G.T @ ineq_duals
    parts = [np.abs(rd).max() if rd.size else 0.0]
    if prob.A is not None:
        parts.append(np.abs(prob.A @ x - prob.b).max())
    if G.shape[0]:
        gap = h - G @ x
        parts.append(float(np.maximum(-gap, 0.0).max()))  # primal violation
        parts.append(float(np.maximum(-ineq_duals, 0.0).max()))  # dual feasibility
        parts.append(float(np.abs(ineq_duals * gap).max()))  # complementarity
    return float(max(parts))


def _solve_equality_only(prob, tol):
    n = prob.n_vars()
    if prob.A is None:
        try:
            x = np.linalg.solve(prob.Q, -prob.p)
        except np.linalg.LinAlgError:
            x, *_ = np.linalg.lstsq(prob.Q, -prob.p, rcond=None)
            if np.abs(prob.Q @ x + prob.p).max() > max(tol, 1e-10):
                raise UnboundedProblemError("singular Q with p outside its range")
        y = np.zeros(0)
    else:
        m = prob.A.shape[0]
        kkt = np.block([[prob.Q, prob.A.T], [prob.A, np.zeros((m, m))]])
        rhs = np.concatenate([-prob.p, prob.b])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol, res, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
            if np.abs(kkt @ sol - rhs).max() > max(tol, 1e-10):
                raise InfeasibleProblemError("inconsistent equality constraints")
        x, y = sol[:n], sol[n:]
    G = np.zeros((0, n))
    resid = kkt_residual(prob, x, y, np.zeros(0), G, np.zeros(0))
    return QPSolution(x, y, np.zeros(0), np.zeros(0), 0, resid, _objective(prob, x))


def _polish(prob, G, h, x, y, z, s):
    """Solve the reduced KKT system exactly at the apparent active set.

    Interior-point iterates stall near sqrt(machine eps) relative to the
    problem scale; one dense equality solve at the final active set typically
    lands within ~1e-12 of it. Returns None when the active set looks wrong
    (negative multipliers or primal violations) or the system is singular.
    """
    n = prob.n_vars()
    A = prob.A if prob.A is not None else np.zeros((0, n))
    b = prob.b if prob.b is not None else np.zeros(0)
    m = A.shape[0]
    active = z > s
    Ga, ha = G[active], h[active]
    na = Ga.shape[0]
    kkt = np.block(
        [
            [prob.Q, A.T, Ga.T],
            [A, np.zeros((m, m)), np.zeros((m, na))],
            [Ga, np.zeros((na, m)), np.zeros((na, na))],
        ]
    )
    rhs = np.concatenate([-prob.p, b, ha])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    xp, yp, mu_act = sol[:n], sol[n : n + m], sol[n + m :]
    if na and mu_act.min() < -1e-9:
        return None
    gap = h - G @ xp
    if gap.size and gap.min() < -1e-9:
        return None
    zp = np.zeros(G.shape[0])
    zp[active] = np.maximum(mu_act, 0.0)
    return xp, yp, zp


def qp_solve(prob, tol=1e-8, max_iters=50):
    """Mehrotra predictor-corrector interior point with final polishing.

    Raises QPNonConvergenceError when the KKT residual stays above `tol` for
    `max_iters` iterations, and infeasibility/unboundedness errors when the
    iterates make either diagnosis obvious.
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    G, h, _, _ = prob.ineq_rows()
    q = G.shape[0]
    if q == 0:
        return _solve_equality_only(prob, tol)

    n = prob.n_vars()
    A = prob.A if prob.A is not None else np.zeros((0, n))
    b = prob.b if prob.b is not None else np.zeros(0)
    m = A.shape[0]

    x = np.zeros(n)
    if prob.lower is not None or prob.upper is not None:
        lo = prob.lower if prob.lower is not None else np.full(n, -np.inf)
        hi = prob.upper if prob.upper is not None else np.full(n, np.inf)
        x = np.clip(x, lo, hi)
    y = np.zeros(m)
    z = np.ones(q)
    s = np.ones(q)

    best_resid = np.inf
    for it in range(1, max_iters + 1):
        rd = prob.Q @ x + prob.p + A.T @ y + G.T @ z
        rp = A @ x - b
        rg = G @ x + s - h
        mu = float(z @ s) / q

        resid = kkt_residual(prob, x, y, z, G, h)
        best_resid = min(best_resid, resid)
        if resid <= tol:
            return QPSolution(x, y, z, h - G @ x, it - 1, resid, _objective(prob, x))
        if resid <= 1e-4 * max(1.0, np.abs(prob.Q).max()):
            polished = _polish(prob, G, h, x, y, z, s)
            if polished is not None:
                xp, yp, zp = polished
                presid = kkt_residual(prob, xp, yp, zp, G, h)
                if presid <= tol:
                    return QPSolution(xp, yp, zp, h - G @ xp, it - 1, presid, _objective(prob, xp))

        if max(np.abs(x).max(), np.abs(z).max()) > 1e14:
            raise InfeasibleProblemError("iterates diverged; problem likely infeasible or unbounded")

        w = z / s
        core = prob.Q + G.T @ (w[:, None] * G)
        kkt = np.block([[core, A.T], [A, np.zeros((m, m))]])

        def newton(rs_target):
            rhs_x = -rd - G.T @ ((-rs_target + z * rg) / s)
            rhs = np.concatenate([rhs_x, -rp])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                reg = np.zeros((n + m, n + m))
                reg[:n, :n] = 1e-10 * np.eye(n)
                reg[n:, n:] = -1e-10 * np.eye(m)
                sol = np.linalg.solve(kkt + reg, rhs)
            dx, dy = sol[:n], sol[n:]
            ds = -rg - G @ dx
            dz = (-rs_target + z * rg) / s + w * (G @ dx)
            return dx, dy, dz, ds

        def max_step(v, dv):
            neg = dv < 0
            if not neg.any():
                return 1.0
            return min(1.0, float((-v[neg] / dv[neg]).min()))

        # predictor
        dxa, dya, dza, dsa = newton(z * s)
        alpha_aff = min(max_step(s, dsa), max_step(z, dza))
        mu_aff = float((z + alpha_aff * dza) @ (s + alpha_aff * dsa)) / q
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # corrector
        dx, dy, dz, ds = newton(z * s + dza * dsa - sigma * mu)
        alpha_p = 0.99 * max_step(s, ds)
        alpha_d = 0.99 * max_step(z, dz)
        x = x + alpha_p * dx
        s = s + alpha_p * ds
        y = y + alpha_d * dy
        z = z + alpha_d * dz

    # the loop exits after a step: give the final iterate one more chance
    resid = kkt_residual(prob, x, y, z, G, h)
    if resid <= tol:
        return QPSolution(x, y, z, h - G @ x, max_iters, resid, _objective(prob, x))
    polished = _polish(prob, G, h, x, y, z, s)
    if polished is not None:
        xp, yp, zp = polished
        presid = kkt_residual(prob, xp, yp, zp, G, h)
        if presid <= tol:
            return QPSolution(xp, yp, zp, h - G @ xp, max_iters, presid, _objective(prob, xp))
    raise QPNonConvergenceError(min(best_resid, resid), max_iters)
