"""
Serial, deterministic reference solvers.

Fusion-penalized problems (sum of norms, clustered sum of norms) are solved over the
splitting x_k - x_l = z_kl by two-block ADMM or by a diminishing-step subgradient
method, then polished: candidate fusion patterns are read off the raw iterate, each
fused problem is solved exactly with L-BFGS-B and the certified candidate with the
least objective is returned. Smooth formulations use accelerated (proximal) gradient.
"""
import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from fusionproject.exceptions import ConfigError
from problem.formulation import (
    ClusteredSumOfNorms,
    Convention,
    GlobalConsensus,
    LocalOnly,
    SquaredNorms,
    SumOfNorms,
    objective,
    objective_gradient,
    pairwise_distances,
    subgradient_residual,
    tie_components,
)

from .smooth import accelerated_gradient, block_soft_threshold, laplacian_prox

logger = logging.getLogger(__name__)

POLISH_EVERY = 250


class OracleMethod(enum.Enum):
    SERIAL_ADMM = "serial_admm"
    SUBGRADIENT = "subgradient"
    CLOSED_FORM = "closed_form"


class Schedule(enum.Enum):
    GAUSS_SEIDEL = "gauss_seidel"
    JACOBI = "jacobi"


@dataclass(frozen=True)
class OracleConfig:
    """
    Attributes:
        method (OracleMethod): solver family.
        max_iters (int): outer iteration budget.
        tol (float): KKT residual accepted as converged.
        rho (float): ADMM penalty.
        seed (int): recorded for reproducibility; the solvers draw no random numbers.
        schedule (Schedule): Gauss-Seidel (default) or Jacobi ADMM sweeps.
        inner_tol (float): tolerance of inner smooth solves.
        inner_max_iters (int): budget of inner smooth solves.
        polish (bool): refine fusion-penalized iterates on their fusion pattern.
        record_trajectory (bool): keep every outer iterate.
    """
    method: OracleMethod = OracleMethod.SERIAL_ADMM
    max_iters: int = 20000
    tol: float = 1e-7
    rho: float = 1.0
    seed: int = 0
    schedule: Schedule = Schedule.GAUSS_SEIDEL
    inner_tol: float = 1e-10
    inner_max_iters: int = 100
    polish: bool = True
    record_trajectory: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", OracleMethod(self.method))
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if not self.rho > 0:
            raise ConfigError("rho must be positive")
        if self.max_iters < 0 or self.inner_max_iters < 1:
            raise ConfigError("iteration budgets must be positive")


@dataclass
class OracleResult:
    x: np.ndarray
    objective_value: float
    kkt_residual: float
    iters_used: int
    converged: bool
    method: str = ""
    objective_trace: list = field(default_factory=list)
    trajectory: Optional[list] = None
    elapsed: float = 0.0

    def as_dict(self):
        return {
            "x": np.asarray(self.x).tolist(),
            "objective": self.objective_value,
            "kkt_residual": self.kkt_residual,
            "iters": self.iters_used,
            "converged": self.converged,
        }


def two_point_threshold(a1, a2, convention=Convention()):
    """
    Smallest lambda at which the two-user quadratic sum-of-norms solution is consensual.

    Fusion at the midpoint needs alpha ||a1 - a2|| / 2 <= 2 pi lambda, pi the pair factor.
    """
    gap = float(np.linalg.norm(np.atleast_1d(np.asarray(a1, dtype=float) - np.asarray(a2, dtype=float))))
    return convention.recovery_scale(2) * gap / 2.0


class _FusionObjective:
    """
    H(W) = sum_k h_k(w_k) + sum_{k != l} omega_kl ||w_k - w_l||, i.e. the problem
    objective divided by its loss factor.
    """

    def __init__(self, stacked, omega):
        self.stacked = stacked
        self.omega = omega
        self.m = omega.shape[0]

    def value(self, W):
        return float(self.stacked.value(W)) + float(np.sum(self.omega * pairwise_distances(W)))

    def subgradient(self, W):
        diff = W[:, None, :] - W[None, :, :]
        norms = np.linalg.norm(diff, axis=-1, keepdims=True)
        unit = np.divide(diff, norms, out=np.zeros_like(diff), where=norms > 0)
        return self.stacked.block_grads(W) + 2.0 * np.einsum("kl,kld->kd", self.omega, unit)

    def merged(self, labels):
        labels = np.asarray(labels, dtype=int)
        p = int(labels.max()) + 1
        onehot = np.zeros((p, self.m))
        onehot[labels, np.arange(self.m)] = 1.0
        omega = onehot @ self.omega @ onehot.T
        np.fill_diagonal(omega, 0.0)
        return _FusionObjective(self.stacked.regroup(labels), omega), onehot


def _scaled(problem):
    alpha = problem.loss_factor
    return _FusionObjective(problem.stacked, problem.coupling / alpha)


def _initial_stack(problem, initial):
    m, d = problem.n_models, problem.dim_d
    if initial is None:
        return np.zeros((m, d))
    return problem.check_stack(initial).copy()


def _finish(problem, X, iters, cfg, method, trace, trajectory, started, tie_tol=None):
    if tie_tol is None:
        tie_tol = 1e-12 * (1.0 + float(np.abs(X).max()))
    kkt = subgradient_residual(problem, X, tie_tol)
    result = OracleResult(
        x=X,
        objective_value=objective(problem, X),
        kkt_residual=kkt,
        iters_used=iters,
        converged=bool(kkt <= cfg.tol),
        method=method,
        objective_trace=trace,
        trajectory=trajectory,
        elapsed=time.perf_counter() - started,
    )
    if not result.converged:
        logger.warning(
            "%s stopped after %d iterations with KKT residual %.3e (tol %.1e)",
            method, iters, kkt, cfg.tol,
        )
    else:
        logger.debug("%s converged in %d iterations, objective %.10g", method, iters, result.objective_value)
    return result


def solve_reference(problem, cfg=None, initial=None):
    """
    Ground-truth minimizer of ``problem``.

    Args:
        problem (FederationProblem): any penalty kind.
        cfg (OracleConfig): solver settings.
        initial: optional starting stack (warm start).

    Returns:
        OracleResult: non-convergence is reported through ``converged``, never raised.
    """
    cfg = cfg or OracleConfig()
    started = time.perf_counter()
    penalty = problem.penalty

    if cfg.method is OracleMethod.CLOSED_FORM:
        X = _closed_form(problem)
        return _finish(problem, X, 0, cfg, "closed_form", [objective(problem, X)], None, started)

    coupled = penalty.couples and problem.n_models > 1 and np.any(problem.coupling > 0)
    if penalty.smooth or not coupled:
        return _solve_smooth(problem, cfg, initial, started)

    if cfg.method is OracleMethod.SUBGRADIENT:
        return _solve_subgradient(problem, cfg, initial, started)
    if cfg.schedule is Schedule.JACOBI:
        return _solve_jacobi_admm(problem, cfg, initial, started)
    return _solve_admm(problem, cfg, initial, started)


def _closed_form(problem):
    quad = problem.stacked.quadratic_blocks()
    if quad is None:
        raise ConfigError("closed form solutions need quadratic losses")
    scale, center = quad
    penalty = problem.penalty
    if isinstance(penalty, (LocalOnly, GlobalConsensus)) or not np.any(problem.coupling):
        return center.copy()
    if isinstance(penalty, SquaredNorms):
        omega = problem.coupling
        alpha = problem.loss_factor
        system = alpha * np.diag(scale) + 4.0 * (np.diag(omega.sum(axis=1)) - omega)
        return np.linalg.solve(system, alpha * scale[:, None] * center)
    raise ConfigError(f"no closed form for {penalty.kind}")


def _solve_smooth(problem, cfg, initial, started):
    X0 = _initial_stack(problem, initial)
    alpha = problem.loss_factor
    stacked = problem.stacked
    lipschitz = alpha * float(stacked.block_lipschitz.max())
    prox = None
    if isinstance(problem.penalty, SquaredNorms) and problem.n_models > 1:
        gamma_eff = problem.penalty.gamma * problem.convention.pair_factor
        prox = laplacian_prox(gamma_eff, problem.n_models)

    def grad(X):
        return alpha * stacked.block_grads(X)

    run = accelerated_gradient(grad, X0, lipschitz, cfg.inner_tol, max(cfg.max_iters, 1), prox=prox)
    trace = [objective(problem, run.x)]
    return _finish(problem, run.x, run.iters, cfg, "accelerated_gradient", trace, None, started)


def _coupled_block_solver(fusion, rho, cfg):
    """
    Minimizer of sum_k h_k(w_k) + rho/2 sum_{k != l} ||w_k - w_l - b_kl||^2 given the
    right-hand side rho (sum_l b_kl - sum_l b_lk).
    """
    m = fusion.m
    laplacian = 2.0 * rho * (m * np.eye(m) - np.ones((m, m)))
    quad = fusion.stacked.quadratic_blocks()
    if quad is not None:
        scale, center = quad
        factor = cho_factor(np.diag(scale) + laplacian)
        base = scale[:, None] * center

        def solve(rhs, W_prev):
            return cho_solve(factor, base + rhs), True

        return solve

    lipschitz = float(fusion.stacked.block_lipschitz.max()) + 2.0 * rho * m

    def solve(rhs, W_prev):
        def grad(W):
            return fusion.stacked.block_grads(W) + laplacian @ W - rhs

        run = accelerated_gradient(grad, W_prev, lipschitz, cfg.inner_tol, cfg.inner_max_iters)
        return run.x, run.converged

    return solve


def _differences(W):
    return W[:, None, :] - W[None, :, :]


def _solve_admm(problem, cfg, initial, started):
    fusion = _scaled(problem)
    m = fusion.m
    rho = cfg.rho
    offdiag = ~np.eye(m, dtype=bool)[:, :, None]
    thresholds = fusion.omega / rho
    solve_x = _coupled_block_solver(fusion, rho, cfg)

    W = _initial_stack(problem, initial)
    Z = _differences(W)
    U = np.zeros_like(Z)
    trace, trajectory = [], [] if cfg.record_trajectory else None
    inner_failures = 0
    iters = 0
    polished = None
    for iters in range(1, cfg.max_iters + 1):
        B = np.where(offdiag, Z - U, 0.0)
        rhs = rho * (B.sum(axis=1) - B.sum(axis=0))
        W, ok = solve_x(rhs, W)
        inner_failures += not ok

        D = _differences(W)
        Z_prev = Z
        Z = np.where(offdiag, block_soft_threshold(D + U, thresholds), 0.0)
        U = U + D - Z

        trace.append(objective(problem, W))
        if trajectory is not None:
            trajectory.append(W.copy())

        scale = 1.0 + float(np.abs(W).max())
        primal = float(np.linalg.norm(D - Z, axis=-1).max())
        dual = rho * float(np.linalg.norm(Z - Z_prev, axis=-1).max())
        if max(primal, dual) <= 1e-3 * cfg.tol * scale:
            break
        if cfg.polish and iters % POLISH_EVERY == 0:
            X, kkt = _polish(problem, fusion, W, cfg)
            if kkt <= cfg.tol:
                polished = X
                break

    if inner_failures:
        logger.warning("ADMM x-update hit the inner iteration budget %d times", inner_failures)
    if polished is None:
        polished = _polish(problem, fusion, W, cfg)[0] if cfg.polish else W
    return _finish(problem, polished, iters, cfg, "serial_admm", trace, trajectory, started)


def paired_block_update(stacked, W, Z, M, rho, eta, cfg):
    """
    Jacobi block minimizer of the augmented Lagrangian in every w_k, pairs (k, l) and (l, k):

        h_k(w) + <sum_l mu_kl - sum_l mu_lk, w>
          + rho/2 sum_l ||w - w_l - z_kl||^2 + rho/2 sum_l ||w_l - w - z_lk||^2 + eta/2 ||w - w_k||^2
    """
    m = W.shape[0]
    kappa = 2.0 * rho * (m - 1) + eta
    others = W.sum(axis=0, keepdims=True) - W
    target = rho * (2.0 * others + Z.sum(axis=1) - Z.sum(axis=0)) + eta * W
    linear = M.sum(axis=1) - M.sum(axis=0)
    quad = stacked.quadratic_blocks()
    if quad is not None:
        scale, center = quad
        return (scale[:, None] * center + target - linear) / (scale[:, None] + kappa), True

    lipschitz = float(stacked.block_lipschitz.max()) + kappa

    def grad(V):
        return stacked.block_grads(V) + linear + kappa * V - target

    run = accelerated_gradient(grad, W, lipschitz, cfg.inner_tol, cfg.inner_max_iters)
    return run.x, run.converged


def _solve_jacobi_admm(problem, cfg, initial, started):
    """
    Jacobi sweeps with unscaled duals: every block update reads the iterate from the
    start of the sweep. This is the fully activated, undamped protocol step.
    """
    fusion = _scaled(problem)
    m = fusion.m
    rho = cfg.rho
    offdiag = ~np.eye(m, dtype=bool)[:, :, None]
    thresholds = fusion.omega / rho

    W = _initial_stack(problem, initial)
    Z = np.zeros((m, m, problem.dim_d))
    M = np.zeros_like(Z)
    trace, trajectory = [objective(problem, W)], [W.copy()] if cfg.record_trajectory else None
    iters = 0
    for iters in range(1, cfg.max_iters + 1):
        W_next, _ = paired_block_update(fusion.stacked, W, Z, M, rho, 0.0, cfg)
        Z = np.where(offdiag, block_soft_threshold(_differences(W) + M / rho, thresholds), 0.0)
        W = W_next
        M = np.where(offdiag, M + rho * (_differences(W) - Z), 0.0)
        trace.append(objective(problem, W))
        if trajectory is not None:
            trajectory.append(W.copy())
    return _finish(problem, W, iters, cfg, "serial_admm_jacobi", trace, trajectory, started)


def _solve_subgradient(problem, cfg, initial, started):
    fusion = _scaled(problem)
    W = _initial_stack(problem, initial)
    step0 = 1.0 / float(fusion.stacked.block_lipschitz.max())
    best, best_value = W.copy(), fusion.value(W)
    trace = [best_value * problem.loss_factor]
    iters = 0
    for iters in range(1, cfg.max_iters + 1):
        W = W - (step0 / np.sqrt(iters)) * fusion.subgradient(W)
        value = fusion.value(W)
        if value < best_value:
            best, best_value = W.copy(), value
        trace.append(best_value * problem.loss_factor)
    X = _polish(problem, fusion, best, cfg)[0] if cfg.polish else best
    return _finish(problem, X, iters, cfg, "subgradient", trace, None, started)


def _solve_fused(fusion, V0):
    """Minimize a merged fusion objective with L-BFGS-B from V0."""
    shape = V0.shape

    def fun(flat):
        V = flat.reshape(shape)
        return fusion.value(V), fusion.subgradient(V).ravel()

    res = minimize(
        fun, V0.ravel(), jac=True, method="L-BFGS-B",
        options={"maxiter": 5000, "gtol": 1e-13, "ftol": 1e-16, "maxcor": 30},
    )
    return res.x.reshape(shape)


def _polish(problem, fusion, W_raw, cfg):
    """
    Refine ``W_raw`` on the fusion patterns it suggests and keep the best certified stack.
    """
    scale = 1.0 + float(np.abs(W_raw).max())
    seen = {}
    for rel in np.logspace(-12, -1, 23):
        labels = tie_components(W_raw, rel * scale)
        seen.setdefault(tuple(labels.tolist()), labels)

    tie_tol = 1e-12 * scale
    candidates = [(objective(problem, W_raw), np.inf, W_raw)]
    for labels in seen.values():
        merged, onehot = fusion.merged(labels)
        V0 = (onehot @ W_raw) / onehot.sum(axis=1, keepdims=True)
        V = _solve_fused(merged, V0)
        X = V[labels]
        kkt = subgradient_residual(problem, X, tie_tol)
        candidates.append((objective(problem, X), kkt, X))

    certified = [c for c in candidates if c[1] <= cfg.tol]
    pool = certified or candidates
    value, kkt, X = min(pool, key=lambda c: (c[0], c[1]))
    logger.debug(
        "polished over %d fusion patterns: objective %.12g, KKT %.3e", len(seen), value, kkt,
    )
    return X, kkt
