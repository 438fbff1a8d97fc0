"""
Warm-started lambda solution paths: lambda_{r+1} = c * lambda_r until every user
shares one model or the step cap is reached.
"""
import csv
import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fusionproject.exceptions import ConfigError
from oracle.solvers import OracleConfig, solve_reference
from pdmm.protocol import PdmmConfig, pdmm_run
from problem.formulation import GlobalConsensus, SumOfNorms, objective, subgradient_residual
from theory.certificates import aposteriori_recovery_check

from .partitions import default_tie_tol, extract_partition

logger = logging.getLogger(__name__)


class PathSolver(enum.Enum):
    ORACLE = "oracle"
    PDMM = "pdmm"


@dataclass(frozen=True)
class PathConfig:
    """
    Attributes:
        lambda_init (float | None): first lambda; None picks ``default_lambda_init``.
        growth_c (float): geometric factor, > 1.
        max_steps (int): step cap.
        tie_tol (float | None): fixed tie tolerance; None uses ``default_tie_tol`` per step.
        solver (PathSolver): reference oracle or the federated protocol.
        certify (bool): attach an a-posteriori certificate to every entry.
    """
    lambda_init: Optional[float] = None
    growth_c: float = 2.0
    max_steps: int = 60
    tie_tol: Optional[float] = None
    solver: PathSolver = PathSolver.ORACLE
    oracle: OracleConfig = field(default_factory=OracleConfig)
    pdmm: PdmmConfig = field(default_factory=PdmmConfig)
    certify: bool = False

    def __post_init__(self):
        object.__setattr__(self, "solver", PathSolver(self.solver))
        if not self.growth_c > 1:
            raise ConfigError("growth_c must exceed 1")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if self.lambda_init is not None and not self.lambda_init > 0:
            raise ConfigError("lambda_init must be positive")
        if self.tie_tol is not None and not self.tie_tol > 0:
            raise ConfigError("tie_tol must be positive")


@dataclass
class PathEntry:
    lam: float
    x: np.ndarray
    num_clusters: int
    partition: object
    objective: float
    converged: bool
    certificate: object = None

    def as_dict(self):
        return {
            "lambda": self.lam,
            "num_clusters": self.num_clusters,
            "partition": [list(b) for b in self.partition.blocks],
            "objective": float(self.objective),
            "converged": bool(self.converged),
            "x": np.asarray(self.x).tolist(),
            "certificate": self.certificate.as_dict() if self.certificate is not None else None,
        }


@dataclass
class SolutionPath:
    entries: list = field(default_factory=list)

    @property
    def lambdas(self):
        return [e.lam for e in self.entries]

    @property
    def cluster_counts(self):
        return [e.num_clusters for e in self.entries]

    def segments_with(self, num_clusters):
        """Contiguous runs of entries with the given cluster count, as lists of entries."""
        runs, current = [], []
        for entry in self.entries:
            if entry.num_clusters == num_clusters:
                current.append(entry)
            elif current:
                runs.append(current)
                current = []
        if current:
            runs.append(current)
        return runs


def default_lambda_init(problem, oracle_cfg=None):
    """
    0.01 * scale * max_{i,j} ||grad f_i(y) - grad f_j(y)|| / N at the consensus
    minimizer y, so the path starts with (generically) N distinct models.
    """
    y = solve_reference(problem.with_penalty(GlobalConsensus()), oracle_cfg).x[0]
    grads = np.array([loss.grad(y) for loss in problem.losses])
    diff = grads[:, None, :] - grads[None, :, :]
    spread = float(np.linalg.norm(diff, axis=-1).max())
    scale = problem.convention.recovery_scale(problem.n_users)
    value = 0.01 * scale * spread / problem.n_users
    return value if value > 0 else 1e-3


def _solve_step(problem, cfg, warm):
    if cfg.solver is PathSolver.PDMM:
        run = pdmm_run(problem, cfg.pdmm, initial_x=warm)
        X = run.state.x.copy()
        kkt = subgradient_residual(problem, X, default_tie_tol(X))
        return X, kkt <= cfg.oracle.tol
    result = solve_reference(problem, cfg.oracle, initial=warm)
    return result.x, result.converged


def solution_path(problem, cfg=None):
    """
    Solve the sum-of-norms problem along a geometric lambda grid with warm starts.

    The lambda carried by ``problem`` is ignored. Non-converged steps are flagged on
    their entry and the path continues from the returned iterate.
    """
    cfg = cfg or PathConfig()
    if not isinstance(problem.penalty, SumOfNorms):
        raise ConfigError("solution paths are defined for sum-of-norms problems")
    lam = cfg.lambda_init if cfg.lambda_init is not None else default_lambda_init(problem, cfg.oracle)

    path = SolutionPath()
    warm = None
    for step in range(cfg.max_steps):
        current = problem.with_penalty(SumOfNorms(lam))
        X, converged = _solve_step(current, cfg, warm)
        tol = cfg.tie_tol if cfg.tie_tol is not None else default_tie_tol(X)
        partition = extract_partition(X, tol)
        entry = PathEntry(lam, X, partition.K, partition, objective(current, X), converged)
        if cfg.certify:
            entry.certificate = aposteriori_recovery_check(current, X, tol, cfg.oracle)
        if not converged:
            logger.warning("path step %d (lambda=%.6g) did not converge", step, lam)
        logger.info("path step %d: lambda=%.6g clusters=%d", step, lam, partition.K)
        path.entries.append(entry)
        if partition.K == 1:
            break
        warm = X
        lam *= cfg.growth_c
    return path


def write_jsonl(path, solution_path_):
    with open(path, "w") as handle:
        for entry in solution_path_.entries:
            handle.write(json.dumps(entry.as_dict()) + "\n")
    return path


def write_summary_csv(path, solution_path_):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["lambda", "num_clusters", "objective", "converged"])
        for entry in solution_path_.entries:
            writer.writerow([repr(entry.lam), entry.num_clusters, repr(entry.objective), entry.converged])
    return path
