"""
Request-level operations shared by the management commands and the REST views.
"""
import logging

import numpy as np

from clustering.partitions import extract_partition
from clustering.path import solution_path
from clustering.serializers import PathConfigSerializer, SolutionPathSerializer
from datagen.ellipses import default_benchmark_spec
from datagen.serializers import BenchmarkSpecSerializer
from oracle.serializers import OracleConfigSerializer
from oracle.solvers import solve_reference
from pdmm.protocol import pdmm_run
from pdmm.serializers import CommLedgerSerializer, PdmmConfigSerializer
from problem.formulation import Convention, objective, subgradient_residual
from problem.serializers import ProblemSerializer
from theory.certificates import aposteriori_recovery_check, sample_sublevel_set

from .runner import benchmark_problem

logger = logging.getLogger(__name__)


def build_problem(validated):
    return ProblemSerializer().create(validated)


def oracle_config(validated):
    return OracleConfigSerializer().create(validated.get("oracle") or {})


def pdmm_config(validated):
    return PdmmConfigSerializer().create(validated.get("pdmm") or {})


def solve(validated):
    """
    Solve a validated solve request.

    Returns:
        dict: {x, objective, kkt_residual, iters, converged}, plus ``ledger`` for the protocol.
    """
    problem = build_problem(validated)
    if validated.get("solver", "oracle") == "pdmm":
        cfg = pdmm_config(validated)
        run = pdmm_run(problem, cfg)
        X = run.state.x
        tol = oracle_config(validated).tol
        kkt = subgradient_residual(problem, X, 1e-5 * (1.0 + float(np.linalg.norm(X, axis=1).mean())))
        return {
            "x": X.tolist(),
            "objective": objective(problem, X),
            "kkt_residual": kkt,
            "iters": cfg.max_iters,
            "converged": bool(kkt <= tol),
            "ledger": CommLedgerSerializer(run.ledger).data,
        }
    return solve_reference(problem, oracle_config(validated)).as_dict()


def certify(validated):
    problem = build_problem(validated)
    cfg = oracle_config(validated)
    solution = validated.get("solution")
    solved_converged = True
    if solution is None:
        reference = solve_reference(problem, cfg)
        solution, solved_converged = reference.x, reference.converged
    sampler = None
    options = validated.get("sampler")
    if options:
        partition = extract_partition(problem.check_stack(solution), validated.get("tol_tie"))
        sampler = sample_sublevel_set(
            problem, partition, n_samples=options.get("n_samples"), seed=options.get("seed", 0),
            upper_value=options.get("upper_value"), batch_size=options.get("batch_size"),
        )
    certificate = aposteriori_recovery_check(problem, solution, validated.get("tol_tie"), cfg, sampler)
    certificate.converged = certificate.converged and solved_converged
    return certificate


def path(validated):
    problem = build_problem(validated)
    cfg = PathConfigSerializer().create(validated.get("path") or {})
    result = solution_path(problem, cfg)
    return result, SolutionPathSerializer(result).data


def trace_problem(validated):
    """The problem of a protocol trace request: explicit, or built from a benchmark."""
    if validated.get("problem"):
        return build_problem(validated["problem"])
    spec = BenchmarkSpecSerializer().create(validated["benchmark"]) if validated.get("benchmark") else default_benchmark_spec()
    problem, _ = benchmark_problem(
        spec,
        reg_c=validated.get("reg_c", 1e-3),
        lam=validated.get("lambda", 0.1),
        convention=validated.get("convention") or Convention(),
    )
    return problem
