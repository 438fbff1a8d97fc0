"""
Experiment pipelines: the five-family benchmark, the protocol gap trace and the
recovery-window check on surrogate losses.
"""
import csv
import dataclasses
import enum
import json
import logging
import time
from dataclasses import dataclass, field
from functools import lru_cache
from multiprocessing import Pool
from pathlib import Path
from typing import Optional

import numpy as np
from django.conf import settings

from clustering.path import PathConfig, solution_path
from datagen.ellipses import (
    centroid_surrogates,
    default_benchmark_spec,
    generate,
    hinge_losses,
    separated_benchmark_spec,
)
from fusionproject.exceptions import ConfigError
from oracle.solvers import OracleConfig, solve_reference
from pdmm.protocol import PdmmConfig, pdmm_run
from pdmm.serializers import write_trace_csv
from problem.formulation import (
    ClusteredSumOfNorms,
    Convention,
    FederationProblem,
    GlobalConsensus,
    LocalOnly,
    SquaredNorms,
    SumOfNorms,
    lift,
)
from theory.certificates import conservative_bounds, sample_sublevel_set

from .metrics import average_test_accuracy, count_distinct, within_cluster_distance

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "family", "lambda_or_gamma", "seed", "avg_test_accuracy", "avg_within_cluster_distance",
    "num_distinct_models", "objective", "kkt_residual", "converged",
]
SUMMARY_COLUMNS = [
    "family", "lambda_or_gamma", "runs", "avg_test_accuracy", "avg_within_cluster_distance", "num_distinct_models",
]


class Family(enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"
    SQUARED_PENALTY = "squared_penalty"
    SUM_OF_NORMS = "sum_of_norms"
    ORACLE = "oracle"


FAMILY_ORDER = {family: position for position, family in enumerate(Family)}


def default_grid():
    experiment = settings.FUSION["EXPERIMENT"]
    values = np.logspace(np.log10(experiment["grid_min"]), np.log10(experiment["grid_max"]), experiment["grid_points"])
    return tuple(float(v) for v in values)


def default_convention():
    return Convention.from_label(settings.FUSION["EXPERIMENT"]["convention"])


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Attributes:
        benchmark (BenchmarkSpec): geometry and sizes; its seed is replaced per run.
        lambda_grid (tuple): sum-of-norms penalties.
        gamma_grid (tuple): squared-norm penalties.
        reg_c (float): ridge weight of the squared hinge losses.
        convention (Convention): objective normalization; defaults to the configured experiment convention.
        seeds (tuple): data seeds.
        output_dir (str | None): where results go; None keeps them in memory.
        families (tuple[Family]): families to train.
        workers (int): processes; 1 runs inline.
        distinct_tol (float): relative tolerance for counting distinct models.
    """
    benchmark: object = field(default_factory=default_benchmark_spec)
    lambda_grid: tuple = field(default_factory=default_grid)
    gamma_grid: tuple = field(default_factory=default_grid)
    reg_c: float = 1e-3
    seeds: tuple = (0, 1, 2, 3, 4)
    output_dir: Optional[str] = None
    convention: Convention = field(default_factory=default_convention)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    families: tuple = tuple(Family)
    workers: int = 1
    distinct_tol: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "families", tuple(Family(f) for f in self.families))
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
        object.__setattr__(self, "gamma_grid", tuple(float(v) for v in self.gamma_grid))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if Family.SUM_OF_NORMS in self.families and not self.lambda_grid:
            raise ConfigError("lambda_grid must be nonempty")
        if Family.SQUARED_PENALTY in self.families and not self.gamma_grid:
            raise ConfigError("gamma_grid must be nonempty")
        if any(v < 0 for v in self.lambda_grid + self.gamma_grid):
            raise ConfigError("penalty grids must be nonnegative")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.reg_c < 0:
            raise ConfigError("reg_c must be nonnegative")
        if self.workers < 1:
            raise ConfigError("workers must be positive")


@dataclass
class MetricsRow:
    family: Family
    lambda_or_gamma: Optional[float]
    seed: int
    avg_test_accuracy: float
    avg_within_cluster_distance: float
    num_distinct_models: int
    objective: float = float("nan")
    kkt_residual: float = float("nan")
    converged: bool = True
    x: Optional[list] = None

    def sort_key(self):
        value = -np.inf if self.lambda_or_gamma is None else self.lambda_or_gamma
        return FAMILY_ORDER[self.family], value, self.seed

    def as_dict(self):
        return {
            "family": self.family.value,
            "lambda_or_gamma": "" if self.lambda_or_gamma is None else repr(self.lambda_or_gamma),
            "seed": self.seed,
            "avg_test_accuracy": repr(self.avg_test_accuracy),
            "avg_within_cluster_distance": repr(self.avg_within_cluster_distance),
            "num_distinct_models": self.num_distinct_models,
            "objective": repr(self.objective),
            "kkt_residual": repr(self.kkt_residual),
            "converged": self.converged,
        }


@lru_cache(maxsize=8)
def _benchmark(spec, seed):
    return generate(dataclasses.replace(spec, seed=seed))


def family_problem(family, value, losses, benchmark, dim, convention):
    """The federation problem a family trains, for penalty weight ``value``."""
    if family is Family.GLOBAL:
        penalty = GlobalConsensus()
    elif family is Family.LOCAL:
        penalty = LocalOnly()
    elif family is Family.SQUARED_PENALTY:
        penalty = SquaredNorms(value)
    elif family is Family.SUM_OF_NORMS:
        penalty = SumOfNorms(value)
    else:
        penalty = ClusteredSumOfNorms(0.0, benchmark.true_partition)
    return FederationProblem(losses, dim, penalty, convention)


def run_task(task):
    """One (family, value, seed) run; module level so worker processes can import it."""
    family, value, seed, cfg = task
    benchmark = _benchmark(cfg.benchmark, seed)
    losses = hinge_losses(benchmark, cfg.reg_c)
    problem = family_problem(family, value, losses, benchmark, losses[0].dim, cfg.convention)
    result = solve_reference(problem, cfg.oracle)
    X = lift(problem.partition, result.x)
    if not result.converged:
        logger.warning("%s at %s (seed %d) did not converge", family.value, value, seed)
    return MetricsRow(
        family=family,
        lambda_or_gamma=value,
        seed=seed,
        avg_test_accuracy=average_test_accuracy(X, benchmark),
        avg_within_cluster_distance=within_cluster_distance(X, benchmark.true_partition),
        num_distinct_models=count_distinct(X, cfg.distinct_tol),
        objective=result.objective_value,
        kkt_residual=result.kkt_residual,
        converged=result.converged,
        x=X.tolist(),
    )


def experiment_tasks(cfg):
    tasks = []
    for family in cfg.families:
        if family is Family.SUM_OF_NORMS:
            values = cfg.lambda_grid
        elif family is Family.SQUARED_PENALTY:
            values = cfg.gamma_grid
        else:
            values = (None,)
        tasks.extend((family, value, seed, cfg) for value in values for seed in cfg.seeds)
    return tasks


def run_pool(func, tasks, workers):
    """Map ``func`` over ``tasks``; results come back in task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [func(task) for task in tasks]
    with Pool(workers) as pool:
        return list(pool.imap(func, tasks))


def summarize(rows):
    """Medians over seeds per (family, value)."""
    groups = {}
    for row in rows:
        groups.setdefault((row.family, row.lambda_or_gamma), []).append(row)
    summary = []
    for (family, value), members in groups.items():
        summary.append({
            "family": family.value,
            "lambda_or_gamma": "" if value is None else repr(value),
            "runs": len(members),
            "avg_test_accuracy": repr(float(np.median([m.avg_test_accuracy for m in members]))),
            "avg_within_cluster_distance": repr(float(np.median([m.avg_within_cluster_distance for m in members]))),
            "num_distinct_models": repr(float(np.median([m.num_distinct_models for m in members]))),
        })
    return summary


def write_results(rows, cfg, extra_meta=None):
    out = Path(cfg.output_dir)
    (out / "solutions").mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        writer.writerows(row.as_dict() for row in rows)
    with open(out / "summary.csv", "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(summarize(rows))
    for row in rows:
        value = "none" if row.lambda_or_gamma is None else f"{row.lambda_or_gamma:.6e}"
        name = f"{row.family.value}_{value}_seed{row.seed}.json"
        with open(out / "solutions" / name, "w") as handle:
            json.dump({**row.as_dict(), "x": row.x}, handle)
    meta = {
        "schema_version": settings.FUSION["SCHEMA_VERSION"],
        "convention": cfg.convention.label,
        "reg_c": cfg.reg_c,
        "seeds": list(cfg.seeds),
        "families": [f.value for f in cfg.families],
        "lambda_grid": list(cfg.lambda_grid),
        "gamma_grid": list(cfg.gamma_grid),
        "distinct_tol": cfg.distinct_tol,
        **(extra_meta or {}),
    }
    with open(out / "meta.json", "w") as handle:
        json.dump(meta, handle, indent=2, sort_keys=True)
    logger.info("wrote %d rows to %s", len(rows), out)


def run_experiment(cfg=None):
    """
    Train every family on every grid point and seed, score it and (when
    ``output_dir`` is set) write metrics.csv, summary.csv, solutions/ and meta.json.
    Rows are sorted by family, grid value and seed.
    """
    cfg = cfg or ExperimentConfig()
    tasks = experiment_tasks(cfg)
    started = time.perf_counter()
    logger.info("running %d tasks on %d worker(s)", len(tasks), cfg.workers)
    rows = sorted(run_pool(run_task, tasks, cfg.workers), key=MetricsRow.sort_key)
    logger.info("experiment finished in %.1fs", time.perf_counter() - started)
    if cfg.output_dir:
        write_results(rows, cfg)
    return rows


@dataclass
class GapTrace:
    f_star: float
    trace: list
    ledger: object

    @property
    def gaps(self):
        return [record.objective - self.f_star for record in self.trace]


def pdmm_gap_experiment(problem, pdmm_cfg=None, oracle_cfg=None, out=None):
    """
    Run the protocol and report F(x_t) - F* with F* from the reference oracle;
    writes the trace CSV when ``out`` is given.
    """
    reference = solve_reference(problem, oracle_cfg)
    if not reference.converged:
        logger.warning("reference solve did not converge; gaps are relative to its best value")
    run = pdmm_run(problem, pdmm_cfg or PdmmConfig())
    if out is not None:
        write_trace_csv(out, run.trace, reference.objective_value)
    return GapTrace(reference.objective_value, run.trace, run.ledger)


def benchmark_problem(spec=None, reg_c=1e-3, lam=0.1, convention=Convention()):
    """Sum-of-norms problem on the squared hinge losses of a generated benchmark."""
    benchmark = generate(spec or default_benchmark_spec())
    losses = hinge_losses(benchmark, reg_c)
    return FederationProblem(losses, losses[0].dim, SumOfNorms(lam), convention), benchmark


@dataclass
class RecoveryWindow:
    path: object
    planted_segments: list
    conservative: tuple
    intersects: bool

    def as_dict(self):
        lo, hi, approximate = self.conservative
        return {
            "conservative_lower": lo,
            "conservative_upper": hi if np.isfinite(hi) else None,
            "approximate": approximate,
            "planted_segments": [[s[0].lam, s[-1].lam] for s in self.planted_segments],
            "intersects": self.intersects,
            "cluster_counts": self.path.cluster_counts,
            "lambdas": self.path.lambdas,
        }


def recovery_window_experiment(spec=None, path_cfg=None, convention=Convention(), n_samples=None, seed=0):
    """
    Solution path on centroid surrogate losses, checked against the planted partition
    and the conservative recovery interval computed on that partition.
    """
    benchmark = generate(spec or separated_benchmark_spec())
    losses = centroid_surrogates(benchmark)
    problem = FederationProblem(losses, losses[0].dim, SumOfNorms(1.0), convention)
    planted = benchmark.true_partition
    path = solution_path(problem, path_cfg or PathConfig(growth_c=1.5))

    target = planted.canonical()
    segments = [
        run for run in path.segments_with(planted.K)
        if all(entry.partition.canonical() == target for entry in run)
    ]
    sampler = sample_sublevel_set(problem, planted, n_samples=n_samples, seed=seed)
    lo, hi, approximate = conservative_bounds(problem, planted, sampler)
    intersects = any(run[0].lam <= hi and run[-1].lam >= lo for run in segments) and lo < hi
    logger.info(
        "recovery window: conservative [%.6g, %.6g), %d planted segment(s), intersects=%s",
        lo, hi, len(segments), intersects,
    )
    return RecoveryWindow(path, segments, (lo, hi, approximate), intersects)
