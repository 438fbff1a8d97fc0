"""
Executable recovery certificates.

All thresholds are reported in lambda units of the problem's convention: the
classical constants (written for sum-normalized losses and unordered pairs) are
multiplied by ``Convention.recovery_scale``.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from django.conf import settings
from scipy.optimize import minimize
from scipy.spatial.distance import cdist, pdist

from clustering.partitions import extract_partition
from fusionproject.exceptions import ConfigError, EmptySampleError
from losses.specs import AveragedLoss, Quadratic, StackedLosses
from oracle.solvers import OracleConfig, solve_reference
from problem.formulation import Convention, GlobalConsensus, clustered_reduction

logger = logging.getLogger(__name__)

GAP_CHUNK = 1024


@dataclass
class HeterogeneityProfile:
    """
    Within-cluster gradient-gap bounds eps[k] and cross-cluster bounds delta[k, l].

    ``exact`` is True only when the gaps are constant in x (quadratics with a
    common scale); otherwise eps is a lower bound of the sup and delta an upper
    bound of the inf, both taken over probe points.
    """
    eps: np.ndarray
    delta: np.ndarray
    exact: bool
    partition: object

    def as_dict(self):
        return {
            "eps": self.eps.tolist(),
            "delta": np.where(np.isfinite(self.delta), self.delta, -1.0).tolist(),
            "exact": self.exact,
            "partition": [list(b) for b in self.partition.blocks],
        }


@dataclass
class SublevelBox:
    """Points of {W : G(W) <= upper_value}, G the clustered loss term."""
    upper_value: float
    sample_points: np.ndarray
    sampler_seed: int
    radii: np.ndarray = None
    approximate: bool = True

    def __len__(self):
        return 0 if self.sample_points is None else int(self.sample_points.shape[0])


@dataclass
class SeparationCheck:
    within_ok: np.ndarray
    across_ok: np.ndarray
    within_margin: np.ndarray
    across_margin: np.ndarray
    mu: float
    lipschitz: float

    @property
    def ok(self):
        return bool(self.within_ok.all() and self.across_ok.all())

    @property
    def min_within_margin(self):
        values = self.within_margin[np.isfinite(self.within_margin)]
        return float(values.min()) if values.size else np.inf

    @property
    def min_across_margin(self):
        values = self.across_margin[np.isfinite(self.across_margin)]
        return float(values.min()) if values.size else np.inf


@dataclass
class RecoveryCertificate:
    partition: object
    lam: float
    lower_threshold: float
    upper_threshold: float
    clustered_solution: np.ndarray
    satisfied_lower: bool
    satisfied_upper: bool
    convention: Convention
    scale: float = 1.0
    converged: bool = True
    conservative_lower: Optional[float] = None
    conservative_upper: Optional[float] = None
    conservative_approximate: Optional[bool] = None
    sampler: dict = field(default_factory=dict)

    @property
    def recovered(self):
        return self.satisfied_lower and self.satisfied_upper

    def as_dict(self):
        def finite(v):
            return None if v is None or not np.isfinite(v) else float(v)

        return {
            "partition": [list(b) for b in self.partition.blocks],
            "K": self.partition.K,
            "lambda": self.lam,
            "lower_threshold": finite(self.lower_threshold),
            "upper_threshold": finite(self.upper_threshold),
            "lower_margin": finite(self.lam - self.lower_threshold),
            "upper_margin": finite(self.upper_threshold - self.lam),
            "satisfied_lower": self.satisfied_lower,
            "satisfied_upper": self.satisfied_upper,
            "recovered": self.recovered,
            "convention": self.convention.label,
            "scale": self.scale,
            "converged": self.converged,
            "clustered_solution": np.asarray(self.clustered_solution).tolist(),
            "conservative_lower": finite(self.conservative_lower),
            "conservative_upper": finite(self.conservative_upper),
            "conservative_approximate": self.conservative_approximate,
            "sampler": self.sampler,
        }


def _distinctness_denominator(partition):
    # 2 max_k sum_{l != k} n_l
    return 2.0 * (partition.n_users - float(partition.sizes.min()))


def _gradient_gaps(problem, partition, W):
    """
    Per sample: max_k max_{i,j in C_k} ||grad f_i(w_k) - grad f_j(w_k)|| / n_k and
    min_{k != l} ||grad g_k(w_k) - grad g_l(w_k)||.
    """
    partition.check(problem.n_users)
    W = np.asarray(W, dtype=float)
    if W.ndim == 2:
        W = W[None]
    if W.shape[1:] != (partition.K, problem.dim_d):
        raise ConfigError(f"expected stacks of shape ({partition.K}, {problem.dim_d}), got {W.shape[1:]}")

    n = problem.n_users
    everyone = StackedLosses(problem.losses, np.zeros(n, dtype=int), 1)
    sizes = partition.sizes
    averaging = np.zeros((partition.K, n))
    averaging[partition.labels(), np.arange(n)] = 1.0
    averaging /= sizes[:, None]

    within = np.zeros(W.shape[0])
    across = np.full(W.shape[0], np.inf)
    for start in range(0, W.shape[0], GAP_CHUNK):
        chunk = slice(start, start + GAP_CHUNK)
        for k, block in enumerate(partition.blocks):
            grads = everyone.member_grads(W[chunk, k:k + 1, :])
            if len(block) > 1:
                members = grads[:, list(block), :]
                diff = members[:, :, None, :] - members[:, None, :, :]
                widest = np.linalg.norm(diff, axis=-1).max(axis=(1, 2)) / sizes[k]
                within[chunk] = np.maximum(within[chunk], widest)
            if partition.K > 1:
                cluster_grads = np.einsum("kn,snd->skd", averaging, grads)
                gaps = np.linalg.norm(cluster_grads - cluster_grads[:, k:k + 1, :], axis=-1)
                gaps[:, k] = np.inf
                across[chunk] = np.minimum(across[chunk], gaps.min(axis=1))
    return within, across


def theorem1_threshold(problem, partition, clustered_solution):
    """
    Smallest lambda at which the lifted clustered solution solves the full problem:

        max_k max_{i,j in C_k} ||grad f_i(w_k) - grad f_j(w_k)|| / n_k
    """
    within, _ = _gradient_gaps(problem, partition, clustered_solution)
    return problem.convention.recovery_scale(problem.n_users) * float(within[0])


def theorem2_threshold(problem, partition, clustered_solution):
    """
    Lambda below which the clustered models stay mutually distinct:

        min_{k != l} ||grad g_k(w_k) - grad g_l(w_k)|| / (2 max_k sum_{l != k} n_l)

    Infinite for a single cluster.
    """
    if partition.K == 1:
        return np.inf
    _, across = _gradient_gaps(problem, partition, clustered_solution)
    scale = problem.convention.recovery_scale(problem.n_users)
    return scale * float(across[0]) / _distinctness_denominator(partition)


def _common_quadratic_scale(losses):
    if not all(isinstance(loss, Quadratic) for loss in losses):
        return None
    scales = {loss.scale for loss in losses}
    return scales.pop() if len(scales) == 1 else None


def assumption3_profile(problem, partition, probe_points=None):
    partition.check(problem.n_users)
    K = partition.K
    scale = _common_quadratic_scale(problem.losses)
    if scale is not None:
        anchors = np.array([loss.anchor for loss in problem.losses])
        eps = np.zeros(K)
        delta = np.full((K, K), np.inf)
        for k, block in enumerate(partition.blocks):
            if len(block) > 1:
                eps[k] = scale * pdist(anchors[list(block)]).max()
            for l in range(k + 1, K):
                gap = scale * cdist(anchors[list(block)], anchors[list(partition.blocks[l])]).min()
                delta[k, l] = delta[l, k] = gap
        np.fill_diagonal(delta, 0.0)
        return HeterogeneityProfile(eps, delta, True, partition)

    if probe_points is None or len(probe_points) == 0:
        raise ConfigError("probe points are required for non-quadratic losses")
    probes = np.asarray(probe_points, dtype=float).reshape(-1, problem.dim_d)
    grads = StackedLosses(problem.losses, np.zeros(problem.n_users, dtype=int), 1).member_grads(probes[:, None, :])
    eps = np.zeros(K)
    delta = np.full((K, K), np.inf)
    for k, block in enumerate(partition.blocks):
        members = grads[:, list(block), :]
        if len(block) > 1:
            diff = members[:, :, None, :] - members[:, None, :, :]
            eps[k] = np.linalg.norm(diff, axis=-1).max()
        for l in range(k + 1, K):
            others = grads[:, list(partition.blocks[l]), :]
            gap = np.linalg.norm(members[:, :, None, :] - others[:, None, :, :], axis=-1).min()
            delta[k, l] = delta[l, k] = gap
    np.fill_diagonal(delta, 0.0)
    return HeterogeneityProfile(eps, delta, False, partition)


def theorem3_interval(profile, partition, scale=1.0):
    """
    [max_k eps_k / n_k, min_{k != l} (delta_kl - eps_k - eps_l) / (2 max_k sum_{l != k} n_l)]
    or None when empty.
    """
    sizes = partition.sizes
    lo = scale * float(np.max(profile.eps / sizes))
    if partition.K == 1:
        return lo, np.inf
    K = partition.K
    slack = profile.delta - profile.eps[:, None] - profile.eps[None, :]
    slack = slack[~np.eye(K, dtype=bool)].min()
    hi = scale * float(slack) / _distinctness_denominator(partition)
    if hi <= 0 or lo > hi:
        logger.warning("recovery interval is empty: [%.6g, %.6g]", lo, hi)
        return None
    return lo, hi


def theorem4_separation(profile, losses, local_optima):
    """
    Checks ||x_i - x_j|| <= eps_k / mu inside clusters and ||x_i - x_j|| >= delta_kl / L
    across clusters at the unpenalized minimizers.
    """
    mus = [loss.strong_mu for loss in losses]
    if any(mu is None for mu in mus) or not all(loss.strong_mu_is_global for loss in losses):
        raise ConfigError("every loss needs a global strong convexity modulus")
    mu = float(min(mus))
    lipschitz = float(max(loss.lipschitz_L for loss in losses))
    optima = np.asarray(local_optima, dtype=float).reshape(len(losses), -1)
    labels = profile.partition.labels()

    dist = cdist(optima, optima)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    cross = labels[:, None] != labels[None, :]
    within_bound = profile.eps[labels][:, None] / mu
    across_bound = profile.delta[labels[:, None], labels[None, :]] / lipschitz

    within_margin = np.where(same, within_bound - dist, np.nan)
    across_margin = np.where(cross, dist - across_bound, np.nan)
    return SeparationCheck(
        within_ok=np.where(same, within_margin >= 0, True),
        across_ok=np.where(cross, across_margin >= 0, True),
        within_margin=within_margin,
        across_margin=across_margin,
        mu=mu,
        lipschitz=lipschitz,
    )


def clustered_loss_value(problem, partition, W):
    """G(W) = alpha * sum_k n_k g_k(w_k), batched over leading axes."""
    stacked = StackedLosses(problem.losses, partition.labels(), partition.K)
    return problem.loss_factor * stacked.value(W)


def global_optimal_value(problem, cfg=None):
    """alpha * sum_i f_i(y*) at the consensus minimizer y*."""
    result = solve_reference(problem.with_penalty(GlobalConsensus()), cfg)
    return result.objective_value


def _minimize_cluster(cluster):
    form = cluster.quadratic_form()
    if form is not None:
        return np.array(form[1])
    res = minimize(
        lambda v: (cluster.value(v), cluster.grad(v)), cluster.minimizer_hint(),
        jac=True, method="L-BFGS-B", options={"gtol": 1e-12, "maxiter": 5000},
    )
    return res.x


def _bisect_radius(level, center, direction, budget):
    lo, hi = 0.0, 1.0
    for _ in range(200):
        if level(center + hi * direction) > budget:
            break
        lo, hi = hi, 2.0 * hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if level(center + mid * direction) > budget:
            hi = mid
        else:
            lo = mid
    return hi


def sample_sublevel_set(problem, partition, n_samples=None, seed=0, upper_value=None,
                        batch_size=None, anchors=(), max_batches=500, n_directions=32):
    """
    Rejection sampling of {W : G(W) <= upper_value}.

    Each block k is drawn uniformly from a ball around the minimizer of g_k whose
    radius bounds the block's own sublevel set given that the other blocks sit at
    their minimizers. Quadratic radii are exact; others come from radial bisection
    along coordinate and random directions, inflated by 25%. ``anchors`` (for
    instance the clustered solution) are kept when they belong to the set.
    """
    defaults = settings.FUSION["SUBLEVEL"]
    n_samples = n_samples or defaults["n_samples"]
    batch_size = batch_size or defaults["batch_size"]
    partition.check(problem.n_users)
    alpha = problem.loss_factor
    K, d = partition.K, problem.dim_d

    if upper_value is None:
        upper_value = global_optimal_value(problem)

    clusters = [AveragedLoss(tuple(problem.losses[i] for i in block)) for block in partition.blocks]
    centers = np.array([_minimize_cluster(c) for c in clusters])
    sizes = partition.sizes
    floor = np.array([alpha * n * c.value(w) for n, c, w in zip(sizes, clusters, centers)])
    budgets = upper_value - (floor.sum() - floor)
    if np.any(budgets < floor - 1e-12):
        raise EmptySampleError(f"upper value {upper_value:.6g} lies below min G = {floor.sum():.6g}")

    rng = np.random.default_rng(seed)
    radii = np.zeros(K)
    exact = True
    for k, cluster in enumerate(clusters):
        form = cluster.quadratic_form()
        if form is not None:
            s_bar, _ = form
            excess = budgets[k] / (alpha * sizes[k]) - cluster.value(centers[k])
            radii[k] = np.sqrt(max(2.0 * excess / s_bar, 0.0))
            continue
        exact = False

        def level(v, cluster=cluster, n_k=sizes[k]):
            return alpha * n_k * cluster.value(v)

        directions = np.vstack([np.eye(d), -np.eye(d), rng.standard_normal((n_directions, d))])
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        radii[k] = 1.25 * max(_bisect_radius(level, centers[k], u, budgets[k]) for u in directions)

    accepted = []
    kept_anchors = []
    for anchor in anchors:
        W = np.asarray(anchor, dtype=float).reshape(K, d)
        if clustered_loss_value(problem, partition, W) <= upper_value + 1e-9:
            kept_anchors.append(W)

    count = 0
    batches = 0
    while count < n_samples and batches < max_batches:
        batches += 1
        direction = rng.standard_normal((batch_size, K, d))
        direction /= np.maximum(np.linalg.norm(direction, axis=-1, keepdims=True), 1e-300)
        length = radii[None, :, None] * rng.random((batch_size, K, 1)) ** (1.0 / d)
        W = centers[None] + length * direction
        keep = clustered_loss_value(problem, partition, W) <= upper_value
        accepted.append(W[keep])
        count += int(keep.sum())

    points = np.concatenate(accepted)[:n_samples] if accepted else np.zeros((0, K, d))
    if count < n_samples:
        logger.warning("sublevel sampler accepted %d of %d requested points", count, n_samples)
    if kept_anchors:
        points = np.concatenate([np.array(kept_anchors), points])
    if points.shape[0] == 0:
        raise EmptySampleError("no sample point satisfied the sublevel constraint")
    logger.debug("sublevel sampler: %d points after %d batches, radii %s", points.shape[0], batches, radii)
    return SublevelBox(upper_value, points, seed, radii, approximate=not exact)


def conservative_bounds(problem, partition, sampler):
    """
    (lower, upper, approximate): the largest lower threshold and the smallest upper
    threshold over the sampler's points. Gradient gaps are constant for quadratics
    with a common scale, which makes the bounds exact.
    """
    if sampler is None or len(sampler) == 0:
        raise EmptySampleError("the sampler holds no points")
    within, across = _gradient_gaps(problem, partition, sampler.sample_points)
    scale = problem.convention.recovery_scale(problem.n_users)
    lower = scale * float(within.max())
    upper = np.inf if partition.K == 1 else scale * float(across.min()) / _distinctness_denominator(partition)
    approximate = _common_quadratic_scale(problem.losses) is None
    if lower >= upper:
        logger.warning("conservative recovery interval is empty: [%.6g, %.6g)", lower, upper)
    return lower, upper, approximate


def aposteriori_recovery_check(problem, solution, tol_tie=None, oracle_cfg=None, sampler=None):
    """
    Fix the partition induced by ``solution``, re-solve the clustered problem on it,
    and evaluate both thresholds at the clustered solution.
    """
    X = problem.check_stack(solution)
    partition = extract_partition(X, tol_tie)
    reduced = clustered_reduction(problem, partition)
    labels = partition.labels()
    start = np.array([X[labels == k].mean(axis=0) for k in range(partition.K)])
    result = solve_reference(reduced, oracle_cfg or OracleConfig(), initial=start)
    W = result.x

    lam = problem.penalty.lam
    lower = theorem1_threshold(problem, partition, W)
    upper = theorem2_threshold(problem, partition, W)
    certificate = RecoveryCertificate(
        partition=partition,
        lam=lam,
        lower_threshold=lower,
        upper_threshold=upper,
        clustered_solution=W,
        satisfied_lower=bool(lam >= lower),
        satisfied_upper=bool(lam < upper),
        convention=problem.convention,
        scale=problem.convention.recovery_scale(problem.n_users),
        converged=result.converged,
    )
    if sampler is not None:
        lo, hi, approximate = conservative_bounds(problem, partition, sampler)
        certificate.conservative_lower = lo
        certificate.conservative_upper = hi
        certificate.conservative_approximate = approximate
        certificate.sampler = {
            "n_points": len(sampler),
            "seed": sampler.sampler_seed,
            "upper_value": sampler.upper_value,
            "approximate": sampler.approximate,
        }
    logger.info(
        "certificate: K=%d lambda=%.6g lower=%.6g upper=%.6g recovered=%s",
        partition.K, lam, lower, upper, certificate.recovered,
    )
    return certificate
