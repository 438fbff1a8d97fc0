"""
In-process simulation of the randomized PDMM server-users protocol.

Each iteration t:

    S1   the server draws S_P (primal indices) and S_D (dual pairs)
    S2   users owning a selected x_i update it
    S3   users owning a selected z_ij update it
    S4   everything else carries over
    S5-6 users upload their fresh variables
    S7   the server broadcasts the uploaded entries to all users
    S8-9 the server updates the selected duals mu_ij, others carry over
    S10  the server sends mu_ij to user i
    S11  user i applies the backward step to obtain mu_hat_ij

All S2/S3 updates read the iteration-start snapshot. The server only knows what it
has been sent; users only know their own variables and the broadcasts.
"""
import enum
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from fusionproject.exceptions import ConfigError
from oracle.smooth import accelerated_gradient, block_soft_threshold
from problem.formulation import SumOfNorms, objective, tie_components

logger = logging.getLogger(__name__)


class XSurrogate(enum.Enum):
    PAIRED = "paired"
    OWN_PAIRS = "own_pairs"


@dataclass(frozen=True)
class Zeros:
    kind = "zeros"


@dataclass(frozen=True)
class CommonPoint:
    point: tuple
    kind = "common_point"


@dataclass(frozen=True)
class ZFreeze:
    window: int
    tol: float

    def __post_init__(self):
        if self.window < 1 or not self.tol > 0:
            raise ConfigError("z_freeze needs a positive window and tolerance")


@dataclass(frozen=True)
class PdmmConfig:
    """
    Protocol parameters.

    ``s_p``/``s_d`` default to ``activation`` times the size of their universes.
    ``x_surrogate`` selects the x-update: ``paired`` minimizes the augmented
    Lagrangian exactly in x_i, ``own_pairs`` keeps only the pairs (i, j).
    ``paired`` needs the reverse-pair terms of user i, which the server forwards
    as ``AggregateMessage``s; those are counted in ``aggregate_msgs``, outside
    the uplink/downlink totals.
    """
    rho: float = 10.0
    eta_x: float = 10.0
    eta_z: float = 10.0
    tau: float = 0.8
    nu: float = 0.2
    s_p: Optional[int] = None
    s_d: Optional[int] = None
    max_iters: int = 1000
    inner_tol: float = 1e-10
    inner_max_iters: int = 200
    seed: int = 0
    init: object = Zeros()
    z_freeze: Optional[ZFreeze] = None
    x_surrogate: XSurrogate = XSurrogate.PAIRED
    activation: float = 0.4
    trace_tie_tol: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "x_surrogate", XSurrogate(self.x_surrogate))
        if not self.rho > 0:
            raise ConfigError("rho must be positive")
        if self.eta_x < 0 or self.eta_z < 0:
            raise ConfigError("eta_x and eta_z must be nonnegative")
        if not self.tau > 0 or self.nu < 0:
            raise ConfigError("tau must be positive and nu nonnegative")
        if self.max_iters < 0 or self.inner_max_iters < 1 or not self.inner_tol > 0:
            raise ConfigError("invalid iteration settings")
        if not 0 < self.activation <= 1:
            raise ConfigError("activation must lie in (0, 1]")

    def subset_sizes(self, n_users):
        """(s_p, s_d) for N users, validated against their universes."""
        n_primal, n_dual = n_users * n_users, n_users * (n_users - 1)
        s_p = self.s_p if self.s_p is not None else max(1, round(self.activation * n_primal))
        s_d = self.s_d if self.s_d is not None else max(1, round(self.activation * n_dual))
        if not 1 <= s_p <= n_primal:
            raise ConfigError(f"s_p must lie in [1, {n_primal}]")
        if not 1 <= s_d <= n_dual:
            raise ConfigError(f"s_d must lie in [1, {n_dual}]")
        return int(s_p), int(s_d)


class IndexSets:
    """
    Universes of the random subsets.

    Primal index i < N is x_i; index N + l is z of the l-th ordered pair in
    lexicographic order (z_01, z_02, ..., z_10, z_12, ...). Dual index l is the
    l-th ordered pair.
    """

    def __init__(self, n_users):
        self.n_users = n_users
        self.pairs = [(i, j) for i in range(n_users) for j in range(n_users) if i != j]
        self.pair_index = {pair: l for l, pair in enumerate(self.pairs)}

    @property
    def primal_size(self):
        return self.n_users * self.n_users

    @property
    def dual_size(self):
        return len(self.pairs)

    def primal_entry(self, index):
        if index < self.n_users:
            return "x", int(index)
        return "z", self.pairs[index - self.n_users]

    def primal_index_of_pair(self, pair):
        return self.n_users + self.pair_index[pair]


def draw_subsets(seed, t, index_sets, s_p, s_d):
    """S_P and S_D of iteration t from a counter-based generator keyed by (seed, t)."""
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, t], dtype=np.uint64)))
    primal = np.sort(rng.choice(index_sets.primal_size, size=s_p, replace=False))
    dual = np.sort(rng.choice(index_sets.dual_size, size=s_d, replace=False))
    return primal, dual


# messages: one message carries one d-vector unless stated otherwise

@dataclass(frozen=True)
class PrimalUpload:
    sender: int
    index: int
    value: np.ndarray


@dataclass(frozen=True)
class Broadcast:
    entries: tuple

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class DualDownload:
    recipient: int
    pair: tuple
    value: np.ndarray


@dataclass(frozen=True)
class AggregateMessage:
    """Reverse-pair sums sum_j z_ji and sum_j mu_hat_ji; two d-vectors."""
    recipient: int
    z_in: np.ndarray
    mu_hat_in: np.ndarray


@dataclass
class CommLedger:
    uplink_msgs: int = 0
    downlink_msgs: int = 0
    uplink_floats: int = 0
    downlink_floats: int = 0
    aggregate_msgs: int = 0
    aggregate_floats: int = 0
    freeze_skips: int = 0
    per_iteration: list = field(default_factory=list)

    def record(self, t, up, down, dim):
        self.uplink_msgs += up
        self.downlink_msgs += down
        self.uplink_floats += up * dim
        self.downlink_floats += down * dim
        self.per_iteration.append((t, up, down))

    def as_dict(self):
        return {
            "uplink_msgs": self.uplink_msgs,
            "downlink_msgs": self.downlink_msgs,
            "uplink_floats": self.uplink_floats,
            "downlink_floats": self.downlink_floats,
            "aggregate_msgs": self.aggregate_msgs,
            "aggregate_floats": self.aggregate_floats,
            "freeze_skips": self.freeze_skips,
        }


@dataclass
class PdmmState:
    """
    All protocol variables. Arrays are indexed [i, j] over ordered pairs; the
    diagonal is unused and stays zero. Row i of x, z and mu_hat belongs to user i,
    mu belongs to the server.
    """
    x: np.ndarray
    z: np.ndarray
    mu: np.ndarray
    mu_hat: np.ndarray
    t: int = 0
    frozen: set = field(default_factory=set)
    freeze_counts: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, n_users, dim, init=Zeros(), initial_x=None):
        if initial_x is not None:
            x = np.array(initial_x, dtype=float).reshape(n_users, dim)
        elif isinstance(init, CommonPoint):
            point = np.asarray(init.point, dtype=float).reshape(dim)
            x = np.tile(point, (n_users, 1))
        else:
            x = np.zeros((n_users, dim))
        pairs = np.zeros((n_users, n_users, dim))
        return cls(x=x, z=pairs.copy(), mu=pairs.copy(), mu_hat=pairs.copy())

    def copy(self):
        return PdmmState(
            self.x.copy(), self.z.copy(), self.mu.copy(), self.mu_hat.copy(),
            self.t, set(self.frozen), dict(self.freeze_counts),
        )

    @property
    def pairs(self):
        n = self.x.shape[0]
        return [(i, j) for i in range(n) for j in range(n) if i != j]


class TraceRecord(NamedTuple):
    t: int
    objective: float
    uplink_msgs_cum: int
    downlink_msgs_cum: int
    num_distinct_models: int
    warnings: tuple


class PdmmRun(NamedTuple):
    state: PdmmState
    ledger: CommLedger
    trace: list


def effective_lambda(problem):
    """Per-pair threshold weight once the loss factor is divided out."""
    return problem.penalty.lam * problem.convention.pair_factor / problem.loss_factor


def x_update(problem, i, state, cfg, view_x=None, incoming=None):
    """
    Minimizer of user i's x surrogate with Bregman term eta_x/2 ||x - x_i^t||^2.

    Args:
        view_x: user i's copy of all models (defaults to ``state.x``).
        incoming: (sum_j z_ji, sum_j mu_hat_ji) for the paired surrogate; read from
            ``state`` when omitted.

    Returns:
        (ndarray, bool): the new x_i and whether the inner solver converged.
    """
    view_x = state.x if view_x is None else view_x
    n = view_x.shape[0]
    rho, eta = cfg.rho, cfg.eta_x
    x_now = state.x[i]
    peers = [j for j in range(n) if j != i]

    own_sum = np.zeros_like(x_now)
    for j in peers:
        own_sum += x_now if (i, j) in state.frozen else view_x[j]
    z_out = state.z[i].sum(axis=0)
    mu_out = state.mu_hat[i].sum(axis=0)

    if cfg.x_surrogate is XSurrogate.PAIRED:
        if incoming is None:
            incoming = (state.z[:, i].sum(axis=0), state.mu_hat[:, i].sum(axis=0))
        z_in, mu_in = incoming
        peer_sum = view_x[peers].sum(axis=0) if peers else np.zeros_like(x_now)
        kappa = 2.0 * rho * (n - 1) + eta
        target = rho * (own_sum + peer_sum + z_out - z_in) + eta * x_now
        linear = mu_out - mu_in
    else:
        kappa = rho * (n - 1) + eta
        target = rho * (own_sum + z_out) + eta * x_now
        linear = mu_out

    loss = problem.losses[i]
    form = loss.quadratic_form()
    if form is not None:
        scale, center = form
        return (scale * center + target - linear) / (scale + kappa), True
    if kappa == 0:
        raise ConfigError("a non-quadratic x-update needs rho (N - 1) + eta_x > 0")

    def grad(v):
        return loss.grad(v) + linear + kappa * v - target

    run = accelerated_gradient(grad, x_now, loss.lipschitz_L + kappa, cfg.inner_tol, cfg.inner_max_iters)
    return run.x, run.converged


def z_update(problem, pair, state, cfg, view_x=None):
    """
    Block soft-thresholding step for z_ij:

        BST((rho (x_i - x_j) + mu_hat_ij + eta_z z_ij) / (rho + eta_z), lambda_eff / (rho + eta_z))
    """
    view_x = state.x if view_x is None else view_x
    i, j = pair
    denom = cfg.rho + cfg.eta_z
    v = (cfg.rho * (view_x[i] - view_x[j]) + state.mu_hat[i, j] + cfg.eta_z * state.z[i, j]) / denom
    return block_soft_threshold(v, effective_lambda(problem) / denom)


def dual_step(mu, residual, cfg):
    """(mu^{t+1}, mu_hat^{t+1}) for one pair: damped ascent then the backward step."""
    mu_next = mu + cfg.tau * cfg.rho * residual
    return mu_next, mu_next - cfg.nu * cfg.rho * residual


def dual_updates(selected, state, cfg):
    """Update mu and mu_hat of the selected ordered pairs in place; others carry over."""
    for i, j in selected:
        residual = state.x[i] - state.x[j] - state.z[i, j]
        state.mu[i, j], state.mu_hat[i, j] = dual_step(state.mu[i, j], residual, cfg)
    return state


def maybe_freeze(pair, state, cfg):
    """
    Count consecutive selected updates with ||z_ij|| <= tol; freeze the pair once
    the count reaches the window. Frozen pairs stay frozen until the run restarts.
    """
    if cfg.z_freeze is None or pair in state.frozen:
        return state
    if np.linalg.norm(state.z[pair]) <= cfg.z_freeze.tol:
        state.freeze_counts[pair] = state.freeze_counts.get(pair, 0) + 1
    else:
        state.freeze_counts[pair] = 0
    if state.freeze_counts[pair] >= cfg.z_freeze.window:
        state.frozen.add(pair)
        logger.info("pair %s frozen at iteration %d", pair, state.t)
    return state


class Phase(enum.Enum):
    IDLE = "idle"
    SELECTED = "selected"
    UPDATED = "updated"
    UPLOADED = "uploaded"
    SYNCED = "synced"


class _Agent:
    phase = Phase.IDLE

    def _move(self, expected, new):
        if self.phase not in expected:
            raise RuntimeError(f"{self!r}: cannot move to {new.value} from {self.phase.value}")
        self.phase = new


class UserAgent(_Agent):
    """User i: owns x_i, the z_ij row and the mu_hat_ij row."""

    def __init__(self, index, problem, state, cfg):
        self.index = index
        self.problem = problem
        self.state = state
        self.cfg = cfg
        self.view_x = state.x.copy()
        self.pending = {}
        self.warnings = []

    def __repr__(self):
        return f"UserAgent({self.index})"

    def compute(self, update_x, z_pairs, aggregate, ledger):
        """S2/S3 from the iteration-start snapshot; results stay pending until commit."""
        self._move({Phase.IDLE}, Phase.UPDATED)
        self.pending = {}
        self.warnings = []
        if update_x:
            incoming = (aggregate.z_in, aggregate.mu_hat_in) if aggregate is not None else None
            value, ok = x_update(self.problem, self.index, self.state, self.cfg, self.view_x, incoming)
            if not ok:
                self.warnings.append(f"x_{self.index}: inner solver stopped at {self.cfg.inner_max_iters} iterations")
            self.pending["x"] = value
        for pair in z_pairs:
            if pair in self.state.frozen:
                ledger.freeze_skips += 1
                continue
            self.pending[pair] = z_update(self.problem, pair, self.state, self.cfg, self.view_x)

    def commit_and_upload(self, index_sets):
        """S4-S6: write pending values and emit one upload per fresh variable."""
        self._move({Phase.UPDATED}, Phase.UPLOADED)
        uploads = []
        for key, value in self.pending.items():
            if key == "x":
                self.state.x[self.index] = value
                self.view_x[self.index] = value
                uploads.append(PrimalUpload(self.index, self.index, value))
            else:
                self.state.z[key] = value
                maybe_freeze(key, self.state, self.cfg)
                uploads.append(PrimalUpload(self.index, index_sets.primal_index_of_pair(key), value))
        return uploads

    def receive_broadcast(self, broadcast, index_sets):
        self._move({Phase.UPLOADED}, Phase.SYNCED)
        for index, value in broadcast.entries:
            kind, who = index_sets.primal_entry(index)
            if kind == "x":
                self.view_x[who] = value

    def receive_dual(self, message):
        """S11: mu_hat_ij = mu_ij^{t+1} - nu rho (x_i - x_j - z_ij)."""
        i, j = message.pair
        residual = self.view_x[i] - self.view_x[j] - self.state.z[i, j]
        self.state.mu_hat[i, j] = message.value - self.cfg.nu * self.cfg.rho * residual

    def end_iteration(self):
        self._move({Phase.SYNCED}, Phase.IDLE)


class ServerAgent(_Agent):
    """Owns mu; mirrors x, z and mu_hat from what users send."""

    def __init__(self, problem, state, cfg, index_sets, s_p, s_d):
        self.state = state
        self.cfg = cfg
        self.index_sets = index_sets
        self.s_p, self.s_d = s_p, s_d
        self.known_x = state.x.copy()
        self.known_z = state.z.copy()
        self.known_mu_hat = state.mu_hat.copy()
        self.uploads = []
        self.dual_pairs = []

    def __repr__(self):
        return "ServerAgent"

    def select(self, t):
        """S1: returns x-selected users and, per user, the selected z pairs."""
        self._move({Phase.IDLE}, Phase.SELECTED)
        primal, dual = draw_subsets(self.cfg.seed, t, self.index_sets, self.s_p, self.s_d)
        self.dual_pairs = [self.index_sets.pairs[l] for l in dual]
        x_users, z_pairs = set(), {}
        for index in primal:
            kind, who = self.index_sets.primal_entry(int(index))
            if kind == "x":
                x_users.add(who)
            else:
                z_pairs.setdefault(who[0], []).append(who)
        return x_users, z_pairs

    def aggregate_for(self, i):
        return AggregateMessage(i, self.known_z[:, i].sum(axis=0), self.known_mu_hat[:, i].sum(axis=0))

    def collect(self, uploads):
        self._move({Phase.SELECTED}, Phase.UPDATED)
        self.uploads = uploads
        for message in uploads:
            kind, who = self.index_sets.primal_entry(message.index)
            if kind == "x":
                self.known_x[who] = message.value
            else:
                self.known_z[who] = message.value

    def broadcast(self):
        """S7: every uploaded entry, delivered to all users."""
        self._move({Phase.UPDATED}, Phase.UPLOADED)
        return Broadcast(tuple((m.index, m.value) for m in self.uploads))

    def update_duals(self):
        """S8-S10: damped ascent on the selected pairs and one downlink per pair."""
        self._move({Phase.UPLOADED}, Phase.SYNCED)
        messages = []
        for i, j in self.dual_pairs:
            residual = self.known_x[i] - self.known_x[j] - self.known_z[i, j]
            mu_next, mu_hat_next = dual_step(self.state.mu[i, j], residual, self.cfg)
            self.state.mu[i, j] = mu_next
            self.known_mu_hat[i, j] = mu_hat_next
            messages.append(DualDownload(i, (i, j), mu_next))
        return messages

    def end_iteration(self):
        self._move({Phase.SYNCED}, Phase.IDLE)


def _record(problem, state, ledger, cfg, warnings):
    X = state.x
    tol = cfg.trace_tie_tol * (1.0 + float(np.linalg.norm(X, axis=1).mean()))
    distinct = int(tie_components(X, tol).max()) + 1
    return TraceRecord(
        state.t, objective(problem, X), ledger.uplink_msgs, ledger.downlink_msgs, distinct, tuple(warnings),
    )


def pdmm_run(problem, cfg=None, trace_hook=None, initial_x=None):
    """
    Run ``cfg.max_iters`` protocol iterations on a sum-of-norms problem.

    Returns:
        PdmmRun: final state, communication ledger and the objective trace for
        t = 0..T (the observer never feeds back into the protocol).
    """
    cfg = cfg or PdmmConfig()
    if not isinstance(problem.penalty, SumOfNorms):
        raise ConfigError("the protocol solves sum-of-norms problems")
    n, d = problem.n_users, problem.dim_d
    if n < 2:
        raise ConfigError("the protocol needs at least two users")
    s_p, s_d = cfg.subset_sizes(n)
    index_sets = IndexSets(n)

    state = PdmmState.initial(n, d, cfg.init, initial_x)
    ledger = CommLedger()
    server = ServerAgent(problem, state, cfg, index_sets, s_p, s_d)
    users = [UserAgent(i, problem, state, cfg) for i in range(n)]
    paired = cfg.x_surrogate is XSurrogate.PAIRED

    trace = [_record(problem, state, ledger, cfg, ())]
    if trace_hook is not None:
        trace_hook(trace[-1], state, ledger)

    for t in range(cfg.max_iters):
        x_users, z_pairs = server.select(t)

        for user in users:
            aggregate = None
            if paired and user.index in x_users:
                aggregate = server.aggregate_for(user.index)
                ledger.aggregate_msgs += 1
                ledger.aggregate_floats += 2 * d
            user.compute(user.index in x_users, z_pairs.get(user.index, ()), aggregate, ledger)

        uploads = [message for user in users for message in user.commit_and_upload(index_sets)]
        server.collect(uploads)
        broadcast = server.broadcast()
        for user in users:
            user.receive_broadcast(broadcast, index_sets)

        downloads = server.update_duals()
        for message in downloads:
            users[message.recipient].receive_dual(message)
        server.end_iteration()
        for user in users:
            user.end_iteration()

        ledger.record(t, len(uploads), len(broadcast) + len(downloads), d)
        state.t = t + 1
        warnings = [w for user in users for w in user.warnings]
        for warning in warnings:
            logger.warning("iteration %d: %s", t, warning)
        trace.append(_record(problem, state, ledger, cfg, warnings))
        if trace_hook is not None:
            trace_hook(trace[-1], state, ledger)

    logger.info(
        "protocol finished %d iterations: objective %.8g, uplink %d, downlink %d, frozen pairs %d",
        cfg.max_iters, trace[-1].objective, ledger.uplink_msgs, ledger.downlink_msgs, len(state.frozen),
    )
    return PdmmRun(state, ledger, trace)
