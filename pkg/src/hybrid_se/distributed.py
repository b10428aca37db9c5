"""Fully distributed mean-field estimator and a barrier-synchronised harness.

Every bus holds a Gaussian belief b(s_i) and, if it has a PMU, a truncated
Gaussian belief b(theta_i). The prior is the product of the per-bus SCADA
marginals N(gamma_i, Gamma_i). PMU bus j summarises its observation for
neighbour i in an information-form message

    precision   = M_j[i, i] / sigma_j^2
    information = (b_j[i] - sum_{k != i} M_j[i, k] mu_k) / sigma_j^2

with ``M_j = H^T H + w (G^T H + H^T G) + t G^T G`` and ``b_j = (H + w G)^T z_j``
over the local stacked blocks, where w, t are the first two moments of
b(theta_j). Buses are updated colour group by colour group; two buses of the
same colour never share a neighbour, so a group step is an exact block
coordinate ascent on the mean-field evidence lower bound.
"""
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .centralized import PhaseBelief, _phase_posterior
from .network import build_measurement_model, check_coloring, distance2_coloring

__all__ = [
    "StateBelief",
    "GaussianMessage",
    "LocalModel",
    "NodeState",
    "StepOutput",
    "StaleCacheError",
    "DistributedResult",
    "local_model",
    "dvi_update_theta",
    "compute_message",
    "compute_messages",
    "update_belief",
    "initial_nodes",
    "harness_execute",
    "run_algorithm1",
    "meanfield_elbo",
    "write_trace",
]

_LOG_2PI = math.log(2 * math.pi)


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class StateBelief:
    mu: np.ndarray
    P: np.ndarray
    stamp: int = 0     # round in which the belief was produced


@dataclass(frozen=True)
class GaussianMessage:
    sender: int
    receiver: int
    iteration: int
    precision: np.ndarray
    info: np.ndarray

    @classmethod
    def vacuous(cls, sender, receiver, iteration=0):
        return cls(sender, receiver, iteration, np.zeros((2, 2)), np.zeros(2))


@dataclass(frozen=True, eq=False)
class LocalModel:
    """Stacked ``z_j, H_j, G_j`` over the neighbourhood of PMU bus j."""
    bus: int
    neighbors: tuple
    z: np.ndarray
    H: np.ndarray
    G: np.ndarray
    sigma: float
    _memo: dict = field(default_factory=dict, repr=False, compare=False)

    @cached_property
    def pos(self):
        return {j: slice(2 * k, 2 * k + 2) for k, j in enumerate(self.neighbors)}

    @cached_property
    def HH(self):
        return self.H.T @ self.H

    @cached_property
    def GG(self):
        return self.G.T @ self.G

    @cached_property
    def HG(self):
        return self.H.T @ self.G

    @cached_property
    def Hz(self):
        return self.H.T @ self.z

    @cached_property
    def Gz(self):
        return self.G.T @ self.z

    @cached_property
    def HGs(self):
        return self.HG + self.HG.T

    def quadratic(self, w, t):
        """(M, b) of the expected squared residual for phase moments (w, t)."""
        last = self._memo.get("quad")
        if last is not None and last[0] == (w, t):
            return last[1]
        out = (self.HH + w * self.HGs + t * self.GG, self.Hz + w * self.Gz)
        self._memo["quad"] = ((w, t), out)
        return out


def local_model(case, i, z, sigma):
    bm = build_measurement_model(case, i)
    H, G = bm.stacked()
    z = np.asarray(z, dtype=float)
    if z.size != H.shape[0]:
        raise ValueError(f"bus {i}: expected {H.shape[0]} PMU values, got {z.size}")
    if not sigma > 0:
        raise ValueError(f"bus {i}: PMU noise level must be positive")
    return LocalModel(i, bm.neighbors, z, H, G, float(sigma))


@dataclass(frozen=True)
class NodeState:
    """Everything bus i knows: own beliefs, neighbour caches and inbox."""
    bus: int
    neighbors: tuple
    belief: StateBelief
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    local: LocalModel = None
    prior_phase: object = None
    phase: PhaseBelief = None
    cache: dict = field(default_factory=dict)      # j -> StateBelief, j in M(i)
    inbox: dict = field(default_factory=dict)      # sender -> GaussianMessage
    round: int = 0

    @property
    def has_pmu(self):
        return self.local is not None

    def moments(self):
        if self.phase is None:
            return 0.0, 0.0
        return self.phase.mean, self.phase.second

    def local_mean(self):
        return np.concatenate([self.cache[j].mu for j in self.neighbors])


def _check_cache(node):
    for j in node.neighbors:
        if j not in node.cache:
            raise StaleCacheError(f"bus {node.bus}: no cached belief for neighbour {j}")
        if node.round - node.cache[j].stamp > 1:
            raise StaleCacheError(
                f"bus {node.bus}: belief of {j} from round {node.cache[j].stamp}, "
                f"now round {node.round}")


def dvi_update_theta(node):
    """b(theta_i) from the cached neighbour beliefs (cross covariances dropped)."""
    if not node.has_pmu:
        raise ValueError(f"bus {node.bus} has no PMU")
    _check_cache(node)
    if node.prior_phase.is_point:
        return PhaseBelief.of(node.prior_phase)
    lm = node.local
    mu = node.local_mean()
    Gmu, Hmu = lm.G @ mu, lm.H @ mu
    quad = float(Gmu @ Gmu)
    cross = float(lm.z @ Gmu - Hmu @ Gmu)
    for j in node.neighbors:
        sl = lm.pos[j]
        Gj, Hj, Pj = lm.G[:, sl], lm.H[:, sl], node.cache[j].P
        quad += float(np.sum((Gj @ Pj) * Gj))
        cross -= float(np.sum((Hj @ Pj) * Gj))
    return PhaseBelief.of(_phase_posterior(node.prior_phase, lm.sigma**2, quad, cross))


def compute_message(sender, receiver, iteration=None):
    """Message from PMU bus ``sender`` about the state of ``receiver``.

    Uses the sender's current phase moments and cached means of its other
    neighbours. Non-PMU senders produce a vacuous (zero-precision) message.
    """
    return compute_messages(sender, (receiver,), iteration)[receiver]


def compute_messages(sender, receivers, iteration=None):
    """``compute_message`` for several receivers, sharing one residual."""
    it = sender.round if iteration is None else iteration
    for r in receivers:
        if r not in sender.neighbors:
            raise ValueError(f"bus {r} is not a neighbour of {sender.bus}")
    if not sender.has_pmu:
        return {r: GaussianMessage.vacuous(sender.bus, r, it) for r in receivers}
    for k in sender.neighbors:
        if k not in sender.cache:
            raise StaleCacheError(f"bus {sender.bus}: no cached belief for {k}")
    lm = sender.local
    M, b = lm.quadratic(*sender.moments())
    mu = sender.local_mean()
    resid = b - M @ mu
    s2 = lm.sigma**2
    out = {}
    for r in receivers:
        si = lm.pos[r]
        Mii = M[si, si]
        h = resid[si] + Mii @ mu[si]
        out[r] = GaussianMessage(sender.bus, r, it, 0.5 * (Mii + Mii.T) / s2, h / s2)
    return out


def _inv2(A):
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    return np.array([[A[1, 1], -A[0, 1]], [-A[1, 0], A[0, 0]]]) / det


def update_belief(node, messages, prior=None, stamp=None):
    """Combine the prior with incoming messages (missing senders contribute 0)."""
    gamma, Gamma = prior if prior is not None else (node.prior_mean, node.prior_cov)
    prior_prec = _inv2(Gamma)
    prec = prior_prec.copy()
    h = prior_prec @ gamma
    for msg in messages:
        prec += msg.precision
        h += msg.info
    prec = 0.5 * (prec + prec.T)
    if not (prec[0, 0] > 0 and prec[0, 0] * prec[1, 1] - prec[0, 1] ** 2 > 0):
        raise np.linalg.LinAlgError(f"bus {node.bus}: belief precision is not PD")
    P = _inv2(prec)
    P = 0.5 * (P + P.T)
    return StateBelief(P @ h, P, node.round if stamp is None else stamp)


def initial_nodes(case, prior, pmu, sigma, prior_theta):
    """Per-bus states before any exchange: belief = prior marginal."""
    nodes = {}
    for k, i in enumerate(case.bus_ids):
        g, Gm = prior.marginal(k)
        lm = pt = None
        if i in case.pmu_buses:
            lm = local_model(case, i, pmu[i], sigma[i])
            pt = prior_theta[i]
        belief = StateBelief(g.copy(), Gm.copy(), 0)
        nodes[i] = NodeState(i, case.neighborhood(i), belief, g.copy(), Gm.copy(),
                             lm, pt, PhaseBelief.of(pt) if pt is not None else None)
    return nodes


def harness_execute(groups, nodes, step_fn, workers=1):
    """Run ``step_fn(node, snapshot)`` for every bus of each group in turn.

    Within a group all calls read the same immutable snapshot, possibly on
    several threads; results are committed at a barrier in ascending bus-id
    order, so the outcome does not depend on ``workers``. ``step_fn`` returns
    a ``StepOutput`` whose node replaces the old one. Yields
    ``(group_index, group, outputs)`` after each barrier.
    """
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for g, group in enumerate(groups):
            snapshot = dict(nodes)
            ids = sorted(group)
            if pool is None:
                results = [step_fn(snapshot[i], snapshot) for i in ids]
            else:
                results = list(pool.map(lambda i: step_fn(snapshot[i], snapshot), ids))
            outputs = dict(zip(ids, results))
            nodes.update({i: out.node for i, out in outputs.items()})
            yield g, group, outputs
    finally:
        if pool is not None:
            pool.shutdown()


@dataclass(frozen=True)
class StepOutput:
    node: NodeState
    outbox: dict          # receiver -> GaussianMessage, excluding the self-message
    delta: float          # sup-norm change of the bus mean


def _group_step(node, snapshot):
    """One bus of the active colour: phase, self-message, belief, outgoing messages."""
    phase = dvi_update_theta(node) if node.has_pmu else None
    node = replace(node, phase=phase)
    inbox = dict(node.inbox)
    inbox[node.bus] = compute_message(node, node.bus)
    belief = update_belief(node, [inbox[j] for j in node.neighbors if j in inbox])
    cache = dict(node.cache)
    cache[node.bus] = belief
    node = replace(node, belief=belief, cache=cache, inbox=inbox)
    out = compute_messages(node, [j for j in node.neighbors if j != node.bus])
    delta = float(np.max(np.abs(belief.mu - snapshot[node.bus].belief.mu)))
    return StepOutput(node, out, delta)


def _deliver(nodes, outputs, round_):
    """Post-barrier delivery: messages, beliefs to neighbour caches, refresh.

    Runs between groups, when no snapshot is being read, so inbox and cache
    dictionaries are updated in place. Returns (messages sent, refreshes).
    """
    sent = 0
    for i, out in outputs.items():
        sent += len(out.outbox) + 1    # outgoing plus the self-message
        for j, msg in out.outbox.items():
            nodes[j].inbox[i] = msg
    touched = set()
    for i, out in outputs.items():
        for j in out.node.neighbors:
            if j != i:
                nodes[j].cache[i] = out.node.belief
                touched.add(j)
    refresh = 0
    # PMU buses next to an updated bus re-send v_{j->k} to their other neighbours
    for j in sorted(touched):
        node = nodes[j]
        if not node.has_pmu or j in outputs:
            continue
        targets = [k for k in node.neighbors if k not in outputs]
        for k, msg in compute_messages(node, targets, round_).items():
            nodes[k].inbox[j] = msg
        refresh += len(targets)
    return sent, refresh


def meanfield_elbo(nodes):
    """ELBO of prod b(theta_i) prod b(s_i) under the product-of-marginals prior."""
    total = 0.0
    for node in nodes.values():
        mu, P = node.belief.mu, node.belief.P
        d = mu - node.prior_mean
        prior_prec = np.linalg.inv(node.prior_cov)
        _, ld_prior = np.linalg.slogdet(node.prior_cov)
        _, ld_post = np.linalg.slogdet(P)
        total += -0.5 * (2 * _LOG_2PI + ld_prior + d @ prior_prec @ d + np.sum(prior_prec * P))
        total += 0.5 * (2 * (1 + _LOG_2PI) + ld_post)
        if not node.has_pmu:
            continue
        lm = node.local
        own = {j: nodes[j].belief for j in node.neighbors}
        mu_l = np.concatenate([own[j].mu for j in node.neighbors])
        w, t = node.moments()
        M, _ = lm.quadratic(w, t)
        Gmu = lm.G @ mu_l
        r = lm.z - lm.H @ mu_l - w * Gmu
        sq = float(r @ r) + max(t - w * w, 0.0) * float(Gmu @ Gmu)
        for j in node.neighbors:
            sl = lm.pos[j]
            sq += float(np.sum(M[sl, sl] * own[j].P))
        m = lm.z.size
        total += -0.5 * (m * _LOG_2PI + m * math.log(lm.sigma**2) + sq / lm.sigma**2)
        if not node.prior_phase.is_point:
            total += node.prior_phase.expected_logpdf(node.phase.mean, node.phase.second)
            total += node.phase.dist.entropy()
    return float(total)


@dataclass
class DistributedResult:
    bus_ids: tuple
    nodes: dict
    trace: list = field(default_factory=list)    # per (round, color, bus)
    steps: list = field(default_factory=list)    # per colour-group step
    rounds: int = 0
    converged: bool = False

    @property
    def mu(self):
        return np.concatenate([self.nodes[i].belief.mu for i in self.bus_ids])

    @property
    def P_blocks(self):
        return {i: self.nodes[i].belief.P for i in self.bus_ids}

    @property
    def phase(self):
        return {i: n.phase for i, n in self.nodes.items() if n.has_pmu}

    @property
    def elbo_trace(self):
        return [s["elbo"] for s in self.steps if "elbo" in s]

    def step_means(self):
        """Stacked mean after initialisation and after every colour step."""
        return [s["mu"] for s in self.steps]


def _record(round_, color, node, sent):
    rec = {"round": round_, "color": color, "bus": node.bus,
           "mu": [float(x) for x in node.belief.mu],
           "P_diag": [float(x) for x in np.diag(node.belief.P)],
           "varpi": None, "tau": None, "messages": sent}
    if node.phase is not None:
        rec["varpi"], rec["tau"] = float(node.phase.mean), float(node.phase.second)
    return rec


def run_algorithm1(case, prior, pmu, sigma, prior_theta, schedule=None, *,
                   max_rounds=200, tol=1e-8, workers=1, track_elbo=True):
    """Distributed state estimation with colour-group scheduling.

    Initialisation: every bus starts from its prior marginal, PMU buses
    compute b(theta_i), all buses exchange messages and beliefs once, and
    PMU buses refresh their messages. Each round then visits the colour
    groups in order. Stops when the largest change of any mean over a full
    round is below ``tol``.
    """
    schedule = schedule or distance2_coloring(case)
    if set(schedule.color) != set(case.bus_ids):
        unknown = sorted(set(schedule.color) ^ set(case.bus_ids))
        raise ValueError(f"schedule does not match the case buses: {unknown}")
    if not check_coloring(case, schedule):
        raise ValueError("schedule is not a valid distance-2 coloring")
    groups = [g for g in schedule.groups() if g]
    bus_ids = case.bus_ids
    nodes = initial_nodes(case, prior, pmu, sigma, prior_theta)
    result = DistributedResult(bus_ids, nodes)

    # initialisation: neighbours exchange prior means, phases, messages, beliefs
    for i in bus_ids:
        cache = {j: nodes[j].belief for j in nodes[i].neighbors}
        nodes[i] = replace(nodes[i], cache=cache)
    for i in case.pmu_list:
        nodes[i] = replace(nodes[i], phase=dvi_update_theta(nodes[i]))
    init_msgs = 0
    for i in bus_ids:
        for j in nodes[i].neighbors:
            msg = compute_message(nodes[i], j, 0)
            nodes[j] = replace(nodes[j], inbox={**nodes[j].inbox, i: msg})
            init_msgs += 1
    beliefs = {i: update_belief(nodes[i], nodes[i].inbox.values(), stamp=0) for i in bus_ids}
    for i in bus_ids:
        cache = {j: beliefs[j] for j in nodes[i].neighbors}
        nodes[i] = replace(nodes[i], belief=beliefs[i], cache=cache)
    for i in case.pmu_list:
        for j in nodes[i].neighbors:
            msg = compute_message(nodes[i], j, 0)
            nodes[j] = replace(nodes[j], inbox={**nodes[j].inbox, i: msg})
            init_msgs += 1
    first = {"round": 0, "color": None, "messages": init_msgs, "refresh": 0,
             "delta": math.inf, "mu": result.mu,
             "phase": {i: nodes[i].phase.mean for i in case.pmu_list}}
    if track_elbo:
        first["elbo"] = meanfield_elbo(nodes)
    result.steps.append(first)
    for i in bus_ids:
        result.trace.append(_record(0, None, nodes[i], len(nodes[i].neighbors)))

    for round_ in range(1, max_rounds + 1):
        for i in bus_ids:
            nodes[i] = replace(nodes[i], round=round_)
        start = result.mu
        for g, group, outputs in harness_execute(groups, nodes, _group_step, workers):
            sent, refresh = _deliver(nodes, outputs, round_)
            step = {"round": round_, "color": g, "messages": sent, "refresh": refresh,
                    "delta": max(out.delta for out in outputs.values()),
                    "mu": result.mu,
                    "phase": {i: nodes[i].phase.mean for i in group if nodes[i].has_pmu}}
            if track_elbo:
                step["elbo"] = meanfield_elbo(nodes)
            result.steps.append(step)
            for i in group:
                result.trace.append(_record(round_, g, nodes[i], len(nodes[i].neighbors)))
        result.rounds = round_
        if float(np.max(np.abs(result.mu - start))) < tol:
            result.converged = True
            break
    return result


def write_trace(result, fh):
    """One JSON object per (round, color, bus); keys sorted for replayability."""
    for rec in result.trace:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
