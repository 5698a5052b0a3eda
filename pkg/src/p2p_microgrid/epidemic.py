"""Average consensus and push-sum gossip over a CommGraph.

Both protocols run in synchronous rounds. The functions here are pure: loss
and delay are injected by the caller through ``deliver`` (returns the graph
of links that carried messages in a round) and ``delay_rounds``.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from p2p_microgrid.errors import DimensionMismatchError, NotConnectedError
from p2p_microgrid.rng import SeededRNG
from p2p_microgrid.topology import CommGraph, NodeId, adjacency_lists, is_connected
from p2p_microgrid.topology import default_epsilon as default_epsilon

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
Deliver = Callable[[CommGraph], CommGraph]


@dataclass(frozen=True)
class ConsensusState:
    """Per-agent values x_i[k]; ``nodes`` gives the node id at each position."""

    values: tuple[float, ...]
    round: int
    initial_sum: float
    nodes: tuple[NodeId, ...]

    def as_array(self) -> FloatArray:
        return np.asarray(self.values, dtype=np.float64)

    def value_of(self, node: NodeId) -> float:
        return self.values[self.nodes.index(node)]

    def without(self, node: NodeId) -> ConsensusState:
        """Drop a failed agent; survivors keep their current values."""
        pos = self.nodes.index(node)
        values = self.values[:pos] + self.values[pos + 1 :]
        return ConsensusState(
            values=values,
            round=self.round,
            initial_sum=float(sum(values)),
            nodes=self.nodes[:pos] + self.nodes[pos + 1 :],
        )


@dataclass(frozen=True)
class PushSumState:
    """Push-sum (sum, weight) pairs; estimate_i = s_i / w_i."""

    sums: tuple[float, ...]
    weights: tuple[float, ...]
    nodes: tuple[NodeId, ...]

    def estimates(self) -> list[float]:
        return [s / w for s, w in zip(self.sums, self.weights, strict=True)]

    def to_json(self) -> str:
        """Canonical serialisation, used to compare runs byte for byte."""
        payload = {
            "nodes": list(self.nodes),
            "sums": list(self.sums),
            "weights": list(self.weights),
        }
        return json.dumps(payload, sort_keys=True)


@dataclass(frozen=True)
class ConvergenceReport:
    converged: bool
    rounds_used: int
    final_residual: float
    consensus_value: float | None
    estimates: tuple[float, ...] = field(default=())

    @property
    def sum_estimate(self) -> float | None:
        """n times the agreed mean, i.e. the network-wide total."""
        if self.consensus_value is None:
            return None
        return len(self.estimates) * self.consensus_value


def _check_dimension(nodes: Sequence[NodeId], graph: CommGraph) -> None:
    live = graph.live_nodes()
    if list(nodes) != live:
        raise DimensionMismatchError(
            f"state covers nodes {list(nodes)} but graph has live nodes {live}"
        )


def start_consensus(init: Sequence[float], graph: CommGraph) -> ConsensusState:
    """Round-0 state with x_i = z_i."""
    live = graph.live_nodes()
    if len(init) != len(live):
        raise DimensionMismatchError(f"{len(init)} initial values for {len(live)} live nodes")
    values = tuple(float(v) for v in init)
    return ConsensusState(values=values, round=0, initial_sum=float(sum(values)), nodes=tuple(live))


def laplacian(graph: CommGraph) -> FloatArray:
    """Graph Laplacian D - A over live nodes in ascending id order."""
    live = graph.live_nodes()
    pos = {node: k for k, node in enumerate(live)}
    lap = np.zeros((len(live), len(live)), dtype=np.float64)
    for i, j in graph.edges:
        a, b = pos[i], pos[j]
        lap[a, b] -= 1.0
        lap[b, a] -= 1.0
        lap[a, a] += 1.0
        lap[b, b] += 1.0
    return lap


def consensus_step(
    state: ConsensusState, graph: CommGraph, observed: Sequence[float] | None = None
) -> ConsensusState:
    """x_i[k+1] = x_i[k] + eps * sum_j a_ij (x_j[k] - x_i[k]), all nodes at once.

    ``observed`` replaces the neighbour values x_j with the last samples
    actually received (hold-last-sample under delay).
    """
    _check_dimension(state.nodes, graph)
    return _apply_step(state, graph.epsilon, _mixing(graph), observed)


def _mixing(graph: CommGraph) -> tuple[FloatArray, FloatArray]:
    lap = laplacian(graph)
    degree = np.diag(lap).copy()
    return np.diag(degree) - lap, degree


def _apply_step(
    state: ConsensusState,
    epsilon: float,
    mixing: tuple[FloatArray, FloatArray],
    observed: Sequence[float] | None,
) -> ConsensusState:
    adjacency, degree = mixing
    x = state.as_array()
    seen = x if observed is None else np.asarray(observed, dtype=np.float64)
    if seen.shape != x.shape:
        raise DimensionMismatchError(f"observed vector has {seen.size} entries, expected {x.size}")
    step = x + epsilon * (adjacency @ seen - degree * x)
    return ConsensusState(
        values=tuple(float(v) for v in step),
        round=state.round + 1,
        initial_sum=state.initial_sum,
        nodes=state.nodes,
    )


def consensus_residual(state: ConsensusState) -> float:
    """Spread max_i x_i - min_i x_i; zero exactly at consensus."""
    if not state.values:
        return 0.0
    return max(state.values) - min(state.values)


def run_consensus(
    init: Sequence[float],
    graph: CommGraph,
    tol: float,
    max_rounds: int,
    deliver: Deliver | None = None,
    delay_rounds: int = 0,
) -> tuple[ConsensusState, ConvergenceReport]:
    """Iterate consensus_step until the spread drops to tol or max_rounds pass."""
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if not is_connected(graph):
        raise NotConnectedError("consensus needs a connected graph over live agents")

    state = start_consensus(init, graph)
    history: deque[tuple[float, ...]] = deque([state.values], maxlen=delay_rounds + 1)
    residual = consensus_residual(state)
    fixed_mixing = _mixing(graph)

    while residual > tol and state.round < max_rounds:
        mixing = fixed_mixing if deliver is None else _mixing(deliver(graph))
        observed = history[0] if delay_rounds else None
        state = _apply_step(state, graph.epsilon, mixing, observed)
        history.append(state.values)
        residual = consensus_residual(state)

    converged = residual <= tol
    if not converged:
        logger.warning(
            "consensus did not converge: residual %.3e after %d rounds", residual, state.round
        )
    value = float(np.mean(state.values)) if converged else None
    report = ConvergenceReport(
        converged=converged,
        rounds_used=state.round,
        final_residual=residual,
        consensus_value=value,
        estimates=state.values,
    )
    return state, report


def start_push_sum(init: Sequence[float], graph: CommGraph) -> PushSumState:
    """s_i = z_i, w_i = 1."""
    live = graph.live_nodes()
    if len(init) != len(live):
        raise DimensionMismatchError(f"{len(init)} initial values for {len(live)} live nodes")
    return PushSumState(
        sums=tuple(float(v) for v in init),
        weights=tuple(1.0 for _ in live),
        nodes=tuple(live),
    )


def _push_shares(
    state: PushSumState, graph: CommGraph, rng: SeededRNG
) -> tuple[PushSumState, FloatArray, FloatArray]:
    """Split every (s, w) in half: keep one half, address the other to a neighbour.

    Returns the kept state and the vectors of shares in transit, indexed by
    recipient position.
    """
    _check_dimension(state.nodes, graph)
    if any(w <= 0 for w in state.weights):
        raise ValueError("push-sum weights must stay positive")

    pos = {node: k for k, node in enumerate(state.nodes)}
    peers_of = adjacency_lists(graph)
    kept_s = np.asarray(state.sums, dtype=np.float64)
    kept_w = np.asarray(state.weights, dtype=np.float64)
    sent_s = np.zeros_like(kept_s)
    sent_w = np.zeros_like(kept_w)

    for k, node in enumerate(state.nodes):
        peers = peers_of[node]
        if not peers:
            continue
        target = pos[rng.choice(peers)]
        half_s = kept_s[k] / 2.0
        half_w = kept_w[k] / 2.0
        kept_s[k] -= half_s
        kept_w[k] -= half_w
        sent_s[target] += half_s
        sent_w[target] += half_w

    kept = PushSumState(
        sums=tuple(float(v) for v in kept_s),
        weights=tuple(float(v) for v in kept_w),
        nodes=state.nodes,
    )
    return kept, sent_s, sent_w


def _absorb(state: PushSumState, sent_s: FloatArray, sent_w: FloatArray) -> PushSumState:
    return PushSumState(
        sums=tuple(float(v) for v in np.asarray(state.sums) + sent_s),
        weights=tuple(float(v) for v in np.asarray(state.weights) + sent_w),
        nodes=state.nodes,
    )


def push_sum_round(state: PushSumState, graph: CommGraph, rng: SeededRNG) -> PushSumState:
    """One synchronous push-sum round; total s and total w are conserved."""
    kept, sent_s, sent_w = _push_shares(state, graph, rng)
    return _absorb(kept, sent_s, sent_w)


def _spread(values: Sequence[float]) -> float:
    return max(values) - min(values) if values else 0.0


def run_push_sum(
    init: Sequence[float],
    graph: CommGraph,
    tol: float,
    max_rounds: int,
    rng: SeededRNG,
    deliver: Deliver | None = None,
    delay_rounds: int = 0,
) -> ConvergenceReport:
    """Gossip until every estimate s_i/w_i agrees to within tol.

    Mass is conserved, so the true mean sits inside the hull of the
    estimates and a spread below tol bounds every node's error by tol.
    Rounds spent draining delayed shares count against max_rounds; a run
    cut off with shares still in flight is reported as not converged.
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if not is_connected(graph):
        raise NotConnectedError("push-sum needs a connected graph over live agents")

    state = start_push_sum(init, graph)
    in_flight: deque[tuple[FloatArray, FloatArray]] = deque()
    rounds = 0
    residual = _spread(state.estimates())

    while rounds < max_rounds:
        if residual <= tol:
            if not in_flight:
                break
            # stop pushing and let the delayed shares land
            while in_flight and rounds < max_rounds:
                arrived_s, arrived_w = in_flight.popleft()
                state = _absorb(state, arrived_s, arrived_w)
                rounds += 1
            residual = _spread(state.estimates())
            continue
        round_graph = graph if deliver is None else deliver(graph)
        state, sent_s, sent_w = _push_shares(state, round_graph, rng)
        in_flight.append((sent_s, sent_w))
        while len(in_flight) > delay_rounds:
            arrived_s, arrived_w = in_flight.popleft()
            state = _absorb(state, arrived_s, arrived_w)
        rounds += 1
        residual = _spread(state.estimates())

    converged = residual <= tol and not in_flight
    estimates = tuple(state.estimates())
    if not converged:
        logger.warning("push-sum did not converge: residual %.3e after %d rounds", residual, rounds)
    value = float(sum(state.sums) / sum(state.weights)) if converged else None
    return ConvergenceReport(
        converged=converged,
        rounds_used=rounds,
        final_residual=residual,
        consensus_value=value,
        estimates=estimates,
    )
