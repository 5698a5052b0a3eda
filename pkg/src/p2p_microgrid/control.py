"""Secondary and tertiary control on top of the epidemic primitives.

Primary control is the droop law in grid_model and needs no communication.
Secondary control agrees on the average frequency deviation and shifts
setpoints to remove it. Tertiary control equalises marginal cost across
dispatchable agents. Coupling agents let a lower microgrid appear to the
level above as one dispatchable unit.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum

from p2p_microgrid.epidemic import ConvergenceReport, Deliver, run_consensus, run_push_sum
from p2p_microgrid.errors import InfeasibleError, NotDispatchableError
from p2p_microgrid.grid_model import (
    DerKind,
    DerSpec,
    Microgrid,
    is_dispatchable,
    marginal_cost,
)
from p2p_microgrid.rng import SeededRNG
from p2p_microgrid.topology import CommGraph, NodeId

logger = logging.getLogger(__name__)

ORACLE_TOL_MW = 1e-12
FEASIBILITY_TOL_MW = 1e-9
DEFAULT_STEP_SCALE = 0.05
MIN_TERTIARY_ITERATIONS = 100


class ControlArchitecture(str, Enum):
    """How a microgrid coordinates its agents."""

    PEER_TO_PEER = "peer_to_peer"
    CENTRALIZED = "centralized"
    LOCAL = "local"


@dataclass(frozen=True)
class SecondaryParams:
    period_rounds: int = 20
    gain: float = 1.0
    consensus_tol: float = 1e-12
    consensus_max_rounds: int = 100_000

    def __post_init__(self) -> None:
        if self.period_rounds < 1:
            raise ValueError(f"period_rounds must be >= 1, got {self.period_rounds}")
        if not 0 < self.gain <= 1:
            raise ValueError(f"gain must lie in (0, 1], got {self.gain}")
        if self.consensus_tol <= 0:
            raise ValueError("consensus_tol must be positive")


@dataclass(frozen=True)
class TertiaryParams:
    step_size: float | None = None
    tol: float = 1e-9
    max_iterations: int | None = None
    consensus_tol: float = 1e-12
    consensus_max_rounds: int = 100_000
    push_sum_tol: float = 1e-12
    push_sum_max_rounds: int = 20_000

    def __post_init__(self) -> None:
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.tol <= 0 or self.push_sum_tol <= 0 or self.consensus_tol <= 0:
            raise ValueError("tertiary tolerances must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass(frozen=True)
class ControlSettings:
    architecture: ControlArchitecture = ControlArchitecture.PEER_TO_PEER
    secondary: SecondaryParams | None = None
    tertiary: TertiaryParams | None = None
    measurement_noise_hz: float = 0.0
    controller_node: NodeId = 0


@dataclass(frozen=True)
class SecondaryOutcome:
    """Setpoint corrections in MW per DER and the consensus run that produced them."""

    corrections: dict[NodeId, float]
    report: ConvergenceReport | None = None


@dataclass(frozen=True)
class TertiaryState:
    """Per-node lambda and mismatch estimates, aligned with ``nodes``."""

    lambda_estimates: tuple[float, ...]
    mismatch_estimate: tuple[float, ...]
    step_size: float
    nodes: tuple[NodeId, ...]
    protocol_rounds: int = 0
    protocols_converged: bool = True


@dataclass(frozen=True)
class TertiaryReport:
    converged: bool
    iterations: int
    protocol_rounds: int
    dispatch: dict[NodeId, float]
    lambda_value: float


@dataclass(frozen=True)
class CouplingProfile:
    """What a coupling agent tells the level above about its microgrid."""

    pcc_id: str
    agg_p_min: float
    agg_p_max: float
    agg_cost_a: float
    agg_cost_b: float
    current_p: float
    members: tuple[DerSpec, ...] = field(default=(), compare=False, repr=False)


def _require_dispatchable(agents: Sequence[DerSpec]) -> None:
    for der in agents:
        if not is_dispatchable(der):
            raise NotDispatchableError(
                f"DER {der.label} is a {der.kind.value} and cannot be dispatched"
            )


def secondary_update(
    mg: Microgrid,
    graph: CommGraph,
    params: SecondaryParams,
    measured_delta_f: Mapping[NodeId, float],
    deliver: Deliver | None = None,
    delay_rounds: int = 0,
) -> SecondaryOutcome:
    """Agree on the mean frequency deviation and restore it proportionally.

    Each dispatchable DER shifts its setpoint by -gain * droop_gain * x_i,
    where x_i is its own consensus estimate of the average deviation.
    Raises NotConnectedError on a partitioned graph; the caller keeps the
    setpoints and primary droop holds the grid.
    """
    live = graph.live_nodes()
    init = [measured_delta_f[node] for node in live]
    state, report = run_consensus(
        init,
        graph,
        params.consensus_tol,
        params.consensus_max_rounds,
        deliver=deliver,
        delay_rounds=delay_rounds,
    )
    corrections = {
        der.id: -params.gain * der.droop_gain * state.value_of(der.id)
        for der in mg.ders
        if is_dispatchable(der) and der.id in state.nodes
    }
    return SecondaryOutcome(corrections=corrections, report=report)


def centralized_secondary_update(
    mg: Microgrid, params: SecondaryParams, measured_delta_f: Mapping[NodeId, float]
) -> SecondaryOutcome:
    """Same restoration law with the exact average computed by one controller."""
    if not measured_delta_f:
        return SecondaryOutcome(corrections={})
    mean = sum(measured_delta_f.values()) / len(measured_delta_f)
    corrections = {
        der.id: -params.gain * der.droop_gain * mean
        for der in mg.ders
        if is_dispatchable(der) and der.id in measured_delta_f
    }
    return SecondaryOutcome(corrections=corrections)


def implied_dispatch(der: DerSpec, lam: float) -> float:
    """p = clamp((lambda - b) / a, p_min, p_max)."""
    p = (lam - der.cost_b) / der.cost_a
    return min(max(p, der.p_min), der.p_max)


def default_step_size(agents: Sequence[DerSpec]) -> float:
    """0.05 / mean(a_i); large steps can make the lambda iteration diverge."""
    mean_a = sum(d.cost_a for d in agents) / len(agents)
    return DEFAULT_STEP_SCALE / mean_a


def initial_tertiary_state(
    agents: Sequence[DerSpec], graph: CommGraph, step_size: float | None = None
) -> TertiaryState:
    """Start every agent at the marginal cost of its current setpoint.

    Nodes without an agent relay lambda and start at the agents' mean.
    """
    _require_dispatchable(agents)
    by_id = {d.id: d for d in agents}
    own = [marginal_cost(d, d.p_set) for d in agents]
    relay_start = sum(own) / len(own) if own else 0.0
    nodes = tuple(graph.live_nodes())
    lambdas = tuple(
        marginal_cost(by_id[n], by_id[n].p_set) if n in by_id else relay_start for n in nodes
    )
    return TertiaryState(
        lambda_estimates=lambdas,
        mismatch_estimate=tuple(0.0 for _ in nodes),
        step_size=step_size if step_size is not None else default_step_size(agents),
        nodes=nodes,
    )


def _check_feasible(agents: Sequence[DerSpec], demand: float) -> None:
    total_min = sum(d.p_min for d in agents)
    total_max = sum(d.p_max for d in agents)
    if not total_min - FEASIBILITY_TOL_MW <= demand <= total_max + FEASIBILITY_TOL_MW:
        raise InfeasibleError(
            f"demand {demand:.6g} MW outside dispatchable range "
            f"[{total_min:.6g}, {total_max:.6g}] MW"
        )


def tertiary_dispatch_step(
    agents: Sequence[DerSpec],
    graph: CommGraph,
    demand: float,
    state: TertiaryState,
    rng: SeededRNG | None = None,
    params: TertiaryParams | None = None,
    deliver: Deliver | None = None,
    delay_rounds: int = 0,
) -> TertiaryState:
    """One outer iteration of consensus-based economic dispatch.

    1. consensus over the lambda estimates,
    2. each agent's implied dispatch from its own lambda,
    3. push-sum of the local terms demand/n - p_i gives every node the
       global mismatch demand - sum(p),
    4. lambda_i += step_size * mismatch_i.
    Equal lambdas with zero mismatch are a fixed point.
    """
    _require_dispatchable(agents)
    params = params or TertiaryParams()
    rng = rng or SeededRNG(0)
    by_id = {d.id: d for d in agents}

    agreed, lam_report = run_consensus(
        state.lambda_estimates,
        graph,
        params.consensus_tol,
        params.consensus_max_rounds,
        deliver=deliver,
        delay_rounds=delay_rounds,
    )
    lambdas = agreed.values
    n = len(state.nodes)
    terms = [
        demand / n - (implied_dispatch(by_id[node], lam) if node in by_id else 0.0)
        for node, lam in zip(state.nodes, lambdas, strict=True)
    ]
    mismatch_report = run_push_sum(
        terms,
        graph,
        params.push_sum_tol,
        params.push_sum_max_rounds,
        rng,
        deliver=deliver,
        delay_rounds=delay_rounds,
    )
    mismatch = tuple(n * est for est in mismatch_report.estimates)
    updated = tuple(
        lam + state.step_size * mis for lam, mis in zip(lambdas, mismatch, strict=True)
    )
    return TertiaryState(
        lambda_estimates=updated,
        mismatch_estimate=mismatch,
        step_size=state.step_size,
        nodes=state.nodes,
        protocol_rounds=(
            state.protocol_rounds + lam_report.rounds_used + mismatch_report.rounds_used
        ),
        protocols_converged=lam_report.converged and mismatch_report.converged,
    )


def default_iteration_budget(agents: Sequence[DerSpec], step_size: float, tol: float) -> int:
    """Outer iterations a stable step needs to bring the mismatch below tol.

    While any unit is unclamped the lambda error shrinks by at least
    step_size * min(1/a_i) per iteration, and it starts no wider than the
    span of marginal costs over the units' limits. The bound is doubled.
    """
    span = max(d.cost_a * d.p_max + d.cost_b for d in agents) - min(
        d.cost_a * d.p_min + d.cost_b for d in agents
    )
    slope = sum(1.0 / d.cost_a for d in agents)
    rate = min(step_size * min(1.0 / d.cost_a for d in agents), 1.0)
    decades = math.log(max(span * slope / tol, math.e))
    return MIN_TERTIARY_ITERATIONS + 2 * math.ceil(decades / rate)


def run_tertiary_dispatch(
    agents: Sequence[DerSpec],
    graph: CommGraph,
    demand: float,
    params: TertiaryParams | None = None,
    rng: SeededRNG | None = None,
    state: TertiaryState | None = None,
    deliver: Deliver | None = None,
    delay_rounds: int = 0,
) -> tuple[TertiaryState, TertiaryReport]:
    """Iterate tertiary_dispatch_step until lambdas agree and mismatch vanishes.

    Without an explicit max_iterations the budget comes from
    default_iteration_budget. An iteration whose consensus or push-sum run
    hits its round cap is discarded and ends the loop unconverged, so the
    dispatch reflects the last estimates the agents agreed on.
    """
    params = params or TertiaryParams()
    rng = rng or SeededRNG(0)
    _check_feasible(agents, demand)
    if state is None:
        state = initial_tertiary_state(agents, graph, params.step_size)
    budget = params.max_iterations
    if budget is None:
        budget = default_iteration_budget(agents, state.step_size, params.tol)

    iterations = 0
    converged = False
    while iterations < budget:
        step = tertiary_dispatch_step(
            agents, graph, demand, state, rng, params, deliver, delay_rounds
        )
        iterations += 1
        if not step.protocols_converged:
            logger.warning("tertiary dispatch abandoned at iteration %d", iterations)
            state = replace(state, protocol_rounds=step.protocol_rounds)
            break
        state = step
        spread = max(state.lambda_estimates) - min(state.lambda_estimates)
        worst = max(abs(m) for m in state.mismatch_estimate)
        if spread <= params.tol and worst <= params.tol:
            converged = True
            break

    if not converged:
        logger.warning("tertiary dispatch stopped after %d iterations", iterations)
    lam_of = dict(zip(state.nodes, state.lambda_estimates, strict=True))
    dispatch = {d.id: implied_dispatch(d, lam_of[d.id]) for d in agents}
    lam_mean = sum(lam_of[d.id] for d in agents) / len(agents)
    report = TertiaryReport(
        converged=converged,
        iterations=iterations,
        protocol_rounds=state.protocol_rounds,
        dispatch=dispatch,
        lambda_value=lam_mean,
    )
    return state, report


def _oracle_total(agents: Sequence[DerSpec], lam: float) -> float:
    return sum(implied_dispatch(d, lam) for d in agents)


def centralized_dispatch_oracle(
    agents: Sequence[DerSpec], demand: float
) -> tuple[dict[NodeId, float], float]:
    """Exact equal-marginal-cost dispatch, as a central controller would compute it.

    lambda -> sum_i clamp((lambda - b_i) / a_i, p_min_i, p_max_i) is monotone,
    so bisection brackets lambda; the answer is then solved in closed form on
    the set of unclamped units.
    """
    _require_dispatchable(agents)
    _check_feasible(agents, demand)

    lo = min(d.cost_a * d.p_min + d.cost_b for d in agents)
    hi = max(d.cost_a * d.p_max + d.cost_b for d in agents)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        total = _oracle_total(agents, mid)
        if abs(total - demand) <= ORACLE_TOL_MW or hi - lo <= 0.0:
            break
        if total < demand:
            lo = mid
        else:
            hi = mid
    lam = 0.5 * (lo + hi)

    free = [d for d in agents if d.p_min < (lam - d.cost_b) / d.cost_a < d.p_max]
    if free:
        free_ids = {d.id for d in free}
        clamped = sum(implied_dispatch(d, lam) for d in agents if d.id not in free_ids)
        slope = sum(1.0 / d.cost_a for d in free)
        intercept = sum(d.cost_b / d.cost_a for d in free)
        exact = (demand - clamped + intercept) / slope
        if all(d.p_min <= (exact - d.cost_b) / d.cost_a <= d.p_max for d in free):
            lam = exact
    elif abs(demand - sum(d.p_min for d in agents)) <= FEASIBILITY_TOL_MW:
        lam = lo

    dispatch = {d.id: implied_dispatch(d, lam) for d in agents}
    return dispatch, lam


def aggregate_microgrid(mg: Microgrid) -> CouplingProfile:
    """Horizontal sum of the members' affine marginal-cost curves.

    agg_a = 1 / sum(1/a_i), agg_b = agg_a * sum(b_i/a_i); limits are summed.
    """
    if not mg.ders:
        raise NotDispatchableError(f"microgrid {mg.id} has no dispatchable members")
    _require_dispatchable(mg.ders)
    inv_a = sum(1.0 / d.cost_a for d in mg.ders)
    agg_a = 1.0 / inv_a
    agg_b = agg_a * sum(d.cost_b / d.cost_a for d in mg.ders)
    return CouplingProfile(
        pcc_id=mg.id,
        agg_p_min=sum(d.p_min for d in mg.ders),
        agg_p_max=sum(d.p_max for d in mg.ders),
        agg_cost_a=agg_a,
        agg_cost_b=agg_b,
        current_p=sum(d.p_set for d in mg.ders),
        members=mg.ders,
    )


def coupling_agent_der(profile: CouplingProfile, node: NodeId) -> DerSpec:
    """The coupling agent as the level above sees it: one dispatchable unit."""
    p_set = min(max(profile.current_p, profile.agg_p_min), profile.agg_p_max)
    return DerSpec(
        id=node,
        kind=DerKind.GENERATOR,
        p_set=p_set,
        p_min=profile.agg_p_min,
        p_max=profile.agg_p_max,
        cost_a=profile.agg_cost_a,
        cost_b=profile.agg_cost_b,
        name=f"pcc:{profile.pcc_id}",
    )


def disaggregate_setpoint(
    profile: CouplingProfile, members: Sequence[DerSpec], p_command: float
) -> dict[NodeId, float]:
    """Split a command received at the PCC with an equal-lambda dispatch inside."""
    if not (
        profile.agg_p_min - FEASIBILITY_TOL_MW
        <= p_command
        <= profile.agg_p_max + FEASIBILITY_TOL_MW
    ):
        raise InfeasibleError(
            f"command {p_command:.6g} MW outside [{profile.agg_p_min:.6g}, "
            f"{profile.agg_p_max:.6g}] MW at {profile.pcc_id}"
        )
    dispatch, _ = centralized_dispatch_oracle(members, p_command)
    return dispatch
