"""Deterministic round-based orchestration of physics, protocols and faults.

Rounds are the only clock. Each round: apply due faults, solve the lumped
frequency with primary droop, run tertiary and secondary control when they
are due, re-solve, and append one record. Physics is quasi-static, so every
protocol run triggered inside a round completes within that round.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING

from p2p_microgrid.control import (
    ControlArchitecture,
    ControlSettings,
    CouplingProfile,
    SecondaryOutcome,
    aggregate_microgrid,
    centralized_dispatch_oracle,
    centralized_secondary_update,
    coupling_agent_der,
    disaggregate_setpoint,
    run_tertiary_dispatch,
    secondary_update,
)
from p2p_microgrid.errors import (
    InfeasibleError,
    LastNodeError,
    NotConnectedError,
    UnknownTargetError,
    ValidationFailedError,
)
from p2p_microgrid.grid_model import (
    DerSpec,
    Microgrid,
    generation_cost,
    is_dispatchable,
    solve_feeder_with_droop,
    solve_lumped_frequency,
)
from p2p_microgrid.rng import SeededRNG
from p2p_microgrid.topology import (
    CommGraph,
    Edge,
    NodeId,
    normalize_edge,
    remove_node,
    restrict_edges,
    subgraph,
)

if TYPE_CHECKING:
    from p2p_microgrid.scenario_io import MicrogridConfig, Scenario

logger = logging.getLogger(__name__)

NOMINAL_VOLTAGE_PU = 1.0


class FaultKind(str, Enum):
    AGENT_FAIL = "agent_fail"
    AGENT_RESTORE = "agent_restore"
    LINK_FAIL = "link_fail"
    LINK_RESTORE = "link_restore"
    LOAD_STEP = "load_step"


TERTIARY_TRIGGERS = frozenset({FaultKind.AGENT_FAIL, FaultKind.AGENT_RESTORE, FaultKind.LOAD_STEP})


@dataclass(frozen=True)
class FaultEvent:
    at_round: int
    kind: FaultKind
    microgrid: str
    node: NodeId | None = None
    edge: Edge | None = None
    mw: float | None = None
    feeder_bus: int | None = None

    def describe(self) -> str:
        if self.kind in (FaultKind.AGENT_FAIL, FaultKind.AGENT_RESTORE):
            target = f"node {self.node}"
        elif self.kind in (FaultKind.LINK_FAIL, FaultKind.LINK_RESTORE):
            target = f"link {self.edge}"
        else:
            target = f"{self.mw:+g} MW"
        return f"{self.kind.value} {self.microgrid} {target}"


@dataclass(frozen=True)
class ChannelModel:
    loss_probability: float = 0.0
    delay_rounds: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError(f"loss_probability must lie in [0, 1], got {self.loss_probability}")
        if self.delay_rounds < 0:
            raise ValueError(f"delay_rounds must be >= 0, got {self.delay_rounds}")


@dataclass(frozen=True)
class NodeRecord:
    microgrid: str
    node: NodeId
    voltage_pu: float
    der_name: str
    p_mw: float
    cost: float


@dataclass(frozen=True)
class RoundRecord:
    round: int
    frequency_hz: float
    delta_f_hz: float
    nodes: tuple[NodeRecord, ...]
    residual: float
    msgs_delivered: int
    msgs_lost: int
    active_faults: tuple[str, ...]
    bus_voltages: tuple[float, ...] = ()


@dataclass(frozen=True)
class ActivationRecord:
    """One secondary or tertiary activation with setpoints before and after."""

    round: int
    microgrid: str
    layer: str
    before: dict[str, float]
    after: dict[str, float]
    protocol_rounds: int
    converged: bool
    note: str = ""


@dataclass(frozen=True)
class SimTrace:
    records: tuple[RoundRecord, ...]
    activations: tuple[ActivationRecord, ...] = ()
    faults_applied: tuple[tuple[int, str], ...] = ()
    nominal_frequency_hz: float = 50.0
    voltage_band_pu: tuple[float, float] = (0.9, 1.1)
    frequency_band_hz: float = 0.2
    restore_tol_hz: float = 1e-6


@dataclass(frozen=True)
class MicrogridState:
    """Mutable-by-replacement state of one microgrid between rounds."""

    config: MicrogridConfig
    ders: dict[NodeId, DerSpec]
    load_mw: float
    feeder_injections: tuple[tuple[float, float], ...] = ()
    failed_nodes: frozenset[NodeId] = frozenset()
    failed_links: frozenset[Edge] = frozenset()

    @property
    def id(self) -> str:
        return self.config.microgrid.id

    @property
    def graph(self) -> CommGraph:
        return subgraph(self.config.graph, self.failed_nodes, self.failed_links)

    @property
    def control(self) -> ControlSettings:
        return self.config.control

    def live_ders(self) -> list[DerSpec]:
        return [d for node, d in sorted(self.ders.items()) if node not in self.failed_nodes]

    def as_microgrid(self) -> Microgrid:
        return replace(self.config.microgrid, ders=tuple(self.live_ders()), load_mw=self.load_mw)


@dataclass(frozen=True)
class WorldState:
    microgrids: dict[str, MicrogridState]
    order: tuple[str, ...]
    children: dict[str, tuple[tuple[str, NodeId], ...]] = field(default_factory=dict)
    root: str = ""

    def with_microgrid(self, mg: MicrogridState) -> WorldState:
        return replace(self, microgrids={**self.microgrids, mg.id: mg})


def initial_world(scenario: Scenario) -> WorldState:
    microgrids: dict[str, MicrogridState] = {}
    for cfg in scenario.microgrids:
        feeder = cfg.microgrid.feeder
        microgrids[cfg.microgrid.id] = MicrogridState(
            config=cfg,
            ders={d.id: d for d in cfg.microgrid.ders},
            load_mw=cfg.microgrid.load_mw,
            feeder_injections=feeder.injections if feeder is not None else (),
        )
    children: dict[str, list[tuple[str, NodeId]]] = {mg_id: [] for mg_id in microgrids}
    child_ids = set()
    for link in scenario.inter_level_links:
        children[link.parent].append((link.child, link.pcc_node))
        child_ids.add(link.child)
    order = tuple(cfg.microgrid.id for cfg in scenario.microgrids)
    root = next(mg_id for mg_id in order if mg_id not in child_ids)
    return WorldState(
        microgrids=microgrids,
        order=order,
        children={k: tuple(v) for k, v in children.items()},
        root=root,
    )


def apply_fault(world: WorldState, event: FaultEvent) -> WorldState:
    """Return the world after one fault or restoration event."""
    mg = world.microgrids.get(event.microgrid)
    if mg is None:
        raise UnknownTargetError(f"unknown microgrid {event.microgrid!r}")
    base = mg.config.graph

    if event.kind is FaultKind.AGENT_FAIL:
        node = _require_node(event)
        if not base.is_live(node) or node in mg.failed_nodes:
            raise UnknownTargetError(f"agent {node} in {mg.id} is not live")
        remove_node(mg.graph, node)  # LastNodeError when it is the only survivor
        return world.with_microgrid(replace(mg, failed_nodes=mg.failed_nodes | {node}))

    if event.kind is FaultKind.AGENT_RESTORE:
        node = _require_node(event)
        if node not in mg.failed_nodes:
            raise UnknownTargetError(f"agent {node} in {mg.id} has not failed")
        return world.with_microgrid(replace(mg, failed_nodes=mg.failed_nodes - {node}))

    if event.kind is FaultKind.LINK_FAIL:
        edge = _require_edge(event)
        if edge not in base.edges or edge in mg.failed_links:
            raise UnknownTargetError(f"link {edge} in {mg.id} is not up")
        return world.with_microgrid(replace(mg, failed_links=mg.failed_links | {edge}))

    if event.kind is FaultKind.LINK_RESTORE:
        edge = _require_edge(event)
        if edge not in mg.failed_links:
            raise UnknownTargetError(f"link {edge} in {mg.id} has not failed")
        return world.with_microgrid(replace(mg, failed_links=mg.failed_links - {edge}))

    if event.mw is None:
        raise UnknownTargetError("load_step needs an MW delta")
    injections = mg.feeder_injections
    if event.feeder_bus is not None:
        if not 1 <= event.feeder_bus <= len(injections):
            raise UnknownTargetError(f"feeder bus {event.feeder_bus} not in {mg.id}")
        k = event.feeder_bus - 1
        p, q = injections[k]
        injections = injections[:k] + ((p + event.mw, q),) + injections[k + 1 :]
    return world.with_microgrid(
        replace(mg, load_mw=mg.load_mw + event.mw, feeder_injections=injections)
    )


def _require_node(event: FaultEvent) -> NodeId:
    if event.node is None:
        raise UnknownTargetError(f"{event.kind.value} needs a target node")
    return event.node


def _require_edge(event: FaultEvent) -> Edge:
    if event.edge is None:
        raise UnknownTargetError(f"{event.kind.value} needs a target link")
    return normalize_edge(*event.edge)


def deliver_round(messages: Iterable[Edge], channel: ChannelModel, rng: SeededRNG) -> set[Edge]:
    """Drop each link for the whole round, both directions together.

    One draw per link in canonical order, so the delivered set depends only
    on the seed and the set of links.
    """
    delivered: set[Edge] = set()
    for edge in sorted({normalize_edge(i, j) for i, j in messages}):
        if rng.random() >= channel.loss_probability:
            delivered.add(edge)
    return delivered


class Channel:
    """Lossy delivery bound to one simulation's random stream, with counters."""

    def __init__(self, model: ChannelModel, rng: SeededRNG) -> None:
        self.model = model
        self.rng = rng
        self.delivered = 0
        self.lost = 0

    def deliver(self, graph: CommGraph) -> CommGraph:
        links = deliver_round(graph.edges, self.model, self.rng)
        self.delivered += 2 * len(links)
        self.lost += 2 * (len(graph.edges) - len(links))
        return restrict_edges(graph, links)

    def take_counts(self) -> tuple[int, int]:
        counts = (self.delivered, self.lost)
        self.delivered = 0
        self.lost = 0
        return counts


class Simulation:
    """Runs one scenario; holds the world, the random streams and the log."""

    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        self.world = initial_world(scenario)
        root_rng = SeededRNG(scenario.seed)
        self.channel = Channel(scenario.channel, root_rng.fork())
        self.gossip_rng = root_rng.fork()
        self.noise_rng = root_rng.fork()
        self.records: list[RoundRecord] = []
        self.activations: list[ActivationRecord] = []
        self.faults_applied: list[tuple[int, str]] = []
        self.round_residual = 0.0

    @property
    def nominal_frequency(self) -> float:
        return self.world.microgrids[self.world.root].config.microgrid.nominal_frequency

    def run(self) -> SimTrace:
        faults_by_round: dict[int, list[FaultEvent]] = {}
        for event in self.scenario.faults:
            faults_by_round.setdefault(event.at_round, []).append(event)

        for rnd in range(self.scenario.rounds):
            self.round_residual = 0.0
            trigger_tertiary = rnd == 0
            for event in faults_by_round.get(rnd, []):
                self.world = apply_fault(self.world, event)
                self.faults_applied.append((rnd, event.describe()))
                logger.info("round %d: applied %s", rnd, event.describe())
                trigger_tertiary = trigger_tertiary or event.kind in TERTIARY_TRIGGERS

            self._solve_frequency()
            if trigger_tertiary:
                self._tertiary(rnd)
            delta_f, _ = self._solve_frequency()
            self._secondary(rnd, delta_f)
            self.records.append(self._record(rnd))

        limits = self.scenario.limits
        return SimTrace(
            records=tuple(self.records),
            activations=tuple(self.activations),
            faults_applied=tuple(self.faults_applied),
            nominal_frequency_hz=self.nominal_frequency,
            voltage_band_pu=(limits.voltage_min_pu, limits.voltage_max_pu),
            frequency_band_hz=limits.frequency_band_hz,
            restore_tol_hz=limits.restore_tol_hz,
        )

    def _solve_frequency(self) -> tuple[float, dict[tuple[str, NodeId], float]]:
        """Lumped balance of every live DER in the tree against the total load."""
        keys: list[tuple[str, NodeId]] = []
        units: list[DerSpec] = []
        load = 0.0
        for mg_id in self.world.order:
            mg = self.world.microgrids[mg_id]
            load += mg.load_mw
            for der in mg.live_ders():
                units.append(replace(der, id=len(units)))
                keys.append((mg_id, der.id))
        system = Microgrid(
            id="system",
            ders=tuple(units),
            load_mw=load,
            nominal_frequency=self.nominal_frequency,
        )
        delta_f, dispatched = solve_lumped_frequency(system)
        return delta_f, {key: dispatched[k] for k, key in enumerate(keys)}

    def _set_points(self, mg_id: str, setpoints: dict[NodeId, float]) -> None:
        mg = self.world.microgrids[mg_id]
        ders = dict(mg.ders)
        for node, p in setpoints.items():
            ders[node] = ders[node].with_setpoint(p)
        self.world = self.world.with_microgrid(replace(mg, ders=ders))

    def _snapshot(self, mg_ids: Iterable[str]) -> dict[str, float]:
        return {
            f"{mg_id}:{der.label}": der.p_set
            for mg_id in mg_ids
            for der in self.world.microgrids[mg_id].live_ders()
        }

    def _controller_up(self, mg: MicrogridState) -> bool:
        return mg.control.controller_node not in mg.failed_nodes

    def _secondary(self, rnd: int, delta_f: float) -> None:
        due = []
        for mg_id in self.world.order:
            mg = self.world.microgrids[mg_id]
            params = mg.control.secondary
            if params is None or mg.control.architecture is ControlArchitecture.LOCAL:
                continue
            if rnd > 0 and rnd % params.period_rounds == 0:
                due.append(mg_id)

        for mg_id in due:
            mg = self.world.microgrids[mg_id]
            params = mg.control.secondary
            assert params is not None
            measured = {node: delta_f + self._noise(mg) for node in mg.graph.live_nodes()}
            before = self._snapshot([mg_id])
            note = ""
            outcome: SecondaryOutcome | None = None
            try:
                if mg.control.architecture is ControlArchitecture.CENTRALIZED:
                    if not self._controller_up(mg):
                        raise NotConnectedError("central controller is down")
                    outcome = centralized_secondary_update(mg.as_microgrid(), params, measured)
                else:
                    outcome = secondary_update(
                        mg.as_microgrid(),
                        mg.graph,
                        params,
                        measured,
                        deliver=self.channel.deliver,
                        delay_rounds=self.scenario.channel.delay_rounds,
                    )
            except NotConnectedError as e:
                logger.warning("round %d: secondary skipped in %s: %s", rnd, mg_id, e)
                note = f"skipped: {e}"

            report = outcome.report if outcome is not None else None
            if outcome is not None:
                setpoints = {
                    node: mg.ders[node].p_set + corr for node, corr in outcome.corrections.items()
                }
                self._set_points(mg_id, setpoints)
            if report is not None:
                self.round_residual = max(self.round_residual, report.final_residual)
            self.activations.append(
                ActivationRecord(
                    round=rnd,
                    microgrid=mg_id,
                    layer="secondary",
                    before=before,
                    after=self._snapshot([mg_id]),
                    protocol_rounds=report.rounds_used if report is not None else 0,
                    converged=outcome is not None and (report is None or report.converged),
                    note=note,
                )
            )
            if outcome is not None:
                logger.info(
                    "round %d: secondary in %s after %d protocol rounds",
                    rnd,
                    mg_id,
                    self.activations[-1].protocol_rounds,
                )

    def _noise(self, mg: MicrogridState) -> float:
        sigma = mg.control.measurement_noise_hz
        return self.noise_rng.gauss(0.0, sigma) if sigma > 0 else 0.0

    def _dispatch_view(self, mg_id: str) -> tuple[list[DerSpec], dict[NodeId, CouplingProfile]]:
        """Dispatchable agents of a microgrid, coupling agents included as virtual units."""
        mg = self.world.microgrids[mg_id]
        agents = [d for d in mg.live_ders() if is_dispatchable(d)]
        profiles: dict[NodeId, CouplingProfile] = {}
        for child_id, pcc in self.world.children.get(mg_id, ()):
            if pcc in mg.failed_nodes:
                continue
            members, _ = self._dispatch_view(child_id)
            if not members:
                continue
            view = Microgrid(id=child_id, ders=tuple(members), load_mw=0.0)
            profile = aggregate_microgrid(view)
            profiles[pcc] = profile
            agents.append(coupling_agent_der(profile, pcc))
        return agents, profiles

    def _covered(self, mg_id: str) -> set[tuple[str, NodeId]]:
        mg = self.world.microgrids[mg_id]
        covered = {(mg_id, d.id) for d in mg.live_ders() if is_dispatchable(d)}
        for child_id, pcc in self.world.children.get(mg_id, ()):
            if pcc not in mg.failed_nodes:
                covered |= self._covered(child_id)
        return covered

    def _subtree(self, mg_id: str) -> list[str]:
        ids = [mg_id]
        for child_id, _ in self.world.children.get(mg_id, ()):
            ids.extend(self._subtree(child_id))
        return ids

    def _apply_dispatch(self, mg_id: str, dispatch: dict[NodeId, float]) -> None:
        _, profiles = self._dispatch_view(mg_id)
        own = {node: p for node, p in dispatch.items() if node not in profiles}
        self._set_points(mg_id, own)
        for child_id, pcc in self.world.children.get(mg_id, ()):
            if pcc not in profiles or pcc not in dispatch:
                continue
            members = list(profiles[pcc].members)
            split = disaggregate_setpoint(profiles[pcc], members, dispatch[pcc])
            self._apply_dispatch(child_id, split)

    def _tertiary(self, rnd: int) -> None:
        root = self.world.microgrids[self.world.root]
        params = root.control.tertiary
        if params is None or root.control.architecture is ControlArchitecture.LOCAL:
            return

        agents, _ = self._dispatch_view(root.id)
        covered = self._covered(root.id)
        total_load = sum(mg.load_mw for mg in self.world.microgrids.values())
        fixed = sum(
            der.p_set
            for mg_id, mg in self.world.microgrids.items()
            for der in mg.live_ders()
            if (mg_id, der.id) not in covered
        )
        demand = total_load - fixed
        tree = self._subtree(root.id)
        before = self._snapshot(tree)

        note = ""
        converged = False
        protocol_rounds = 0
        try:
            if not agents:
                raise InfeasibleError("no dispatchable agents")
            if root.control.architecture is ControlArchitecture.CENTRALIZED:
                if not self._controller_up(root):
                    raise NotConnectedError("central controller is down")
                dispatch, lam = centralized_dispatch_oracle(agents, demand)
                converged = True
            else:
                _, report = run_tertiary_dispatch(
                    agents,
                    root.graph,
                    demand,
                    params,
                    self.gossip_rng,
                    deliver=self.channel.deliver,
                    delay_rounds=self.scenario.channel.delay_rounds,
                )
                dispatch, lam = report.dispatch, report.lambda_value
                converged = report.converged
                protocol_rounds = report.protocol_rounds
            self._apply_dispatch(root.id, dispatch)
            logger.info("round %d: tertiary dispatch at lambda %.6g", rnd, lam)
        except (NotConnectedError, InfeasibleError) as e:
            logger.warning("round %d: tertiary skipped: %s", rnd, e)
            note = f"skipped: {e}"

        self.activations.append(
            ActivationRecord(
                round=rnd,
                microgrid=root.id,
                layer="tertiary",
                before=before,
                after=self._snapshot(tree),
                protocol_rounds=protocol_rounds,
                converged=converged,
                note=note,
            )
        )

    def _child_output(self, mg_id: str, outputs: dict[tuple[str, NodeId], float]) -> float:
        return sum(p for (owner, _), p in outputs.items() if owner in self._subtree(mg_id))

    def _record(self, rnd: int) -> RoundRecord:
        delta_f, outputs = self._solve_frequency()
        delivered, lost = self.channel.take_counts()
        rows: list[NodeRecord] = []
        all_bus: list[float] = []

        for mg_id in self.world.order:
            mg = self.world.microgrids[mg_id]
            feeder = mg.config.microgrid.feeder
            bus_voltages: list[float] = []
            if feeder is not None:
                local = {node: p for (owner, node), p in outputs.items() if owner == mg_id}
                bus_voltages, _ = solve_feeder_with_droop(
                    feeder.with_injections(mg.feeder_injections), mg.live_ders(), local
                )
                all_bus.extend(bus_voltages)
            pcc_children = {pcc: child for child, pcc in self.world.children.get(mg_id, ())}

            for node in mg.graph.live_nodes():
                if node in pcc_children:
                    child = pcc_children[node]
                    rows.append(
                        NodeRecord(
                            microgrid=mg_id,
                            node=node,
                            voltage_pu=NOMINAL_VOLTAGE_PU,
                            der_name=f"pcc:{child}",
                            p_mw=self._child_output(child, outputs),
                            cost=0.0,
                        )
                    )
                    continue
                der = mg.ders[node]
                p = outputs[(mg_id, node)]
                if feeder is not None and der.feeder_node is not None:
                    voltage = bus_voltages[der.feeder_node - 1]
                elif feeder is not None:
                    voltage = feeder.source_voltage_pu
                else:
                    voltage = NOMINAL_VOLTAGE_PU
                rows.append(
                    NodeRecord(
                        microgrid=mg_id,
                        node=node,
                        voltage_pu=voltage,
                        der_name=der.label,
                        p_mw=p,
                        cost=generation_cost(der, p),
                    )
                )

        active: list[str] = []
        for mg_id in self.world.order:
            mg = self.world.microgrids[mg_id]
            active.extend(f"{mg_id} agent {n} down" for n in sorted(mg.failed_nodes))
            active.extend(f"{mg_id} link {i}-{j} down" for i, j in sorted(mg.failed_links))
        return RoundRecord(
            round=rnd,
            frequency_hz=self.nominal_frequency + delta_f,
            delta_f_hz=delta_f,
            nodes=tuple(rows),
            residual=self.round_residual,
            msgs_delivered=delivered,
            msgs_lost=lost,
            active_faults=tuple(active),
            bus_voltages=tuple(all_bus),
        )


def run_scenario(scenario: Scenario) -> SimTrace:
    """Run every round of a validated scenario; same scenario, same trace."""
    try:
        return Simulation(scenario).run()
    except (UnknownTargetError, LastNodeError) as e:
        raise ValidationFailedError(str(e), ("faults",)) from e
