"""Scenario files in; trace CSV and summary JSON out.

Scenario text is strict JSON checked against ``schema/scenario.schema.json``
and then against the cross-reference rules the schema cannot express. Every
error carries the path of the offending field.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any

import jsonschema
from jsonschema.exceptions import best_match

from p2p_microgrid.control import (
    ControlArchitecture,
    ControlSettings,
    SecondaryParams,
    TertiaryParams,
)
from p2p_microgrid.errors import (
    DanglingReferenceError,
    EpsilonOutOfRangeError,
    PathPart,
    ScenarioSyntaxError,
    SchemaViolationError,
    UnknownParameterError,
    ValidationFailedError,
)
from p2p_microgrid.grid_model import (
    DerKind,
    DerSpec,
    FeederModel,
    FeederSegment,
    Microgrid,
    is_dispatchable,
)
from p2p_microgrid.sim import ChannelModel, FaultEvent, FaultKind, SimTrace
from p2p_microgrid.topology import CommGraph, Edge, NodeId, build_graph, normalize_edge

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
SCHEMA_RESOURCE = "schema/scenario.schema.json"
DEFAULT_VOLTAGE_BAND_PU = (0.9, 1.1)
DEFAULT_FREQUENCY_BAND_HZ = 0.2
DEFAULT_RESTORE_TOL_HZ = 1e-6
TRACE_HEADER = (
    "round",
    "freq_hz",
    "node_id",
    "voltage_pu",
    "der_id",
    "p_mw",
    "residual",
    "msgs_delivered",
    "msgs_lost",
)
SWEEP_HEADER = (
    "value",
    "run_dir",
    "final_frequency_hz",
    "min_voltage_pu",
    "max_voltage_pu",
    "total_generation_cost",
    "protocol_rounds",
    "all_converged",
    "msgs_delivered",
    "msgs_lost",
    "voltage_violation",
    "frequency_violation",
)


@dataclass(frozen=True)
class MicrogridConfig:
    """A microgrid together with its communication graph and control settings."""

    microgrid: Microgrid
    graph: CommGraph
    control: ControlSettings = field(default_factory=ControlSettings)


@dataclass(frozen=True)
class InterLevelLink:
    parent: str
    child: str
    pcc_node: NodeId


@dataclass(frozen=True)
class Limits:
    voltage_min_pu: float = DEFAULT_VOLTAGE_BAND_PU[0]
    voltage_max_pu: float = DEFAULT_VOLTAGE_BAND_PU[1]
    frequency_band_hz: float = DEFAULT_FREQUENCY_BAND_HZ
    restore_tol_hz: float = DEFAULT_RESTORE_TOL_HZ


@dataclass(frozen=True)
class Scenario:
    schema_version: str
    seed: int
    rounds: int
    microgrids: tuple[MicrogridConfig, ...]
    inter_level_links: tuple[InterLevelLink, ...] = ()
    channel: ChannelModel = field(default_factory=ChannelModel)
    faults: tuple[FaultEvent, ...] = ()
    limits: Limits = field(default_factory=Limits)

    def microgrid(self, mg_id: str) -> MicrogridConfig:
        for cfg in self.microgrids:
            if cfg.microgrid.id == mg_id:
                return cfg
        raise KeyError(mg_id)


@dataclass(frozen=True)
class FaultRecovery:
    round: int
    fault: str
    rounds_to_restore: int | None


@dataclass(frozen=True)
class ProtocolActivity:
    round: int
    microgrid: str
    layer: str
    protocol_rounds: int
    converged: bool
    note: str = ""


@dataclass(frozen=True)
class SummaryReport:
    """Figures of merit derived from a SimTrace and nothing else."""

    rounds: int
    nominal_frequency_hz: float
    final_frequency_hz: float | None
    min_voltage_pu: float | None
    max_voltage_pu: float | None
    total_generation_cost: float
    fault_recovery: tuple[FaultRecovery, ...]
    protocol_activity: tuple[ProtocolActivity, ...]
    msgs_delivered: int
    msgs_lost: int
    voltage_violation_rounds: int
    frequency_violation_rounds: int

    @property
    def voltage_violation(self) -> bool:
        return self.voltage_violation_rounds > 0

    @property
    def frequency_violation(self) -> bool:
        return self.frequency_violation_rounds > 0


@dataclass(frozen=True)
class TraceRow:
    round: int
    freq_hz: float
    node_id: str
    voltage_pu: float
    der_id: str
    p_mw: float
    residual: float
    msgs_delivered: int
    msgs_lost: int


@dataclass(frozen=True)
class TraceDigest:
    rounds: int
    rows: int
    nodes: int
    final_freq_hz: float | None
    min_freq_hz: float | None
    max_freq_hz: float | None
    min_voltage_pu: float | None
    max_voltage_pu: float | None
    max_residual: float
    msgs_delivered: int
    msgs_lost: int


@lru_cache(maxsize=1)
def load_schema() -> dict[str, Any]:
    """The scenario JSON Schema shipped as package data."""
    text = resources.files("p2p_microgrid").joinpath(SCHEMA_RESOURCE).read_text(encoding="utf-8")
    schema: dict[str, Any] = json.loads(text)
    return schema


def _reject_constant(name: str) -> float:
    raise ValueError(f"{name} is not a valid JSON number")


def _load_json(text: bytes) -> Any:
    try:
        decoded = text.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ScenarioSyntaxError(f"not UTF-8 text: {e.reason} at byte {e.start}") from e
    try:
        return json.loads(decoded, parse_constant=_reject_constant)
    except json.JSONDecodeError as e:
        raise ScenarioSyntaxError(
            f"invalid JSON: {e.msg} (line {e.lineno}, column {e.colno})"
        ) from e
    except ValueError as e:
        raise ScenarioSyntaxError(str(e)) from e


def validate_document(data: Any) -> None:
    """Check raw JSON data against the scenario schema."""
    validator = jsonschema.Draft202012Validator(load_schema())
    error = best_match(validator.iter_errors(data))
    if error is not None:
        raise SchemaViolationError(error.message, tuple(error.absolute_path))


def parse_scenario(text: bytes) -> Scenario:
    """Strict parse of scenario bytes into a validated Scenario."""
    scenario = scenario_from_dict(_load_json(text))
    logger.debug(
        "parsed scenario: %d microgrids, %d rounds, %d faults",
        len(scenario.microgrids),
        scenario.rounds,
        len(scenario.faults),
    )
    return scenario


def scenario_from_dict(data: Any) -> Scenario:
    validate_document(data)

    configs: dict[str, MicrogridConfig] = {}
    for k, raw in enumerate(data["microgrids"]):
        path: tuple[PathPart, ...] = ("microgrids", k)
        if raw["id"] in configs:
            raise SchemaViolationError(f"duplicate microgrid id {raw['id']!r}", (*path, "id"))
        configs[raw["id"]] = _build_microgrid(raw, path)

    links = tuple(
        _build_link(raw, ("inter_level_links", k), configs)
        for k, raw in enumerate(data.get("inter_level_links", []))
    )
    root = _check_tree(list(configs), links)
    _check_coverage(list(configs.values()), links)
    _check_control(list(configs.values()), links, root)

    faults = tuple(
        _build_fault(raw, ("faults", k), configs) for k, raw in enumerate(data.get("faults", []))
    )
    _check_fault_sequence(faults, configs)

    channel_raw = data.get("channel", {})
    limits_raw = data.get("limits", {})
    limits = Limits(
        voltage_min_pu=float(limits_raw.get("voltage_min_pu", DEFAULT_VOLTAGE_BAND_PU[0])),
        voltage_max_pu=float(limits_raw.get("voltage_max_pu", DEFAULT_VOLTAGE_BAND_PU[1])),
        frequency_band_hz=float(limits_raw.get("frequency_band_hz", DEFAULT_FREQUENCY_BAND_HZ)),
        restore_tol_hz=float(limits_raw.get("restore_tol_hz", DEFAULT_RESTORE_TOL_HZ)),
    )
    if limits.voltage_min_pu >= limits.voltage_max_pu:
        raise SchemaViolationError(
            "voltage_min_pu must be below voltage_max_pu", ("limits", "voltage_min_pu")
        )

    return Scenario(
        schema_version=data["schema_version"],
        seed=data["seed"],
        rounds=data["rounds"],
        microgrids=tuple(configs.values()),
        inter_level_links=links,
        channel=ChannelModel(
            loss_probability=float(channel_raw.get("loss_probability", 0.0)),
            delay_rounds=channel_raw.get("delay_rounds", 0),
        ),
        faults=faults,
        limits=limits,
    )


def _build_microgrid(raw: Mapping[str, Any], path: tuple[PathPart, ...]) -> MicrogridConfig:
    graph = _build_graph(raw["graph"], (*path, "graph"))
    n = graph.node_count

    feeder = None
    feeder_raw = raw.get("feeder")
    if feeder_raw is not None:
        segments = feeder_raw["segments"]
        feeder = FeederModel(
            segments=tuple(
                FeederSegment(float(s["resistance_pu"]), float(s["reactance_pu"])) for s in segments
            ),
            source_voltage_pu=float(feeder_raw.get("source_voltage_pu", 1.0)),
            base_mva=float(feeder_raw.get("base_mva", 1.0)),
            injections=tuple(
                (float(s.get("p_mw", 0.0)), float(s.get("q_mvar", 0.0))) for s in segments
            ),
        )

    ders: list[DerSpec] = []
    seen: set[NodeId] = set()
    for d, der_raw in enumerate(raw["ders"]):
        der_path = (*path, "ders", d)
        node = der_raw["id"]
        if node >= n:
            raise DanglingReferenceError(
                f"DER id {node} is not a node of the graph ({n} nodes)", (*der_path, "id")
            )
        if node in seen:
            raise SchemaViolationError(f"node {node} carries more than one DER", (*der_path, "id"))
        seen.add(node)
        feeder_node = der_raw.get("feeder_node")
        if feeder_node is not None and (feeder is None or feeder_node > feeder.bus_count):
            buses = 0 if feeder is None else feeder.bus_count
            raise DanglingReferenceError(
                f"feeder bus {feeder_node} does not exist ({buses} buses)",
                (*der_path, "feeder_node"),
            )
        try:
            ders.append(
                DerSpec(
                    id=node,
                    kind=DerKind(der_raw["kind"]),
                    p_set=float(der_raw["p_set"]),
                    p_min=float(der_raw["p_min"]),
                    p_max=float(der_raw["p_max"]),
                    droop_gain=float(der_raw.get("droop_gain", 0.0)),
                    q_droop_gain=float(der_raw.get("q_droop_gain", 0.0)),
                    cost_a=float(der_raw.get("cost_a", 0.0)),
                    cost_b=float(der_raw.get("cost_b", 0.0)),
                    name=der_raw.get("name", ""),
                    feeder_node=feeder_node,
                )
            )
        except ValueError as e:
            raise SchemaViolationError(str(e), der_path) from e

    microgrid = Microgrid(
        id=raw["id"],
        ders=tuple(ders),
        load_mw=float(raw["load_mw"]),
        nominal_frequency=float(raw.get("nominal_frequency_hz", 50.0)),
        feeder=feeder,
    )
    control = _build_control(raw.get("control", {}), (*path, "control"), n)
    return MicrogridConfig(microgrid=microgrid, graph=graph, control=control)


def _build_graph(raw: Mapping[str, Any], path: tuple[PathPart, ...]) -> CommGraph:
    n = raw["node_count"]
    edges: list[Edge] = []
    for e, (i, j) in enumerate(raw["edges"]):
        for node in (i, j):
            if node >= n:
                raise DanglingReferenceError(
                    f"edge references node {node}, graph has {n} nodes", (*path, "edges", e)
                )
        if i == j:
            raise SchemaViolationError(f"self-loop on node {i}", (*path, "edges", e))
        edges.append((i, j))
    epsilon = raw.get("epsilon")
    try:
        return build_graph(n, edges, None if epsilon is None else float(epsilon))
    except EpsilonOutOfRangeError as e:
        raise SchemaViolationError(str(e), (*path, "epsilon")) from e


def _build_control(
    raw: Mapping[str, Any], path: tuple[PathPart, ...], node_count: int
) -> ControlSettings:
    controller = raw.get("controller_node", 0)
    if controller >= node_count:
        raise DanglingReferenceError(
            f"controller node {controller} is not a node of the graph", (*path, "controller_node")
        )
    secondary = None
    sec = raw.get("secondary")
    if sec is not None:
        secondary = SecondaryParams(
            period_rounds=sec.get("period_rounds", 20),
            gain=float(sec.get("gain", 1.0)),
            consensus_tol=float(sec.get("consensus_tol", 1e-12)),
            consensus_max_rounds=sec.get("consensus_max_rounds", 100_000),
        )
    tertiary = None
    ter = raw.get("tertiary")
    if ter is not None:
        step = ter.get("step_size")
        tertiary = TertiaryParams(
            step_size=None if step is None else float(step),
            tol=float(ter.get("tol", 1e-9)),
            max_iterations=ter.get("max_iterations"),
            consensus_tol=float(ter.get("consensus_tol", 1e-12)),
            consensus_max_rounds=ter.get("consensus_max_rounds", 100_000),
            push_sum_tol=float(ter.get("push_sum_tol", 1e-12)),
            push_sum_max_rounds=ter.get("push_sum_max_rounds", 20_000),
        )
    return ControlSettings(
        architecture=ControlArchitecture(raw.get("architecture", "peer_to_peer")),
        secondary=secondary,
        tertiary=tertiary,
        measurement_noise_hz=float(raw.get("measurement_noise_hz", 0.0)),
        controller_node=controller,
    )


def _build_link(
    raw: Mapping[str, Any], path: tuple[PathPart, ...], configs: Mapping[str, MicrogridConfig]
) -> InterLevelLink:
    for role in ("parent", "child"):
        if raw[role] not in configs:
            raise DanglingReferenceError(f"unknown microgrid {raw[role]!r}", (*path, role))
    parent = configs[raw["parent"]]
    if raw["pcc_node"] >= parent.graph.node_count:
        raise DanglingReferenceError(
            f"pcc node {raw['pcc_node']} is not a node of {raw['parent']}", (*path, "pcc_node")
        )
    return InterLevelLink(parent=raw["parent"], child=raw["child"], pcc_node=raw["pcc_node"])


def _check_tree(ids: Sequence[str], links: Sequence[InterLevelLink]) -> str:
    """Return the root microgrid id; raise unless the links form one tree."""
    parent_of: dict[str, str] = {}
    for k, link in enumerate(links):
        if link.child in parent_of or link.child == link.parent:
            raise SchemaViolationError("levels must form a tree", ("inter_level_links", k))
        parent_of[link.child] = link.parent
    roots = [mg_id for mg_id in ids if mg_id not in parent_of]
    if len(roots) != 1:
        raise SchemaViolationError("levels must form a tree", ("inter_level_links",))
    for mg_id in ids:
        visited = {mg_id}
        current = mg_id
        while current in parent_of:
            current = parent_of[current]
            if current in visited:
                raise SchemaViolationError("levels must form a tree", ("inter_level_links",))
            visited.add(current)
    return roots[0]


def _check_coverage(configs: Sequence[MicrogridConfig], links: Sequence[InterLevelLink]) -> None:
    """Every graph node hosts exactly one DER or one coupling agent."""
    pcc_of: dict[str, set[NodeId]] = {cfg.microgrid.id: set() for cfg in configs}
    for k, link in enumerate(links):
        pccs = pcc_of[link.parent]
        if link.pcc_node in pccs:
            raise SchemaViolationError(
                f"node {link.pcc_node} of {link.parent} couples two microgrids",
                ("inter_level_links", k, "pcc_node"),
            )
        pccs.add(link.pcc_node)

    for m, cfg in enumerate(configs):
        der_nodes = {d.id for d in cfg.microgrid.ders}
        pccs = pcc_of[cfg.microgrid.id]
        for node in range(cfg.graph.node_count):
            if node in der_nodes and node in pccs:
                raise SchemaViolationError(
                    f"node {node} carries both a DER and a coupling agent",
                    ("microgrids", m, "graph"),
                )
            if node not in der_nodes and node not in pccs:
                raise SchemaViolationError(
                    f"node {node} has no DER or coupling agent", ("microgrids", m, "graph")
                )


def _check_control(
    configs: Sequence[MicrogridConfig], links: Sequence[InterLevelLink], root: str
) -> None:
    parents = {link.parent for link in links}
    for m, cfg in enumerate(configs):
        control = cfg.control
        path: tuple[PathPart, ...] = ("microgrids", m, "control")
        if control.tertiary is not None and cfg.microgrid.id != root:
            raise SchemaViolationError(
                "tertiary control runs from the root microgrid only", (*path, "tertiary")
            )
        if control.architecture is ControlArchitecture.LOCAL:
            continue
        has_units = any(is_dispatchable(d) for d in cfg.microgrid.ders)
        if control.secondary is not None and not has_units:
            raise SchemaViolationError(
                "secondary control needs at least one dispatchable DER", (*path, "secondary")
            )
        if control.tertiary is not None and not has_units and cfg.microgrid.id not in parents:
            raise SchemaViolationError(
                "tertiary control needs at least one dispatchable DER", (*path, "tertiary")
            )


def _build_fault(
    raw: Mapping[str, Any], path: tuple[PathPart, ...], configs: Mapping[str, MicrogridConfig]
) -> FaultEvent:
    mg_id = raw["microgrid"]
    if mg_id not in configs:
        raise DanglingReferenceError(f"unknown microgrid {mg_id!r}", (*path, "microgrid"))
    cfg = configs[mg_id]

    node = raw.get("node")
    if node is not None and node >= cfg.graph.node_count:
        raise DanglingReferenceError(f"node {node} is not a node of {mg_id}", (*path, "node"))
    edge = None
    if raw.get("edge") is not None:
        edge = normalize_edge(*raw["edge"])
        if edge not in cfg.graph.edges:
            raise DanglingReferenceError(
                f"link {edge[0]}-{edge[1]} is not in the graph of {mg_id}", (*path, "edge")
            )
    bus = raw.get("feeder_bus")
    feeder = cfg.microgrid.feeder
    if bus is not None and (feeder is None or bus > feeder.bus_count):
        raise DanglingReferenceError(
            f"feeder bus {bus} does not exist in {mg_id}", (*path, "feeder_bus")
        )
    mw = raw.get("mw")
    return FaultEvent(
        at_round=raw["at_round"],
        kind=FaultKind(raw["kind"]),
        microgrid=mg_id,
        node=node,
        edge=edge,
        mw=None if mw is None else float(mw),
        feeder_bus=bus,
    )


def _check_fault_sequence(
    faults: Sequence[FaultEvent], configs: Mapping[str, MicrogridConfig]
) -> None:
    """Replay agent and link states in schedule order; reject impossible events."""
    down_nodes: dict[str, set[NodeId]] = {mg_id: set() for mg_id in configs}
    down_links: dict[str, set[Edge]] = {mg_id: set() for mg_id in configs}
    order = sorted(range(len(faults)), key=lambda k: faults[k].at_round)
    for k in order:
        event = faults[k]
        path: tuple[PathPart, ...] = ("faults", k)
        nodes = down_nodes[event.microgrid]
        links = down_links[event.microgrid]
        if event.kind is FaultKind.AGENT_FAIL and event.node is not None:
            if event.node in nodes:
                raise SchemaViolationError(f"agent {event.node} is already down", path)
            if len(nodes) + 1 >= configs[event.microgrid].graph.node_count:
                raise SchemaViolationError(f"agent {event.node} is the last live agent", path)
            nodes.add(event.node)
        elif event.kind is FaultKind.AGENT_RESTORE and event.node is not None:
            if event.node not in nodes:
                raise SchemaViolationError(f"agent {event.node} is not down", path)
            nodes.remove(event.node)
        elif event.kind is FaultKind.LINK_FAIL and event.edge is not None:
            if event.edge in links:
                raise SchemaViolationError(f"link {event.edge} is already down", path)
            links.add(event.edge)
        elif event.kind is FaultKind.LINK_RESTORE and event.edge is not None:
            if event.edge not in links:
                raise SchemaViolationError(f"link {event.edge} is not down", path)
            links.remove(event.edge)


def scenario_to_dict(scenario: Scenario) -> dict[str, Any]:
    """Canonical JSON-ready form with every optional field spelled out."""
    return {
        "schema_version": scenario.schema_version,
        "seed": scenario.seed,
        "rounds": scenario.rounds,
        "channel": {
            "loss_probability": scenario.channel.loss_probability,
            "delay_rounds": scenario.channel.delay_rounds,
        },
        "limits": {
            "voltage_min_pu": scenario.limits.voltage_min_pu,
            "voltage_max_pu": scenario.limits.voltage_max_pu,
            "frequency_band_hz": scenario.limits.frequency_band_hz,
            "restore_tol_hz": scenario.limits.restore_tol_hz,
        },
        "microgrids": [_microgrid_to_dict(cfg) for cfg in scenario.microgrids],
        "inter_level_links": [
            {"parent": link.parent, "child": link.child, "pcc_node": link.pcc_node}
            for link in scenario.inter_level_links
        ],
        "faults": [_fault_to_dict(event) for event in scenario.faults],
    }


def _microgrid_to_dict(cfg: MicrogridConfig) -> dict[str, Any]:
    mg = cfg.microgrid
    feeder = None
    if mg.feeder is not None:
        feeder = {
            "source_voltage_pu": mg.feeder.source_voltage_pu,
            "base_mva": mg.feeder.base_mva,
            "segments": [
                {
                    "resistance_pu": seg.resistance_pu,
                    "reactance_pu": seg.reactance_pu,
                    "p_mw": p,
                    "q_mvar": q,
                }
                for seg, (p, q) in zip(mg.feeder.segments, mg.feeder.injections, strict=True)
            ],
        }
    control = cfg.control
    secondary = None
    if control.secondary is not None:
        secondary = {
            "period_rounds": control.secondary.period_rounds,
            "gain": control.secondary.gain,
            "consensus_tol": control.secondary.consensus_tol,
            "consensus_max_rounds": control.secondary.consensus_max_rounds,
        }
    tertiary = None
    if control.tertiary is not None:
        tertiary = {
            "step_size": control.tertiary.step_size,
            "tol": control.tertiary.tol,
            "max_iterations": control.tertiary.max_iterations,
            "consensus_tol": control.tertiary.consensus_tol,
            "consensus_max_rounds": control.tertiary.consensus_max_rounds,
            "push_sum_tol": control.tertiary.push_sum_tol,
            "push_sum_max_rounds": control.tertiary.push_sum_max_rounds,
        }
    return {
        "id": mg.id,
        "nominal_frequency_hz": mg.nominal_frequency,
        "load_mw": mg.load_mw,
        "ders": [_der_to_dict(der) for der in mg.ders],
        "graph": {
            "node_count": cfg.graph.node_count,
            "edges": [list(edge) for edge in sorted(cfg.graph.edges)],
            "epsilon": cfg.graph.epsilon,
        },
        "feeder": feeder,
        "control": {
            "architecture": control.architecture.value,
            "controller_node": control.controller_node,
            "measurement_noise_hz": control.measurement_noise_hz,
            "secondary": secondary,
            "tertiary": tertiary,
        },
    }


def _der_to_dict(der: DerSpec) -> dict[str, Any]:
    out: dict[str, Any] = {
        "id": der.id,
        "kind": der.kind.value,
        "p_set": der.p_set,
        "p_min": der.p_min,
        "p_max": der.p_max,
        "droop_gain": der.droop_gain,
        "q_droop_gain": der.q_droop_gain,
        "cost_a": der.cost_a,
        "cost_b": der.cost_b,
        "feeder_node": der.feeder_node,
    }
    if der.name:
        out["name"] = der.name
    return out


def _fault_to_dict(event: FaultEvent) -> dict[str, Any]:
    out: dict[str, Any] = {
        "at_round": event.at_round,
        "kind": event.kind.value,
        "microgrid": event.microgrid,
    }
    if event.node is not None:
        out["node"] = event.node
    if event.edge is not None:
        out["edge"] = list(event.edge)
    if event.mw is not None:
        out["mw"] = event.mw
    if event.feeder_bus is not None:
        out["feeder_bus"] = event.feeder_bus
    return out


def _dump_json(data: Any) -> bytes:
    return (json.dumps(data, indent=2, sort_keys=True) + "\n").encode("utf-8")


def serialize_scenario(scenario: Scenario) -> bytes:
    return _dump_json(scenario_to_dict(scenario))


def set_parameter(data: Mapping[str, Any], dotted: str, value: Any) -> dict[str, Any]:
    """Copy of scenario data with the field at a dotted path replaced.

    List elements are addressed by index or, for lists of objects with an
    ``id``, by that id: ``microgrids.main.graph.epsilon``.
    """
    parts = dotted.split(".")
    if not dotted or any(not part for part in parts):
        raise UnknownParameterError(f"unknown parameter {dotted!r}", tuple(parts))
    root = copy.deepcopy(dict(data))
    node: Any = root
    walked: list[PathPart] = []
    for k, part in enumerate(parts):
        key: PathPart | None
        if isinstance(node, dict):
            key = part if part in node else None
        elif isinstance(node, list):
            key = _list_key(node, part)
        else:
            key = None
        if key is None:
            raise UnknownParameterError(f"unknown parameter {dotted!r}", (*walked, part))
        walked.append(key)
        if k == len(parts) - 1:
            node[key] = value
        else:
            node = node[key]
    return root


def _list_key(items: list[Any], part: str) -> int | None:
    if part.isdigit() and int(part) < len(items):
        return int(part)
    for k, item in enumerate(items):
        if isinstance(item, dict) and item.get("id") == part:
            return k
    return None


def format_number(value: float) -> str:
    """Fixed 12-decimal rendering; negative zero prints as zero."""
    text = f"{value:.12f}"
    if float(text) == 0.0:
        return f"{0.0:.12f}"
    return text


def format_residual(value: float) -> str:
    return f"{value:.11e}"


def node_id(microgrid: str, node: NodeId) -> str:
    return f"{microgrid}:{node}"


def write_trace(trace: SimTrace) -> tuple[bytes, bytes]:
    """Render trace.csv and summary.json, byte-stable for equal traces."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for record in trace.records:
        for row in record.nodes:
            writer.writerow(
                [
                    record.round,
                    format_number(record.frequency_hz),
                    node_id(row.microgrid, row.node),
                    format_number(row.voltage_pu),
                    row.der_name,
                    format_number(row.p_mw),
                    format_residual(record.residual),
                    record.msgs_delivered,
                    record.msgs_lost,
                ]
            )
    return buffer.getvalue().encode("utf-8"), summary_to_json(summarize(trace))


def summarize(trace: SimTrace) -> SummaryReport:
    records = trace.records
    voltages_by_round = [
        [row.voltage_pu for row in record.nodes] + list(record.bus_voltages) for record in records
    ]
    all_voltages = [v for per_round in voltages_by_round for v in per_round]
    low, high = trace.voltage_band_pu

    recovery = []
    for at_round, description in trace.faults_applied:
        restored = next(
            (
                record.round - at_round
                for record in records
                if record.round >= at_round and abs(record.delta_f_hz) <= trace.restore_tol_hz
            ),
            None,
        )
        recovery.append(
            FaultRecovery(round=at_round, fault=description, rounds_to_restore=restored)
        )

    final = records[-1] if records else None
    return SummaryReport(
        rounds=len(records),
        nominal_frequency_hz=trace.nominal_frequency_hz,
        final_frequency_hz=final.frequency_hz if final is not None else None,
        min_voltage_pu=min(all_voltages) if all_voltages else None,
        max_voltage_pu=max(all_voltages) if all_voltages else None,
        total_generation_cost=sum(row.cost for row in final.nodes) if final is not None else 0.0,
        fault_recovery=tuple(recovery),
        protocol_activity=tuple(
            ProtocolActivity(
                round=a.round,
                microgrid=a.microgrid,
                layer=a.layer,
                protocol_rounds=a.protocol_rounds,
                converged=a.converged,
                note=a.note,
            )
            for a in trace.activations
        ),
        msgs_delivered=sum(record.msgs_delivered for record in records),
        msgs_lost=sum(record.msgs_lost for record in records),
        voltage_violation_rounds=sum(
            1 for per_round in voltages_by_round if any(not low <= v <= high for v in per_round)
        ),
        frequency_violation_rounds=sum(
            1 for record in records if abs(record.delta_f_hz) > trace.frequency_band_hz
        ),
    )


def summary_to_dict(summary: SummaryReport) -> dict[str, Any]:
    return {
        "rounds": summary.rounds,
        "nominal_frequency_hz": summary.nominal_frequency_hz,
        "final_frequency_hz": summary.final_frequency_hz,
        "min_voltage_pu": summary.min_voltage_pu,
        "max_voltage_pu": summary.max_voltage_pu,
        "total_generation_cost": summary.total_generation_cost,
        "fault_recovery": [
            {"round": f.round, "fault": f.fault, "rounds_to_restore": f.rounds_to_restore}
            for f in summary.fault_recovery
        ],
        "protocol_activity": [
            {
                "round": a.round,
                "microgrid": a.microgrid,
                "layer": a.layer,
                "protocol_rounds": a.protocol_rounds,
                "converged": a.converged,
                "note": a.note,
            }
            for a in summary.protocol_activity
        ],
        "msgs_delivered": summary.msgs_delivered,
        "msgs_lost": summary.msgs_lost,
        "voltage_violation": summary.voltage_violation,
        "frequency_violation": summary.frequency_violation,
        "voltage_violation_rounds": summary.voltage_violation_rounds,
        "frequency_violation_rounds": summary.frequency_violation_rounds,
    }


def summary_to_json(summary: SummaryReport) -> bytes:
    return _dump_json(summary_to_dict(summary))


def parse_summary(text: bytes) -> SummaryReport:
    data = _load_json(text)
    try:
        return SummaryReport(
            rounds=data["rounds"],
            nominal_frequency_hz=data["nominal_frequency_hz"],
            final_frequency_hz=data["final_frequency_hz"],
            min_voltage_pu=data["min_voltage_pu"],
            max_voltage_pu=data["max_voltage_pu"],
            total_generation_cost=data["total_generation_cost"],
            fault_recovery=tuple(
                FaultRecovery(f["round"], f["fault"], f["rounds_to_restore"])
                for f in data["fault_recovery"]
            ),
            protocol_activity=tuple(
                ProtocolActivity(
                    a["round"],
                    a["microgrid"],
                    a["layer"],
                    a["protocol_rounds"],
                    a["converged"],
                    a["note"],
                )
                for a in data["protocol_activity"]
            ),
            msgs_delivered=data["msgs_delivered"],
            msgs_lost=data["msgs_lost"],
            voltage_violation_rounds=data["voltage_violation_rounds"],
            frequency_violation_rounds=data["frequency_violation_rounds"],
        )
    except (KeyError, TypeError) as e:
        raise SchemaViolationError(f"malformed summary: missing or bad field {e}") from e


def read_trace(text: bytes) -> list[TraceRow]:
    """Parse trace.csv bytes back into rows."""
    try:
        decoded = text.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ScenarioSyntaxError(f"trace is not UTF-8 text: {e.reason}") from e
    reader = csv.reader(io.StringIO(decoded))
    header = next(reader, None)
    if header is None or tuple(header) != TRACE_HEADER:
        raise ValidationFailedError("unexpected trace header", ("line", 1))
    rows: list[TraceRow] = []
    for line, fields in enumerate(reader, start=2):
        if len(fields) != len(TRACE_HEADER):
            raise ValidationFailedError(
                f"expected {len(TRACE_HEADER)} fields, got {len(fields)}", ("line", line)
            )
        try:
            rows.append(
                TraceRow(
                    round=int(fields[0]),
                    freq_hz=float(fields[1]),
                    node_id=fields[2],
                    voltage_pu=float(fields[3]),
                    der_id=fields[4],
                    p_mw=float(fields[5]),
                    residual=float(fields[6]),
                    msgs_delivered=int(fields[7]),
                    msgs_lost=int(fields[8]),
                )
            )
        except ValueError as e:
            raise ValidationFailedError(str(e), ("line", line)) from e
    return rows


def digest_trace(rows: Sequence[TraceRow]) -> TraceDigest:
    """Per-run figures recoverable from the CSV alone."""
    per_round: dict[int, TraceRow] = {}
    for row in rows:
        per_round.setdefault(row.round, row)
    freqs = [row.freq_hz for row in per_round.values()]
    voltages = [row.voltage_pu for row in rows]
    last = per_round[max(per_round)] if per_round else None
    return TraceDigest(
        rounds=len(per_round),
        rows=len(rows),
        nodes=len({row.node_id for row in rows}),
        final_freq_hz=last.freq_hz if last is not None else None,
        min_freq_hz=min(freqs) if freqs else None,
        max_freq_hz=max(freqs) if freqs else None,
        min_voltage_pu=min(voltages) if voltages else None,
        max_voltage_pu=max(voltages) if voltages else None,
        max_residual=max((row.residual for row in per_round.values()), default=0.0),
        msgs_delivered=sum(row.msgs_delivered for row in per_round.values()),
        msgs_lost=sum(row.msgs_lost for row in per_round.values()),
    )


def sweep_label(index: int, value: Any) -> str:
    """Directory name for one sweep value, e.g. ``01_0.2``."""
    text = re.sub(r"[^A-Za-z0-9_.-]+", "_", json.dumps(value)).strip("_") or "value"
    return f"{index:02d}_{text}"


def sweep_row(value: Any, run_dir: str, summary: SummaryReport) -> list[str]:
    def opt(x: float | None) -> str:
        return "" if x is None else format_number(x)

    return [
        json.dumps(value),
        run_dir,
        opt(summary.final_frequency_hz),
        opt(summary.min_voltage_pu),
        opt(summary.max_voltage_pu),
        format_number(summary.total_generation_cost),
        str(sum(a.protocol_rounds for a in summary.protocol_activity)),
        str(all(a.converged for a in summary.protocol_activity)).lower(),
        str(summary.msgs_delivered),
        str(summary.msgs_lost),
        str(summary.voltage_violation).lower(),
        str(summary.frequency_violation).lower(),
    ]


def write_sweep(rows: Sequence[Sequence[str]]) -> bytes:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    writer.writerows(rows)
    return buffer.getvalue().encode("utf-8")
