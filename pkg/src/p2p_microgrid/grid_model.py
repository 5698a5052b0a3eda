"""Electrical physics: droop laws, lumped frequency balance, radial feeder voltages.

Units are fixed: MW, MVAr, Hz and per-unit volts. Active power of a DER is
its net injection into the grid, so a controllable load has a negative
operating range.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from p2p_microgrid.errors import (
    InfeasibleError,
    NoDroopResponseError,
    NonPositiveVoltageError,
    NotDispatchableError,
)
from p2p_microgrid.topology import NodeId

logger = logging.getLogger(__name__)

BISECTION_BOUND_HZ = 5.0
BISECTION_TOL_HZ = 1e-12
BALANCE_TOL_MW = 1e-9
FEEDER_FIXED_POINT_ITERATIONS = 200
FEEDER_FIXED_POINT_TOL_PU = 1e-13


class DerKind(str, Enum):
    GENERATOR = "generator"
    LOAD = "load"
    STORAGE = "storage"


@dataclass(frozen=True)
class DerSpec:
    """Electrical envelope of a DER: setpoint, limits, droop gains and cost."""

    id: NodeId
    kind: DerKind
    p_set: float
    p_min: float
    p_max: float
    droop_gain: float = 0.0
    q_droop_gain: float = 0.0
    cost_a: float = 0.0
    cost_b: float = 0.0
    name: str = ""
    feeder_node: int | None = None

    def __post_init__(self) -> None:
        if not self.p_min <= self.p_set <= self.p_max:
            raise ValueError(
                f"DER {self.label}: need p_min <= p_set <= p_max, "
                f"got {self.p_min} <= {self.p_set} <= {self.p_max}"
            )
        if self.droop_gain < 0 or self.q_droop_gain < 0:
            raise ValueError(f"DER {self.label}: droop gains must be >= 0")
        if self.cost_a < 0:
            raise ValueError(f"DER {self.label}: cost_a must be >= 0")
        if is_dispatchable(self) and self.cost_a <= 0:
            raise ValueError(f"DER {self.label}: dispatchable units need cost_a > 0")

    @property
    def label(self) -> str:
        return self.name or f"der{self.id}"

    def with_setpoint(self, p_set: float) -> DerSpec:
        """Copy with a new setpoint clamped to [p_min, p_max]."""
        return replace(self, p_set=min(max(p_set, self.p_min), self.p_max))


@dataclass(frozen=True)
class FeederSegment:
    resistance_pu: float
    reactance_pu: float


@dataclass(frozen=True)
class FeederModel:
    """Radial feeder: segment k joins bus k-1 to bus k; bus 0 is the source.

    ``injections[k-1]`` is the (P MW, Q MVAr) net withdrawal at bus k;
    negative values are net generation.
    """

    segments: tuple[FeederSegment, ...]
    source_voltage_pu: float = 1.0
    base_mva: float = 1.0
    injections: tuple[tuple[float, float], ...] = field(default=())

    def __post_init__(self) -> None:
        if self.source_voltage_pu <= 0:
            raise ValueError("source_voltage_pu must be positive")
        if self.base_mva <= 0:
            raise ValueError("base_mva must be positive")
        for seg in self.segments:
            if seg.resistance_pu < 0 or seg.reactance_pu < 0:
                raise ValueError("feeder impedances must be >= 0")
        if self.injections and len(self.injections) != len(self.segments):
            raise ValueError(
                f"{len(self.injections)} bus injections for {len(self.segments)} segments"
            )

    @property
    def bus_count(self) -> int:
        return len(self.segments)

    def with_injections(self, injections: Sequence[tuple[float, float]]) -> FeederModel:
        return replace(self, injections=tuple((float(p), float(q)) for p, q in injections))


@dataclass(frozen=True)
class Microgrid:
    id: str
    ders: tuple[DerSpec, ...]
    load_mw: float
    nominal_frequency: float = 50.0
    feeder: FeederModel | None = None

    def der(self, node: NodeId) -> DerSpec:
        for der in self.ders:
            if der.id == node:
                return der
        raise KeyError(f"microgrid {self.id} has no DER at node {node}")


def is_dispatchable(der: DerSpec) -> bool:
    """Generators and storage take part in economic dispatch; loads do not."""
    return der.kind in (DerKind.GENERATOR, DerKind.STORAGE)


def primary_droop_power(der: DerSpec, delta_f: float) -> float:
    """P = clamp(p_set - droop_gain * delta_f, p_min, p_max)."""
    p = der.p_set - der.droop_gain * delta_f
    return min(max(p, der.p_min), der.p_max)


def reactive_droop_power(der: DerSpec, local_voltage_pu: float) -> float:
    """Q = q_droop_gain * (1 - V): absorb when the voltage is high, inject when low."""
    if local_voltage_pu <= 0:
        raise NonPositiveVoltageError(f"voltage must be positive, got {local_voltage_pu}")
    return der.q_droop_gain * (1.0 - local_voltage_pu)


def _total_output(ders: Sequence[DerSpec], delta_f: float) -> float:
    return sum(primary_droop_power(d, delta_f) for d in ders)


def _refine_on_segment(ders: Sequence[DerSpec], load: float, delta_f: float) -> float:
    """Solve the balance exactly on the linear piece active at delta_f."""
    fixed = 0.0
    responsive = 0.0
    offset = 0.0
    for der in ders:
        p = der.p_set - der.droop_gain * delta_f
        if der.droop_gain == 0 or p <= der.p_min or p >= der.p_max:
            fixed += primary_droop_power(der, delta_f)
        else:
            responsive += der.droop_gain
            offset += der.p_set
    if responsive == 0:
        return delta_f
    return (fixed + offset - load) / responsive


def solve_lumped_frequency(mg: Microgrid) -> tuple[float, dict[NodeId, float]]:
    """Find delta_f where the droop response of all DERs meets the load.

    Output is monotone non-increasing in delta_f, so bisection over
    [-BISECTION_BOUND_HZ, +BISECTION_BOUND_HZ] brackets the root; the
    result is then solved exactly on its linear segment.
    """
    ders = mg.ders
    load = mg.load_mw
    total_min = sum(d.p_min for d in ders)
    total_max = sum(d.p_max for d in ders)
    if not total_min - BALANCE_TOL_MW <= load <= total_max + BALANCE_TOL_MW:
        raise InfeasibleError(
            f"load {load:.6g} MW outside capacity [{total_min:.6g}, {total_max:.6g}] MW"
        )

    imbalance = _total_output(ders, 0.0) - load
    if imbalance == 0:
        return 0.0, {d.id: primary_droop_power(d, 0.0) for d in ders}
    if sum(d.droop_gain for d in ders) == 0:
        raise NoDroopResponseError(f"imbalance of {imbalance:.6g} MW but no droop response")

    lo, hi = -BISECTION_BOUND_HZ, BISECTION_BOUND_HZ
    if _total_output(ders, lo) < load - BALANCE_TOL_MW or _total_output(ders, hi) > (
        load + BALANCE_TOL_MW
    ):
        raise InfeasibleError(
            f"load {load:.6g} MW not reachable within +/-{BISECTION_BOUND_HZ} Hz of droop"
        )
    while hi - lo > BISECTION_TOL_HZ:
        mid = 0.5 * (lo + hi)
        if _total_output(ders, mid) > load:
            lo = mid
        else:
            hi = mid

    delta_f = 0.5 * (lo + hi)
    exact = _refine_on_segment(ders, load, delta_f)
    if abs(exact - delta_f) <= 1e3 * BISECTION_TOL_HZ:
        delta_f = exact
    return delta_f, {d.id: primary_droop_power(d, delta_f) for d in ders}


def feeder_voltages(feeder: FeederModel) -> list[float]:
    """Linearised radial drop, one voltage per bus 1..m.

    V_k = V_{k-1} - (R_k * P_down + X_k * Q_down) / V0 with P_down, Q_down the
    net withdrawals at bus k and beyond, in per unit of base_mva.
    """
    m = feeder.bus_count
    if m == 0:
        return []
    injections = feeder.injections or tuple((0.0, 0.0) for _ in range(m))
    p = np.array([pq[0] for pq in injections], dtype=np.float64) / feeder.base_mva
    q = np.array([pq[1] for pq in injections], dtype=np.float64) / feeder.base_mva
    p_down = np.cumsum(p[::-1])[::-1]
    q_down = np.cumsum(q[::-1])[::-1]
    r = np.array([s.resistance_pu for s in feeder.segments], dtype=np.float64)
    x = np.array([s.reactance_pu for s in feeder.segments], dtype=np.float64)
    v0 = feeder.source_voltage_pu
    drops = np.cumsum((r * p_down + x * q_down) / v0)
    return [float(v0 - d) for d in drops]


def solve_feeder_with_droop(
    feeder: FeederModel, ders: Sequence[DerSpec], outputs: dict[NodeId, float]
) -> tuple[list[float], dict[NodeId, float]]:
    """Voltages with DER active outputs and Q-V droop applied at their buses.

    Q depends on V and V on Q; the fixed point is found by iteration from a
    flat profile. Returns the bus voltages and each feeder DER's Q in MVAr.
    """
    base = list(feeder.injections or tuple((0.0, 0.0) for _ in feeder.segments))
    bus_of = {d.id: d.feeder_node for d in ders if d.feeder_node is not None and d.id in outputs}
    on_feeder = [d for d in ders if d.id in bus_of]
    voltages = [feeder.source_voltage_pu] * feeder.bus_count
    reactive: dict[NodeId, float] = {d.id: 0.0 for d in on_feeder}

    for _ in range(FEEDER_FIXED_POINT_ITERATIONS):
        net = [list(pq) for pq in base]
        for der in on_feeder:
            bus = bus_of[der.id] - 1
            net[bus][0] -= outputs[der.id]
            net[bus][1] -= reactive[der.id]
        updated = feeder_voltages(feeder.with_injections([(p, q) for p, q in net]))
        change = max((abs(a - b) for a, b in zip(updated, voltages, strict=True)), default=0.0)
        voltages = updated
        reactive = {d.id: reactive_droop_power(d, voltages[bus_of[d.id] - 1]) for d in on_feeder}
        if change <= FEEDER_FIXED_POINT_TOL_PU:
            break
    else:
        logger.warning("feeder Q-V droop iteration did not settle")
    return voltages, reactive


def marginal_cost(der: DerSpec, p: float) -> float:
    """lambda = cost_a * p + cost_b."""
    if not is_dispatchable(der):
        raise NotDispatchableError(f"DER {der.label} is a {der.kind.value}, not dispatchable")
    return der.cost_a * p + der.cost_b


def generation_cost(der: DerSpec, p: float) -> float:
    """C(p) = a * p^2 / 2 + b * p; zero for non-dispatchable units."""
    if not is_dispatchable(der):
        return 0.0
    return 0.5 * der.cost_a * p * p + der.cost_b * p
