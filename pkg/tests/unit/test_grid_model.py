"""Unit tests for droop laws, lumped frequency and feeder voltages."""

import pytest

from p2p_microgrid.errors import (
    InfeasibleError,
    NoDroopResponseError,
    NonPositiveVoltageError,
    NotDispatchableError,
)
from p2p_microgrid.grid_model import (
    DerKind,
    DerSpec,
    FeederModel,
    FeederSegment,
    Microgrid,
    feeder_voltages,
    generation_cost,
    marginal_cost,
    primary_droop_power,
    reactive_droop_power,
    solve_feeder_with_droop,
    solve_lumped_frequency,
)


def generator(node: int, p_set: float = 4.0, p_max: float = 10.0, droop: float = 20.0) -> DerSpec:
    """Build a generator with unit cost curve.

    Args:
        node: Node id
        p_set: Setpoint in MW
        p_max: Upper limit in MW
        droop: Droop gain in MW/Hz

    Returns:
        DerSpec for the generator
    """
    return DerSpec(
        id=node,
        kind=DerKind.GENERATOR,
        p_set=p_set,
        p_min=0.0,
        p_max=p_max,
        droop_gain=droop,
        cost_a=1.0,
    )


def one_segment_feeder(injection_mw: float) -> FeederModel:
    """Single segment with R = X = 0.01 pu and one withdrawal at bus 1."""
    return FeederModel(
        segments=(FeederSegment(0.01, 0.01),),
        injections=((injection_mw, 0.0),),
    )


class TestDerSpec:
    """Tests for DerSpec validation."""

    def test_setpoint_outside_limits(self) -> None:
        """p_set above p_max is rejected."""
        with pytest.raises(ValueError, match="p_min <= p_set <= p_max"):
            generator(0, p_set=12.0)

    def test_dispatchable_needs_positive_cost(self) -> None:
        """A generator with cost_a = 0 is rejected."""
        with pytest.raises(ValueError, match="cost_a > 0"):
            DerSpec(id=0, kind=DerKind.GENERATOR, p_set=0.0, p_min=0.0, p_max=1.0)

    def test_load_needs_no_cost(self) -> None:
        """A load without cost curve is fine."""
        der = DerSpec(id=0, kind=DerKind.LOAD, p_set=-1.0, p_min=-2.0, p_max=0.0)

        assert der.label == "der0"

    def test_with_setpoint_clamps(self) -> None:
        """with_setpoint keeps the new value inside the limits."""
        der = generator(0)

        assert der.with_setpoint(15.0).p_set == 10.0
        assert der.with_setpoint(-1.0).p_set == 0.0
        assert der.with_setpoint(6.5).p_set == 6.5


class TestDroop:
    """Tests for primary and reactive droop."""

    def test_primary_droop_example(self) -> None:
        """p_set 4, droop 20, delta_f -0.05 gives 5.0."""
        assert primary_droop_power(generator(0), -0.05) == pytest.approx(5.0)

    def test_primary_droop_clamps(self) -> None:
        """With p_max 4.5 the same deviation is clamped."""
        assert primary_droop_power(generator(0, p_max=4.5), -0.05) == 4.5

    def test_primary_droop_monotone(self) -> None:
        """Output never rises with frequency."""
        der = generator(0)
        steps = [k / 100 for k in range(-100, 101)]
        outputs = [primary_droop_power(der, df) for df in steps]

        assert all(a >= b for a, b in zip(outputs, outputs[1:], strict=False))

    def test_reactive_droop_examples(self) -> None:
        """Gain 10: V 1.0 -> 0, V 1.02 -> -0.2, V 0.98 -> +0.2."""
        der = DerSpec(
            id=0, kind=DerKind.LOAD, p_set=0.0, p_min=0.0, p_max=0.0, q_droop_gain=10.0
        )

        assert reactive_droop_power(der, 1.0) == 0.0
        assert reactive_droop_power(der, 1.02) == pytest.approx(-0.2)
        assert reactive_droop_power(der, 0.98) == pytest.approx(0.2)

    @pytest.mark.parametrize("voltage", [0.0, -0.5])
    def test_reactive_droop_non_positive_voltage(self, voltage: float) -> None:
        """A zero or negative voltage is a measurement error."""
        with pytest.raises(NonPositiveVoltageError):
            reactive_droop_power(generator(0), voltage)


class TestLumpedFrequency:
    """Tests for solve_lumped_frequency."""

    def test_two_generator_step(self) -> None:
        """4 + 4 MW against 10 MW with droop 20 each settles at -0.05 Hz."""
        mg = Microgrid(id="m", ders=(generator(0), generator(1)), load_mw=10.0)

        delta_f, outputs = solve_lumped_frequency(mg)

        assert delta_f == pytest.approx(-0.05, abs=1e-12)
        assert outputs[0] == pytest.approx(5.0, abs=1e-9)
        assert outputs[1] == pytest.approx(5.0, abs=1e-9)

    def test_balanced_is_exactly_nominal(self) -> None:
        """No imbalance means delta_f is exactly 0."""
        mg = Microgrid(id="m", ders=(generator(0), generator(1)), load_mw=8.0)

        delta_f, _ = solve_lumped_frequency(mg)

        assert delta_f == 0.0

    def test_clamped_unit_shifts_burden(self) -> None:
        """When one unit hits p_max the other droops further."""
        mg = Microgrid(id="m", ders=(generator(0, p_max=4.5), generator(1)), load_mw=10.0)

        delta_f, outputs = solve_lumped_frequency(mg)

        assert outputs[0] == 4.5
        assert delta_f == pytest.approx(-0.075, abs=1e-12)
        assert sum(outputs.values()) == pytest.approx(10.0, abs=1e-9)

    def test_load_beyond_capacity(self) -> None:
        """100 MW against 20 MW of capacity is infeasible."""
        mg = Microgrid(id="m", ders=(generator(0), generator(1)), load_mw=100.0)

        with pytest.raises(InfeasibleError):
            solve_lumped_frequency(mg)

    def test_no_droop_with_imbalance(self) -> None:
        """Imbalance without any droop response cannot be settled."""
        mg = Microgrid(id="m", ders=(generator(0, droop=0.0),), load_mw=5.0)

        with pytest.raises(NoDroopResponseError):
            solve_lumped_frequency(mg)

    def test_higher_load_lower_frequency(self) -> None:
        """delta_f is non-increasing in the load."""
        deviations = []
        for tenth in range(40, 160):
            mg = Microgrid(id="m", ders=(generator(0), generator(1)), load_mw=tenth / 10)
            deviations.append(solve_lumped_frequency(mg)[0])

        assert all(a >= b for a, b in zip(deviations, deviations[1:], strict=False))

    def test_balance_holds(self) -> None:
        """Sum of droop outputs equals the load to 1e-9 MW."""
        ders = (generator(0, droop=7.0), generator(1, p_set=2.0, droop=13.0), generator(2, 1.0))
        for load in (1.0, 6.3, 9.9, 17.2):
            _, outputs = solve_lumped_frequency(Microgrid(id="m", ders=ders, load_mw=load))
            assert sum(outputs.values()) == pytest.approx(load, abs=1e-9)


class TestFeeder:
    """Tests for feeder_voltages and solve_feeder_with_droop."""

    def test_withdrawal_drops_voltage(self) -> None:
        """1 MW withdrawn over R = 0.01 gives 0.99 pu."""
        assert feeder_voltages(one_segment_feeder(1.0)) == [pytest.approx(0.99)]

    def test_no_flow_is_source_voltage(self) -> None:
        """Zero injection gives exactly V0."""
        assert feeder_voltages(one_segment_feeder(0.0)) == [1.0]

    def test_generation_raises_voltage(self) -> None:
        """1 MW injected gives 1.01 pu."""
        assert feeder_voltages(one_segment_feeder(-1.0)) == [pytest.approx(1.01)]

    def test_antisymmetry(self) -> None:
        """Negating every injection mirrors every deviation."""
        segments = (FeederSegment(0.01, 0.02), FeederSegment(0.03, 0.01), FeederSegment(0.02, 0.02))
        injections = ((0.4, 0.1), (-1.3, 0.2), (0.7, -0.3))
        plus = feeder_voltages(FeederModel(segments=segments, injections=injections))
        minus = feeder_voltages(
            FeederModel(segments=segments, injections=tuple((-p, -q) for p, q in injections))
        )

        for up, down in zip(plus, minus, strict=True):
            assert up - 1.0 == pytest.approx(-(down - 1.0), abs=1e-12)

    def test_downstream_flow_accumulates(self) -> None:
        """Two 0.5 MW withdrawals: 0.99 at bus 1, 0.985 at bus 2."""
        feeder = FeederModel(
            segments=(FeederSegment(0.01, 0.0), FeederSegment(0.01, 0.0)),
            injections=((0.5, 0.0), (0.5, 0.0)),
        )

        assert feeder_voltages(feeder) == [pytest.approx(0.99), pytest.approx(0.985)]

    def test_base_mva_scales(self) -> None:
        """2 MW on a 2 MVA base is the same as 1 pu."""
        feeder = FeederModel(
            segments=(FeederSegment(0.01, 0.01),), base_mva=2.0, injections=((2.0, 0.0),)
        )

        assert feeder_voltages(feeder) == [pytest.approx(0.99)]

    def test_mismatched_injections_rejected(self) -> None:
        """One injection per bus is required."""
        with pytest.raises(ValueError):
            FeederModel(segments=(FeederSegment(0.01, 0.01),), injections=((1.0, 0.0), (0.0, 0.0)))

    def test_droop_der_without_q_gain(self) -> None:
        """With q_droop_gain 0 the DER just offsets the withdrawal at its bus."""
        der = DerSpec(
            id=0, kind=DerKind.GENERATOR, p_set=1.0, p_min=0.0, p_max=2.0,
            cost_a=1.0, feeder_node=1,
        )
        feeder = one_segment_feeder(0.0)

        voltages, reactive = solve_feeder_with_droop(feeder, [der], {0: 1.0})

        assert voltages == [pytest.approx(1.01)]
        assert reactive == {0: 0.0}

    def test_reactive_droop_limits_rise(self) -> None:
        """Absorbing Q pulls a rising voltage back towards nominal."""
        base = dict(
            id=0, kind=DerKind.GENERATOR, p_set=2.0, p_min=0.0, p_max=3.0,
            cost_a=1.0, feeder_node=1,
        )
        plain = DerSpec(**base)  # type: ignore[arg-type]
        drooping = DerSpec(**base, q_droop_gain=5.0)  # type: ignore[arg-type]
        feeder = one_segment_feeder(0.0)

        v_plain, _ = solve_feeder_with_droop(feeder, [plain], {0: 2.0})
        v_droop, q = solve_feeder_with_droop(feeder, [drooping], {0: 2.0})

        assert v_plain[0] > v_droop[0] > 1.0
        assert q[0] < 0
        assert q[0] == pytest.approx(5.0 * (1.0 - v_droop[0]), abs=1e-12)


class TestCost:
    """Tests for marginal and total cost."""

    def test_marginal_cost_examples(self) -> None:
        """a = 1, b = 2 at p = 7/3 gives 13/3; a = 2, b = 1 at 0 gives 1."""
        first = DerSpec(
            id=0, kind=DerKind.GENERATOR, p_set=0, p_min=0, p_max=10, cost_a=1, cost_b=2
        )
        second = DerSpec(
            id=1, kind=DerKind.GENERATOR, p_set=0, p_min=0, p_max=10, cost_a=2, cost_b=1
        )

        assert marginal_cost(first, 7 / 3) == pytest.approx(13 / 3)
        assert marginal_cost(second, 0.0) == 1.0

    def test_marginal_cost_of_load(self) -> None:
        """Loads have no marginal cost."""
        load = DerSpec(id=0, kind=DerKind.LOAD, p_set=-1.0, p_min=-2.0, p_max=0.0)

        with pytest.raises(NotDispatchableError):
            marginal_cost(load, -1.0)

    def test_generation_cost(self) -> None:
        """C(p) = a p^2 / 2 + b p, zero for loads."""
        der = DerSpec(id=0, kind=DerKind.STORAGE, p_set=0, p_min=-5, p_max=5, cost_a=2, cost_b=3)
        load = DerSpec(id=1, kind=DerKind.LOAD, p_set=-1.0, p_min=-2.0, p_max=0.0)

        assert generation_cost(der, 2.0) == pytest.approx(10.0)
        assert generation_cost(load, -1.0) == 0.0
