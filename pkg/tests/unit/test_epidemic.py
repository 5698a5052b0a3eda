"""Unit tests for average consensus and push-sum gossip."""

import math

import pytest

from p2p_microgrid.epidemic import (
    ConsensusState,
    consensus_residual,
    consensus_step,
    default_epsilon,
    push_sum_round,
    run_consensus,
    run_push_sum,
    start_consensus,
    start_push_sum,
)
from p2p_microgrid.errors import DimensionMismatchError, NotConnectedError
from p2p_microgrid.rng import SeededRNG
from p2p_microgrid.topology import (
    CommGraph,
    build_graph,
    complete_graph,
    path_graph,
    random_connected_graph,
    remove_node,
    restrict_edges,
    ring_graph,
)


def random_values(n: int, rng: SeededRNG) -> list[float]:
    """Draw n initial values uniformly from [0, 1).

    Args:
        n: Number of values
        rng: Seeded stream to draw from

    Returns:
        List of floats
    """
    return [rng.random() for _ in range(n)]


def drop_everything(graph: CommGraph) -> CommGraph:
    """Deliver hook that loses every message."""
    return restrict_edges(graph, [])


class TestConsensusStep:
    """Tests for a single consensus update."""

    def test_path_example(self) -> None:
        """[0, 1, 2] on a path with epsilon 0.25 becomes [0.25, 1.0, 1.75]."""
        graph = build_graph(3, [(0, 1), (1, 2)], 0.25)

        state = consensus_step(start_consensus([0.0, 1.0, 2.0], graph), graph)

        assert state.values == (0.25, 1.0, 1.75)
        assert state.round == 1

    def test_agreement_is_a_fixed_point(self) -> None:
        """Equal values stay exactly where they are."""
        graph = path_graph(3)

        state = consensus_step(start_consensus([5.0, 5.0, 5.0], graph), graph)

        assert state.values == (5.0, 5.0, 5.0)

    def test_singleton_unchanged(self) -> None:
        """A node without neighbours keeps its value."""
        graph = build_graph(1, [])

        state = consensus_step(start_consensus([7.0], graph), graph)

        assert state.values == (7.0,)

    def test_dimension_mismatch(self) -> None:
        """A state built for two nodes cannot step on a three-node graph."""
        state = start_consensus([1.0, 2.0], path_graph(2))

        with pytest.raises(DimensionMismatchError):
            consensus_step(state, path_graph(3))

    def test_start_with_wrong_length(self) -> None:
        """Initial values must match the live node count."""
        with pytest.raises(DimensionMismatchError):
            start_consensus([1.0, 2.0], path_graph(3))

    def test_sum_preserved_and_spread_contracts(self) -> None:
        """Every step keeps the sum and never widens the spread."""
        rng = SeededRNG(17)
        for _ in range(20):
            n = rng.randint(2, 15)
            graph = random_connected_graph(n, 0.3, rng)
            state = start_consensus(random_values(n, rng), graph)
            for _ in range(30):
                nxt = consensus_step(state, graph)
                assert sum(nxt.values) == pytest.approx(state.initial_sum, abs=1e-12)
                assert consensus_residual(nxt) <= consensus_residual(state) + 1e-15
                state = nxt

    def test_without_drops_failed_agent(self) -> None:
        """Removing an agent keeps survivors' values and resets the sum."""
        state = ConsensusState(values=(1.0, 2.0, 6.0), round=4, initial_sum=9.0, nodes=(0, 1, 2))

        survivors = state.without(1)

        assert survivors.nodes == (0, 2)
        assert survivors.values == (1.0, 6.0)
        assert survivors.initial_sum == 7.0


class TestConsensusResidual:
    """Tests for consensus_residual."""

    def test_examples(self) -> None:
        """[1, 1, 1] -> 0, [0, 2] -> 2, [5] -> 0."""
        assert consensus_residual(start_consensus([1.0, 1.0, 1.0], path_graph(3))) == 0.0
        assert consensus_residual(start_consensus([0.0, 2.0], path_graph(2))) == 2.0
        assert consensus_residual(start_consensus([5.0], build_graph(1, []))) == 0.0


class TestRunConsensus:
    """Tests for run_consensus."""

    def test_path_converges_to_mean(self) -> None:
        """[0, 1, 2] on a path agrees on 1.0."""
        state, report = run_consensus([0.0, 1.0, 2.0], path_graph(3), 1e-9, 10_000)

        assert report.converged
        assert report.consensus_value == pytest.approx(1.0, abs=1e-9)
        assert all(v == pytest.approx(1.0, abs=1e-9) for v in state.values)

    def test_already_agreed_uses_no_rounds(self) -> None:
        """Identical values need zero rounds."""
        _, report = run_consensus([1.0] * 4, complete_graph(4), 1e-6, 100)

        assert report.converged
        assert report.rounds_used == 0
        assert report.consensus_value == 1.0

    def test_partitioned_graph(self) -> None:
        """A graph with an isolated node raises NotConnectedError."""
        with pytest.raises(NotConnectedError):
            run_consensus([0.0, 1.0, 2.0], build_graph(3, [(0, 1)]), 1e-6, 100)

    def test_non_positive_tol(self) -> None:
        """tol must be strictly positive."""
        with pytest.raises(ValueError):
            run_consensus([0.0, 1.0], path_graph(2), 0.0, 100)

    def test_round_budget_exhausted(self) -> None:
        """Without delivered messages nothing moves and the report says so."""
        state, report = run_consensus(
            [0.0, 1.0, 2.0], path_graph(3), 1e-6, 5, deliver=drop_everything
        )

        assert not report.converged
        assert report.rounds_used == 5
        assert report.consensus_value is None
        assert state.values == (0.0, 1.0, 2.0)

    def test_random_graphs_reach_initial_mean(self) -> None:
        """On 100 random connected graphs the agreed value is the initial mean."""
        rng = SeededRNG(2024)
        for _ in range(100):
            n = rng.randint(2, 50)
            graph = random_connected_graph(n, min(1.0, 4.0 / n), rng)
            init = random_values(n, rng)
            state, report = run_consensus(init, graph, 1e-9, 200 * n * n)

            assert report.converged
            mean = sum(init) / n
            assert all(abs(v - mean) <= 1e-9 for v in state.values)

    def test_ring_spread_decays(self) -> None:
        """On a 20-ring the spread after 2T rounds is no larger than after T."""
        graph = ring_graph(20)
        state = start_consensus(random_values(20, SeededRNG(8)), graph)
        residuals = [consensus_residual(state)]
        for _ in range(200):
            state = consensus_step(state, graph)
            residuals.append(consensus_residual(state))

        for t in range(10, 101):
            assert residuals[2 * t] <= residuals[t]
        assert residuals[200] < 0.05 * residuals[0]

    def test_survivors_reconverge_after_agent_loss(self) -> None:
        """Killing one of five ring agents mid-run, survivors agree on their own mean."""
        graph = ring_graph(5)
        state = start_consensus([1.0, 4.0, 9.0, 16.0, 25.0], graph)
        for _ in range(3):
            state = consensus_step(state, graph)

        survivors = state.without(2)
        degraded = remove_node(graph, 2)
        final, report = run_consensus(list(survivors.values), degraded, 1e-9, 10_000)

        assert report.converged
        mean = sum(survivors.values) / 4
        assert all(abs(v - mean) <= 1e-9 for v in final.values)

    def test_delayed_samples_still_agree(self) -> None:
        """Hold-last-sample with a two-round delay converges inside the initial hull."""
        init = [0.0, 3.0, 6.0, 1.0]
        _, report = run_consensus(init, ring_graph(4), 1e-9, 20_000, delay_rounds=2)

        assert report.converged
        assert report.consensus_value is not None
        assert min(init) <= report.consensus_value <= max(init)

    def test_default_epsilon(self) -> None:
        """default_epsilon is 1/(max_degree + 1)."""
        assert default_epsilon(path_graph(3)) == pytest.approx(1 / 3)
        assert default_epsilon(build_graph(1, [])) == 1.0


class TestPushSumRound:
    """Tests for a single push-sum round."""

    def test_equal_values_stay_equal(self) -> None:
        """If every node starts at c, every estimate is still c."""
        graph = ring_graph(6)
        state = push_sum_round(start_push_sum([3.7] * 6, graph), graph, SeededRNG(1))

        assert state.estimates() == pytest.approx([3.7] * 6, rel=1e-15)

    def test_singleton_unchanged(self) -> None:
        """A lone node keeps its pair."""
        graph = build_graph(1, [])
        state = push_sum_round(start_push_sum([2.0], graph), graph, SeededRNG(1))

        assert state.sums == (2.0,)
        assert state.weights == (1.0,)

    def test_mass_conserved_and_weights_positive(self) -> None:
        """Total s and total w never change; weights stay positive."""
        rng = SeededRNG(99)
        for _ in range(10):
            n = rng.randint(2, 20)
            graph = random_connected_graph(n, 0.3, rng)
            init = random_values(n, rng)
            state = start_push_sum(init, graph)
            gossip = rng.fork()
            for _ in range(50):
                state = push_sum_round(state, graph, gossip)
                assert sum(state.sums) == pytest.approx(sum(init), abs=1e-12)
                assert sum(state.weights) == pytest.approx(n, abs=1e-12)
                assert all(w > 0 for w in state.weights)

    def test_path_example_conserves(self) -> None:
        """[0, 3, 6] on a path keeps sum 9 and weight 3."""
        graph = path_graph(3)
        state = push_sum_round(start_push_sum([0.0, 3.0, 6.0], graph), graph, SeededRNG(4))

        assert sum(state.sums) == pytest.approx(9.0, abs=1e-12)
        assert sum(state.weights) == pytest.approx(3.0, abs=1e-12)


class TestRunPushSum:
    """Tests for run_push_sum."""

    def test_path_converges_to_mean(self) -> None:
        """[0, 3, 6] agrees on 3 and reports sum 9."""
        report = run_push_sum([0.0, 3.0, 6.0], path_graph(3), 1e-6, 10_000, SeededRNG(5))

        assert report.converged
        assert all(abs(e - 3.0) <= 1e-6 for e in report.estimates)
        assert report.sum_estimate == pytest.approx(9.0, abs=1e-5)

    def test_already_agreed(self) -> None:
        """Identical values need zero rounds."""
        report = run_push_sum([2.5, 2.5], path_graph(2), 1e-6, 100, SeededRNG(5))

        assert report.rounds_used == 0
        assert report.consensus_value == 2.5

    def test_partitioned_graph(self) -> None:
        """Push-sum refuses a partitioned graph."""
        with pytest.raises(NotConnectedError):
            run_push_sum([0.0, 1.0, 2.0], build_graph(3, [(0, 1)]), 1e-6, 100, SeededRNG(5))

    def test_random_graphs_and_seeds(self) -> None:
        """Ten graphs with ten seeds each all reach the initial mean."""
        rng = SeededRNG(321)
        for _ in range(10):
            n = rng.randint(2, 20)
            graph = random_connected_graph(n, 0.3, rng)
            init = random_values(n, rng)
            mean = sum(init) / n
            for seed in range(10):
                report = run_push_sum(init, graph, 1e-6, 20_000, SeededRNG(seed))
                assert report.converged
                assert all(abs(e - mean) <= 1e-6 for e in report.estimates)

    def test_delayed_shares_are_drained(self) -> None:
        """With a two-round delay no mass is left in flight at convergence."""
        report = run_push_sum(
            [0.0, 3.0, 6.0], path_graph(3), 1e-6, 10_000, SeededRNG(6), delay_rounds=2
        )

        assert report.converged
        assert report.consensus_value == pytest.approx(3.0, abs=1e-9)

    def test_draining_respects_round_budget(self) -> None:
        """Delayed shares never push rounds_used past max_rounds."""
        for max_rounds in range(1, 40):
            report = run_push_sum(
                [0.0, 3.0, 6.0],
                path_graph(3),
                1e-3,
                max_rounds,
                SeededRNG(6),
                delay_rounds=3,
            )

            assert report.rounds_used <= max_rounds
            if not report.converged:
                assert report.consensus_value is None

    def test_same_seed_same_states(self) -> None:
        """Two runs with one seed produce identical serialised states."""
        graph = ring_graph(7)
        init = [float(i * i) for i in range(7)]

        def trajectory(seed: int) -> list[str]:
            rng = SeededRNG(seed)
            state = start_push_sum(init, graph)
            out = []
            for _ in range(25):
                state = push_sum_round(state, graph, rng)
                out.append(state.to_json())
            return out

        assert trajectory(13) == trajectory(13)
        assert trajectory(13) != trajectory(14)

    def test_estimates_finite(self) -> None:
        """Estimates never blow up on a long path."""
        report = run_push_sum(
            [float(i) for i in range(12)], path_graph(12), 1e-6, 50_000, SeededRNG(3)
        )

        assert all(math.isfinite(e) for e in report.estimates)
        assert report.converged
