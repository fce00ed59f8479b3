r"""Unit tests for twin-beam conditioning and the green-matrix inversion series."""
import numpy as np
import pytest

from backend.app.devices import PiaParams, pia_green
from backend.app.errors import IncompleteDataError, InvalidInputError
from backend.app.fock_core import EstimatedDistribution, GreenMatrix, apply_green
from backend.app.twinbeam import (
    OutcomeEntry,
    OutcomeTable,
    TwinBeamConfig,
    adaptive_n_max,
    conditional_state,
    forward_table,
    invert_green,
    invert_green_matrix,
    outcome_distribution,
    outcome_probabilities,
    predict_outputs,
    retained_outcomes,
    series_ratio,
)

ROUND_TRIP_SEEDS = range(50)


def noisy_table(clean, sigma, rng):
    """Add independent Gaussian noise of known sigma to every r_k(n)."""
    entries = {}
    for n in clean.outcomes:
        values = clean[n].r + sigma * rng.standard_normal(clean.dim)
        entries[n] = OutcomeEntry(EstimatedDistribution(values, np.full(clean.dim, sigma)), 1)
    return OutcomeTable(entries)


def flat_table(dim, outcomes, sigma):
    zeros = np.zeros(dim)
    return OutcomeTable({
        n: OutcomeEntry(EstimatedDistribution(zeros, np.full(dim, sigma))) for n in outcomes
    })


class TestOutcomeDistribution:
    """Detector-D outcome statistics."""

    def test_vacuum_outcome(self, high_efficiency_beam):
        assert outcome_distribution(high_efficiency_beam, 0) == pytest.approx(0.64 / 0.928)
        assert outcome_distribution(high_efficiency_beam, 0) == pytest.approx(0.689655, abs=1e-6)

    def test_perfect_detector_gives_thermal_statistics(self):
        cfg = TwinBeamConfig(kappa2=0.36, eta_d=1.0)
        expected = 0.64 * 0.36 ** np.arange(10)
        assert np.allclose(outcome_probabilities(cfg, 9), expected, rtol=1e-14)

    def test_normalization(self):
        cfg = TwinBeamConfig(kappa2=0.36, eta_d=0.3)
        assert outcome_probabilities(cfg, 200).sum() == pytest.approx(1.0, abs=1e-12)

    def test_vector_matches_scalar(self, low_efficiency_beam):
        vector = outcome_probabilities(low_efficiency_beam, 6)
        assert vector[4] == pytest.approx(outcome_distribution(low_efficiency_beam, 4), rel=1e-14)

    def test_retained_outcomes(self, high_efficiency_beam):
        assert retained_outcomes(high_efficiency_beam) == list(range(13))
        wide = TwinBeamConfig(kappa2=0.81, eta_d=1.0, n_outcome_max=3)
        retained = retained_outcomes(wide, floor=1e-3)
        assert retained[-1] > 3
        assert outcome_distribution(wide, retained[-1]) >= 1e-3
        assert outcome_distribution(wide, retained[-1] + 1) < 1e-3

    @pytest.mark.parametrize("kappa2, eta_d", [(1.0, 0.5), (-0.1, 0.5), (0.5, 0.0), (0.5, 1.2)])
    def test_invalid_config(self, kappa2, eta_d):
        with pytest.raises(InvalidInputError):
            TwinBeamConfig(kappa2=kappa2, eta_d=eta_d)


class TestConditionalState:
    """State heralded by outcome n at detector D."""

    def test_perfect_detector_heralds_fock_state(self):
        state = conditional_state(TwinBeamConfig(0.36, 1.0), 3, 8)
        assert state.probs.tolist() == [0, 0, 0, 1, 0, 0, 0, 0]

    def test_geometric_tail_for_vacuum_outcome(self, high_efficiency_beam):
        probs = conditional_state(high_efficiency_beam, 0, 30).probs
        assert probs[0] == pytest.approx(0.928, abs=1e-14)
        assert np.allclose(probs[1:10] / probs[:9], 0.072, rtol=1e-12)

    @pytest.mark.parametrize("n", [0, 3, 7, 12])
    def test_normalized_with_sixty_extra_levels(self, high_efficiency_beam, n):
        state = conditional_state(high_efficiency_beam, n, n + 60)
        assert state.probs.sum() == pytest.approx(1.0, abs=1e-10)
        assert np.all(state.probs[:n] == 0.0)

    def test_outcome_outside_truncation(self, high_efficiency_beam):
        with pytest.raises(InvalidInputError):
            conditional_state(high_efficiency_beam, 8, 8)


class TestPredictOutputs:
    """Forward map from G to the conditioned output distributions."""

    def test_identity_device(self, high_efficiency_beam):
        r = predict_outputs(GreenMatrix(np.eye(20), 1.0), high_efficiency_beam, 2)
        expected = conditional_state(high_efficiency_beam, 2, 20).probs
        assert np.allclose(r.values, expected, atol=1e-15)

    def test_perfect_detector_reads_one_column(self, random_green):
        g = GreenMatrix(random_green(8, 0), 1.0)
        r = predict_outputs(g, TwinBeamConfig(0.5, 1.0), 3)
        assert np.array_equal(r.values, g.g[:, 3])

    def test_agrees_with_propagated_state(self, pia_params, high_efficiency_beam):
        g = pia_green(pia_params, 28)
        direct = predict_outputs(g, high_efficiency_beam, 1).values
        via_state = apply_green(g, conditional_state(high_efficiency_beam, 1, 28)).probs
        assert np.abs(direct - via_state).max() < 1e-12

    def test_outcome_in_guard_band(self, pia_params, high_efficiency_beam):
        with pytest.raises(InvalidInputError):
            predict_outputs(pia_green(pia_params, 10), high_efficiency_beam, 7, guard=4)

    def test_forward_table_beyond_truncation_is_zero(self, pia_params, high_efficiency_beam):
        table = forward_table(pia_green(pia_params, 6), high_efficiency_beam, range(9))
        assert len(table) == 9
        assert np.all(table[7].r == 0.0)
        assert np.all(table[3].sigma == 0.0)


class TestInvertGreen:
    """Inverse series from outcome tables back to G."""

    def test_series_ratio_for_low_efficiency(self, low_efficiency_beam):
        assert series_ratio(low_efficiency_beam) == pytest.approx(-0.112 / 0.888)
        assert series_ratio(low_efficiency_beam) == pytest.approx(-0.12613, abs=1e-5)

    def test_adaptive_bound_for_low_efficiency(self, low_efficiency_beam):
        assert 13 <= adaptive_n_max(low_efficiency_beam, 0, 1.0, 1e-12) <= 14

    def test_adaptive_bound_grows_with_column(self, high_efficiency_beam):
        bounds = [adaptive_n_max(high_efficiency_beam, l) for l in range(8)]
        assert bounds == sorted(bounds)

    def test_perfect_detector_single_term(self, random_green):
        cfg = TwinBeamConfig(0.5, 1.0)
        g = GreenMatrix(random_green(6, 4), 1.0)
        table = forward_table(g, cfg, range(6))
        value, sigma = invert_green(table, cfg, 2, 4, 0)
        assert value == g.g[4, 2]
        assert sigma == 0.0

    def test_round_trip_on_pia(self, pia_params, high_efficiency_beam):
        n_max = 30
        size = 12
        g = pia_green(pia_params, 28)
        table = forward_table(g, high_efficiency_beam, range(size + n_max + 1))
        for l in range(size):
            for k in range(size):
                value, _ = invert_green(table, high_efficiency_beam, l, k, n_max)
                assert abs(value - g.g[k, l]) < 1e-8

    @pytest.mark.parametrize("seed", ROUND_TRIP_SEEDS)
    def test_round_trip_on_random_stochastic_matrices(self, random_green, high_efficiency_beam, seed):
        dim = 6 + seed % 11
        g = GreenMatrix(random_green(dim, seed), 1.0)
        table = forward_table(g, high_efficiency_beam, range(dim))
        estimate = invert_green_matrix(table, high_efficiency_beam, dim)
        assert np.abs(estimate.g - g.g).max() < 1e-8

    def test_round_trip_at_low_efficiency(self, random_green, low_efficiency_beam):
        g = GreenMatrix(random_green(12, 99), 1.0)
        table = forward_table(g, low_efficiency_beam, range(12))
        estimate = invert_green_matrix(table, low_efficiency_beam, 12, tail_epsilon=1e-15)
        assert np.abs(estimate.g - g.g).max() < 1e-10

    def test_missing_outcome_is_named(self, high_efficiency_beam):
        table = flat_table(6, [0, 1, 2, 4, 5, 6], 0.01)
        with pytest.raises(IncompleteDataError) as info:
            invert_green(table, high_efficiency_beam, 0, 0, 5)
        assert info.value.missing == [3]

    def test_missing_column(self, high_efficiency_beam):
        table = flat_table(6, [0, 1, 3, 4, 5], 0.01)
        with pytest.raises(IncompleteDataError) as info:
            invert_green_matrix(table, high_efficiency_beam, 4)
        assert 2 in info.value.missing

    def test_adaptive_series_stops_at_last_outcome(self, pia_params, high_efficiency_beam):
        table = forward_table(pia_green(pia_params, 20), high_efficiency_beam, range(10))
        estimate = invert_green_matrix(table, high_efficiency_beam, 8)
        assert np.all(estimate.n_used[:, 7] <= 2)
        assert np.all(estimate.tail_bound >= 0)

    def test_error_propagation_matches_injected_noise(self, random_green, high_efficiency_beam):
        rng = np.random.default_rng(17)
        dim, size, sigma = 8, 6, 1e-3
        g = GreenMatrix(random_green(dim, 1), 1.0)
        clean = forward_table(g, high_efficiency_beam, range(dim))
        scores = []
        for _ in range(1000):
            table = noisy_table(clean, sigma, rng)
            for l in range(size):
                for k in range(size):
                    value, error = invert_green(table, high_efficiency_beam, l, k, dim - 1 - l)
                    scores.append((value - g.g[k, l]) / error)
        scores = np.array(scores)
        assert abs(scores.mean()) < 0.1
        assert 0.8 <= scores.var() <= 1.2

    def test_sigma_grows_with_gain(self):
        sigmas = []
        for kappa2 in (0.1, 0.2, 0.3, 0.4, 0.5):
            cfg = TwinBeamConfig(kappa2, 0.6)
            table = flat_table(8, range(20), 1e-3)
            sigmas.append(invert_green_matrix(table, cfg, 8, n_max=10).sigma)
        for low, high in zip(sigmas, sigmas[1:]):
            assert np.all(high >= low)


class TestErrorModes:
    """Covariance of the estimated green matrix."""

    def test_independent_entries_give_diagonal_modes(self):
        entry = OutcomeEntry(EstimatedDistribution([0.5, 0.3, 0.2], [0.1, 0.0, 0.2]))
        modes = entry.error_modes()
        assert modes.shape == (2, 3)
        assert np.allclose(modes.T @ modes, np.diag([0.01, 0.0, 0.04]))

    def test_block_modes_give_covariance_of_the_mean(self):
        blocks = np.array([[0.5, 0.5], [0.7, 0.3], [0.6, 0.4]])
        entry = OutcomeEntry(EstimatedDistribution(blocks.mean(axis=0), blocks.std(axis=0, ddof=1) / np.sqrt(3)),
                             blocks=blocks)
        modes = entry.error_modes()
        assert np.allclose(modes.T @ modes, np.cov(blocks.T) / 3)
        # entries that move against each other in every block are anticorrelated
        assert (modes.T @ modes)[0, 1] < 0

    @pytest.mark.parametrize("blocks", [np.zeros((1, 3)), np.zeros((2, 2)), np.full((2, 3), np.nan)])
    def test_malformed_blocks_rejected(self, blocks):
        with pytest.raises(InvalidInputError):
            OutcomeEntry(EstimatedDistribution(np.zeros(3)), blocks=blocks)

    def test_modes_reproduce_sigma(self, random_green, high_efficiency_beam):
        rng = np.random.default_rng(3)
        clean = forward_table(GreenMatrix(random_green(8, 2), 1.0), high_efficiency_beam, range(8))
        estimate = invert_green_matrix(noisy_table(clean, 1e-3, rng), high_efficiency_beam, 5, n_max=2)
        assert estimate.modes.shape[1:] == (5, 5)
        assert np.allclose(np.sqrt((estimate.modes ** 2).sum(axis=0)), estimate.sigma, rtol=1e-12)

    def test_adaptive_series_modes_reproduce_sigma(self, pia_params, high_efficiency_beam):
        rng = np.random.default_rng(4)
        clean = forward_table(pia_green(pia_params, 24), high_efficiency_beam, range(20))
        estimate = invert_green_matrix(noisy_table(clean, 1e-3, rng), high_efficiency_beam, 6)
        assert np.allclose(np.sqrt((estimate.modes ** 2).sum(axis=0)), estimate.sigma, rtol=1e-12)

    def test_shared_outcome_correlates_columns(self, high_efficiency_beam):
        # r_k(2) enters column 2 directly and column 1 through the series
        estimate = invert_green_matrix(flat_table(4, range(8), 1e-3), high_efficiency_beam, 3, n_max=2)
        flat = estimate.modes.reshape(len(estimate.modes), -1)
        covariance = flat.T @ flat
        assert covariance[np.ravel_multi_index((0, 1), (3, 3)), np.ravel_multi_index((0, 2), (3, 3))] != 0.0
        assert covariance[np.ravel_multi_index((0, 1), (3, 3)), np.ravel_multi_index((1, 2), (3, 3))] == 0.0


class TestConvergedColumns:
    """Leading columns whose inversion series is long enough."""

    def test_every_column_converges_with_enough_outcomes(self, pia_params, high_efficiency_beam):
        table = forward_table(pia_green(pia_params, 20), high_efficiency_beam, range(40))
        estimate = invert_green_matrix(table, high_efficiency_beam, 8)
        assert estimate.converged_columns() == 8
        assert np.all(estimate.n_wanted == estimate.n_used[0])

    def test_short_table_limits_the_columns(self, pia_params, high_efficiency_beam):
        table = forward_table(pia_green(pia_params, 20), high_efficiency_beam, range(10))
        estimate = invert_green_matrix(table, high_efficiency_beam, 8)
        converged = estimate.converged_columns(1e-4)
        assert 0 < converged < 8
        assert np.all(estimate.tail_bound[0, :converged] <= 1e-4)
        assert estimate.tail_bound[0, converged] > 1e-4
        assert estimate.n_wanted[converged] > estimate.n_used[0, converged]
        assert estimate.converged_columns(1.0) >= converged
