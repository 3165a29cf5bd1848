"""Test tau-leaping, Euler-Maruyama and regeneration"""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from qsd_sensitivity.errors import (
    ConfigError,
    InvalidCovariance,
    RegenExhausted,
    StructureError,
)
from qsd_sensitivity.network import Reaction, ReactionNetwork
from qsd_sensitivity.paired_paths import generate_skeleton_set, required_length
from qsd_sensitivity.presets import initial_state, preset
from qsd_sensitivity.simulate import (
    ChannelClock,
    OccupationReservoir,
    RegenSequence,
    SimConfig,
    closed_form_sqrt_2x2,
    covariance_sqrt,
    diffusion_matrix,
    em_step,
    paired_sup_distance,
    simulate_with_regeneration,
    tau_leap_step,
)

SIR_CFG = SimConfig(volume=1000, step=0.001, steps_per_segment=500, mode="paired")

BIRTH_DEATH = ReactionNetwork(
    ("A",), (Reaction((0,), (1,), 1.0), Reaction((1,), (0,), 1.0))
)


class FixedIncrements:
    """Skeleton stand-in that returns the same channel increments every call."""

    def __init__(self, poisson, wiener=None):
        self.poisson = np.asarray(poisson)
        self.wiener = np.zeros(len(poisson)) if wiener is None else np.asarray(wiener)

    def __len__(self):
        return len(self.poisson)

    def poisson_increment(self, q_old, q_new):
        return self.poisson

    def wiener_increment(self, q_old, q_new):
        return self.wiener


class ScriptedIncrements:
    """Skeleton stand-in that plays back a fixed list of Poisson increments."""

    def __init__(self, script):
        self.script = [np.asarray(c) for c in script]
        self.calls = 0

    def __len__(self):
        return len(self.script[0])

    def poisson_increment(self, q_old, q_new):
        counts = self.script[self.calls]
        self.calls += 1
        return counts


def test_tau_leap_forced_birth():
    """One forced birth at V = 1000 moves S by 1 / V."""
    state, clock, absorbed = tau_leap_step(
        preset("sir"), [1.0, 1.0], ChannelClock.zeros(4), SIR_CFG, FixedIncrements([1, 0, 0, 0])
    )
    np.testing.assert_allclose(state, [1.001, 1.0])
    assert not absorbed


def test_clock_advances_by_v_h_f():
    """Internal intensities grow by V h f(x) = (7, 3, 1, 4) at (1, 1)."""
    _, clock, _ = tau_leap_step(
        preset("sir"), [1.0, 1.0], ChannelClock.zeros(4), SIR_CFG, FixedIncrements([0, 0, 0, 0])
    )
    np.testing.assert_allclose(clock.q, [7.0, 3.0, 1.0, 4.0])


def test_clock_rejects_negative_increments():
    with pytest.raises(StructureError):
        ChannelClock.zeros(2).advance(np.array([1.0, -0.1]))


def test_diffusion_matrix_infection_column():
    """Column of the infection channel is (-1, 1) sqrt(3 V h)."""
    m = diffusion_matrix(preset("sir"), [1.0, 1.0], SIR_CFG)
    assert m.shape == (2, 4)
    np.testing.assert_allclose(m[:, 1], [-math.sqrt(3), math.sqrt(3)])


def test_em_drift_without_noise():
    """With zero Wiener increments the step is the Euler drift h F(x)."""
    state, _, absorbed = em_step(
        preset("sir"), [1.0, 1.0], ChannelClock.zeros(4), SIR_CFG, FixedIncrements([0, 0, 0, 0])
    )
    np.testing.assert_allclose(state, [1.003, 0.999])
    assert not absorbed


def test_em_noise_scales_with_volume():
    """A unit Wiener increment on the birth channel adds 1 / V to S."""
    state, _, _ = em_step(
        preset("sir"),
        [1.0, 1.0],
        ChannelClock.zeros(4),
        SIR_CFG,
        FixedIncrements([0, 0, 0, 0], [1.0, 0.0, 0.0, 0.0]),
    )
    np.testing.assert_allclose(state, [1.004, 0.999])


def test_em_rejects_unknown_noise_form():
    cfg = SimConfig(volume=100, step=0.001, steps_per_segment=1)
    with pytest.raises(ConfigError):
        em_step(preset("sir"), [1.0, 1.0], ChannelClock.zeros(4), cfg,
                np.random.default_rng(0), form="triangular")


def test_covariance_sqrt_examples():
    """Identity stays identity; diag(4, 9) gives diag(2, 3)."""
    np.testing.assert_allclose(covariance_sqrt(np.eye(3)), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(covariance_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))


@given(st.lists(st.floats(min_value=-3.0, max_value=3.0), min_size=4, max_size=4))
def test_covariance_sqrt_matches_closed_form(entries):
    """Spectral and closed-form 2 x 2 square roots agree and square back."""
    a = np.array(entries).reshape(2, 2)
    cov = a @ a.T
    root = covariance_sqrt(cov)
    np.testing.assert_allclose(root, root.T, atol=1e-12)
    np.testing.assert_allclose(root @ root, cov, atol=1e-8)
    np.testing.assert_allclose(root, closed_form_sqrt_2x2(cov), atol=1e-6)


def test_covariance_sqrt_rejects_invalid_matrices():
    with pytest.raises(InvalidCovariance):
        covariance_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(InvalidCovariance):
        covariance_sqrt(np.diag([1.0, -1.0]))
    with pytest.raises(InvalidCovariance):
        covariance_sqrt(np.ones((2, 3)))


def test_regeneration_restarts_from_floor_z_n():
    """Absorbed at step 5 with Z = 0.5: restart from x_2 out of x_0..x_4."""
    script = [[1, 0]] * 5 + [[0, 6]]
    cfg = SimConfig(volume=1, step=0.1, steps_per_segment=1, mode="paired")
    result = simulate_with_regeneration(
        BIRTH_DEATH, cfg, "poisson", 6, RegenSequence([0.5]),
        start=[1.0], skeletons=ScriptedIncrements(script),
    )
    np.testing.assert_array_equal(result.trajectory[:, 0], [1, 2, 3, 4, 5, 6, 3])
    assert result.final_state[0] == 3.0
    assert result.regen_count == 1
    assert result.regen_flags.tolist() == [False] * 6 + [True]
    np.testing.assert_array_equal(result.reservoir.states[:, 0], [1, 2, 3, 4, 5, 6])


def test_regeneration_with_empty_reservoir_stays_put():
    """Absorbed at the first step: restart from the current state, no uniform used."""
    cfg = SimConfig(volume=1, step=0.1, steps_per_segment=1, mode="paired")
    regen = RegenSequence([0.5])
    result = simulate_with_regeneration(
        BIRTH_DEATH, cfg, "poisson", 1, regen,
        start=[1.0], skeletons=ScriptedIncrements([[0, 2]]),
    )
    assert result.final_state[0] == 1.0
    assert result.regen_count == 1
    assert regen.counters["poisson"] == 0


def test_reservoir_size_equals_steps():
    """Every step records exactly one interior state."""
    cfg = SimConfig(volume=100, step=0.001, steps_per_segment=100, seed=3)
    result = simulate_with_regeneration(
        preset("sir"), cfg, "diffusion", 300, start=initial_state("sir")
    )
    assert len(result.reservoir) == 300
    assert result.trajectory.shape == (301, 2)


def test_reservoir_thinning():
    """Thinning 3 over 10 states keeps 4 and counts all 10."""
    reservoir = OccupationReservoir(1, thinning=3, capacity=2)
    for v in range(1, 11):
        reservoir.append(np.array([float(v)]))
    assert len(reservoir) == 4
    assert reservoir.recorded == 10
    np.testing.assert_array_equal(reservoir.states[:, 0], [1, 4, 7, 10])


def test_reservoir_refuses_absorbing_states_and_rolls_back():
    reservoir = OccupationReservoir(2)
    reservoir.append(np.array([1.0, 1.0]))
    with pytest.raises(StructureError):
        reservoir.append(np.array([0.0, 1.0]))
    mark = reservoir.mark()
    reservoir.append(np.array([2.0, 2.0]))
    reservoir.rollback(mark)
    assert len(reservoir) == 1
    with pytest.raises(ValueError):
        reservoir.states[0, 0] = 5.0


def test_regen_sequence_counters_are_independent():
    """Each process walks the shared uniforms on its own counter."""
    regen = RegenSequence([0.25, 0.75])
    assert regen.draw("poisson") == 0.25
    assert regen.draw("diffusion") == 0.25
    assert regen.draw("poisson") == 0.75
    with pytest.raises(RegenExhausted):
        regen.draw("poisson")
    regen.reset()
    assert regen.draw("poisson") == 0.25


def test_regen_sequence_from_seed_is_deterministic():
    a = RegenSequence.from_seed(4, 100, segment=2)
    b = RegenSequence.from_seed(4, 100, segment=2)
    np.testing.assert_array_equal(a.uniforms, b.uniforms)
    assert np.all((a.uniforms > 0) & (a.uniforms < 1))


def test_paired_mode_requires_skeletons_and_regen():
    cfg = SimConfig(volume=100, step=0.001, steps_per_segment=10, mode="paired")
    with pytest.raises(ConfigError):
        simulate_with_regeneration(preset("sir"), cfg, "poisson", 10, RegenSequence([0.5]),
                                   start=[1.0, 1.0])
    with pytest.raises(ConfigError):
        simulate_with_regeneration(preset("sir"), cfg, "poisson", 10,
                                   start=[1.0, 1.0], skeletons=FixedIncrements([0, 0, 0, 0]))


def test_free_runs_are_deterministic_per_seed():
    cfg = SimConfig(volume=100, step=0.001, steps_per_segment=100, seed=8)
    a = simulate_with_regeneration(preset("sir"), cfg, "poisson", 200, start=[1.0, 1.0])
    b = simulate_with_regeneration(preset("sir"), cfg, "poisson", 200, start=[1.0, 1.0])
    np.testing.assert_array_equal(a.trajectory, b.trajectory)


def test_sim_config_validation():
    assert SimConfig.from_horizon(100, 0.001, 0.5).steps_per_segment == 500
    with pytest.raises(ConfigError):
        SimConfig.from_horizon(100, 0.001, 0.0015)
    with pytest.raises(ConfigError):
        SimConfig(volume=0, step=0.001, steps_per_segment=1)
    with pytest.raises(ConfigError):
        SimConfig(volume=10, step=0.001, steps_per_segment=1, mode="coupled")


def test_pure_birth_counts_are_poisson():
    """Free tau-leaping of 0 -> A has Poisson(V h rate) jumps per step."""
    net = ReactionNetwork(("A",), (Reaction((0,), (1,), 2.0),))
    cfg = SimConfig(volume=50, step=0.01, steps_per_segment=1, seed=6)
    result = simulate_with_regeneration(net, cfg, "poisson", 5000, start=[1.0])
    jumps = np.rint(np.diff(result.trajectory[:, 0]) * cfg.volume).astype(int)
    observed = np.array([np.sum(jumps == k) for k in range(3)] + [np.sum(jumps >= 3)])
    probs = np.append(stats.poisson.pmf(np.arange(3), 1.0), stats.poisson.sf(2, 1.0))
    assert stats.chisquare(observed, probs * jumps.size).pvalue > 0.01


@pytest.mark.slow
def test_small_volume_sir_regenerates():
    """At V = 10 extinction is frequent: a long free run regenerates."""
    cfg = SimConfig(volume=10, step=0.001, steps_per_segment=500, seed=1)
    result = simulate_with_regeneration(
        preset("sir"), cfg, "poisson", 1_000_000, start=initial_state("sir"),
        keep_trajectory=False,
    )
    assert result.regen_count >= 1
    assert not np.any(result.reservoir.states <= 0)


@pytest.mark.slow
def test_paired_sup_distance_shrinks_with_volume():
    """Median sup-distance decreases across V in {1e2, 1e3, 1e4}."""
    net = preset("sir")
    start = initial_state("sir")
    medians = []
    for volume in (100, 1000, 10_000):
        cfg = SimConfig(volume=volume, step=0.001, steps_per_segment=500, mode="paired")
        length = required_length(np.full(4, 20 * volume * cfg.horizon), 1.0)
        distances = [
            paired_sup_distance(net, cfg, start, generate_skeleton_set(1.0, length, s, 4))
            for s in range(5)
        ]
        medians.append(np.median(distances))
    assert medians[0] > medians[1] > medians[2]


@pytest.mark.parametrize("form", ["rectangular", "square"])
def test_em_noise_forms_share_the_one_step_covariance(form):
    net = preset("sir")
    cfg = SimConfig(volume=100, step=0.001, steps_per_segment=1)
    x = np.array([1.0, 1.0])
    rng = np.random.default_rng(21)
    states = np.array([
        em_step(net, x, ChannelClock.zeros(net.num_reactions), cfg, rng, form=form)[0]
        for _ in range(20_000)
    ])
    m = diffusion_matrix(net, x, cfg)
    target = m @ m.T
    empirical = np.cov(states.T) * cfg.volume**2
    np.testing.assert_allclose(empirical, target, atol=0.05 * np.max(np.abs(target)))
