"""Test reflection, maximal and hybrid couplings"""

import io
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from qsd_sensitivity.coupling import (
    CoupledPair,
    CouplingOutcome,
    burn_in_pool,
    collect_coupling_times,
    default_threshold,
    householder_reflect,
    hybrid_coupling_run,
    maximal_coupling_step,
    one_step_kernel,
    reflection_step,
    write_outcomes_csv,
)
from qsd_sensitivity.errors import ConfigError, NumericalDegeneracy, StructureError
from qsd_sensitivity.presets import initial_state, preset
from qsd_sensitivity.sensitivity import survival_curve
from qsd_sensitivity.simulate import ChannelClock, SimConfig, diffusion_matrix, em_step

CFG = SimConfig(volume=1000, step=0.001, steps_per_segment=500, seed=2)
LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


def _normal(mean):
    return (
        lambda z: -0.5 * (z[0] - mean) ** 2 - LOG_SQRT_2PI,
        lambda rng: np.array([mean + rng.standard_normal()]),
    )


def _uniform(lo):
    return (
        lambda z: 0.0 if lo <= z[0] <= lo + 1 else -np.inf,
        lambda rng: np.array([lo + rng.random()]),
    )


vectors = st.lists(st.floats(min_value=-10.0, max_value=10.0), min_size=3, max_size=3)


@given(vectors, vectors)
def test_householder_preserves_norm(w, e):
    w, e = np.array(w), np.array(e)
    if np.linalg.norm(e) < 1e-3:
        return
    e = e / np.linalg.norm(e)
    reflected = householder_reflect(w, e)
    assert np.linalg.norm(reflected) == pytest.approx(np.linalg.norm(w), rel=1e-9, abs=1e-9)
    np.testing.assert_allclose(householder_reflect(reflected, e), w, atol=1e-9)


def test_householder_in_one_dimension_negates():
    assert householder_reflect(np.array([0.7]), np.array([1.0]))[0] == -0.7


def test_identical_kernels_always_couple():
    logpdf, sampler = _normal(0.0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        z1, z2, merged = maximal_coupling_step(logpdf, sampler, logpdf, sampler, rng)
        assert merged and np.array_equal(z1, z2)


def test_disjoint_supports_never_couple():
    logpdf1, sampler1 = _uniform(0.0)
    logpdf2, sampler2 = _uniform(2.0)
    rng = np.random.default_rng(1)
    for _ in range(200):
        z1, z2, merged = maximal_coupling_step(logpdf1, sampler1, logpdf2, sampler2, rng)
        assert not merged
        assert 0.0 <= z1[0] <= 1.0 and 2.0 <= z2[0] <= 3.0


def test_unit_gap_normals_couple_with_overlap_probability():
    """N(0, 1) and N(1, 1) meet with probability 2 Phi(-1/2) and keep their marginals."""
    logpdf1, sampler1 = _normal(0.0)
    logpdf2, sampler2 = _normal(1.0)
    rng = np.random.default_rng(3)
    draws = [
        maximal_coupling_step(logpdf1, sampler1, logpdf2, sampler2, rng) for _ in range(100_000)
    ]
    frequency = np.mean([merged for _, _, merged in draws])
    assert frequency == pytest.approx(2 * stats.norm.cdf(-0.5), abs=0.005)
    second = np.array([z2[0] for _, z2, _ in draws])
    assert second.mean() == pytest.approx(1.0, abs=0.02)


def test_rejection_loop_gives_up():
    """p2 vanishes wherever p1 lives and the other way around for its own draws."""

    def sampler(rng):
        return np.array([rng.random()])

    with pytest.raises(NumericalDegeneracy):
        maximal_coupling_step(
            lambda z: 0.0, sampler, lambda z: -np.inf, sampler, np.random.default_rng(0),
            max_iter=10,
        )


def test_one_step_kernel_covariance():
    """Covariance of the one-step law is M M^T / V^2."""
    net = preset("sir")
    kernel = one_step_kernel(net, [1.0, 1.0], CFG)
    m = diffusion_matrix(net, [1.0, 1.0], CFG)
    np.testing.assert_allclose(kernel.cov, m @ m.T / CFG.volume**2, rtol=1e-9)
    np.testing.assert_allclose(kernel.mean, [1.003, 0.999])


def test_coupled_pair_invariants():
    with pytest.raises(StructureError):
        CoupledPair(np.array([1.0]), np.array([2.0]), coupled=True)
    with pytest.raises(StructureError):
        CouplingOutcome("coupled", None)
    pair = CoupledPair(np.array([1.0, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises(StructureError):
        reflection_step(pair, preset("sir"), CFG, np.zeros(2))


def test_reflection_moves_copies_with_mirrored_noise():
    """Zero noise leaves only the drifts; the step counter advances."""
    net = preset("sir")
    pair = CoupledPair(np.array([1.0, 1.0]), np.array([1.5, 1.5]))
    moved, fell_back = reflection_step(pair, net, CFG, np.zeros(2))
    assert not fell_back
    assert moved.t == 1
    np.testing.assert_allclose(moved.y1, [1.003, 0.999])


def test_reflection_coupled_copy_keeps_its_solo_marginal():
    """After five reflection steps the second copy is distributed like an uncoupled run."""
    net = preset("sir")
    cfg = SimConfig(volume=100, step=0.001, steps_per_segment=5)
    coupled, solo = [], []
    for i in range(2000):
        rng = np.random.default_rng([7, i])
        pair = CoupledPair(np.array([1.0, 1.0]), np.array([1.3, 1.2]))
        for _ in range(5):
            pair, _ = reflection_step(pair, net, cfg, rng.standard_normal(2), rng)
        coupled.append(pair.y2[0])

        rng = np.random.default_rng([8, i])
        y, clock = np.array([1.3, 1.2]), ChannelClock.zeros(net.num_reactions)
        for _ in range(5):
            y, clock, _ = em_step(net, y, clock, cfg, rng, form="square")
        solo.append(y[0])
    assert stats.ks_2samp(coupled, solo).pvalue > 0.01


def test_identical_start_is_coupled_at_zero():
    outcome = hybrid_coupling_run(
        preset("sir"), CFG, ([1.0, 1.0], [1.0, 1.0]), 0.05, 10, np.random.default_rng(0)
    )
    assert outcome.status == "coupled" and outcome.tau_c == 0


def test_nearly_identical_copies_all_couple_at_the_first_step():
    outcomes = collect_coupling_times(
        preset("sir"), CFG, 50, 0.05, 10, 3, start=([1.0, 1.0], [1.0, 1.0 + 1e-12])
    )
    assert all(o.status == "coupled" and o.tau_c == 1 for o in outcomes)
    curve = survival_curve(outcomes, [CFG.step, 2 * CFG.step], CFG.step)
    np.testing.assert_array_equal(curve.survivors, [0, 0])


def test_far_apart_copies_are_censored_after_one_step():
    outcome = hybrid_coupling_run(
        preset("sir"), CFG, ([1.0, 1.0], [1.5, 1.5]), 0.01, 1, np.random.default_rng(0)
    )
    assert outcome.status == "censored" and outcome.tau_c is None


def test_close_copies_merge_quickly():
    outcome = hybrid_coupling_run(
        preset("sir"), CFG, ([1.0, 1.0], [1.0001, 1.0]), 0.05, 50, np.random.default_rng(5)
    )
    assert outcome.status == "coupled"
    assert 1 <= outcome.tau_c <= 50


def test_copy_near_the_boundary_goes_extinct():
    cfg = SimConfig(volume=10, step=0.001, steps_per_segment=500)
    outcome = hybrid_coupling_run(
        preset("sir"), cfg, ([1.0, 1e-6], [1.0, 1.0]), 0.05, 10_000, np.random.default_rng(4)
    )
    assert outcome.status == "extinct"


def test_hybrid_run_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        hybrid_coupling_run(preset("sir"), CFG, ([1.0, 1.0], [1.2, 1.0]), 0.0, 10, rng)
    with pytest.raises(ConfigError):
        hybrid_coupling_run(preset("sir"), CFG, ([0.0, 1.0], [1.2, 1.0]), 0.05, 10, rng)


def test_default_threshold_is_two_noise_scales():
    """tr(M M^T) at (1, 1) is V h (7 + 2 * 3 + 1 + 4) = 18."""
    assert default_threshold(preset("sir"), CFG, [1.0, 1.0]) == pytest.approx(
        2 * np.sqrt(18.0) / 1000
    )


def _small_run(**kwargs):
    net = preset("sir")
    cfg = SimConfig(volume=100, step=0.001, steps_per_segment=100, seed=7)
    pool = burn_in_pool(net, cfg, initial_state("sir"), 500)
    threshold = default_threshold(net, cfg, initial_state("sir"))
    return collect_coupling_times(net, cfg, 20, threshold, 200, 7, pool=pool, **kwargs)


def test_outcomes_partition_the_runs():
    """Every run ends coupled, extinct or censored, in run order."""
    outcomes = _small_run()
    assert [o.run for o in outcomes] == list(range(20))
    assert {o.status for o in outcomes} <= {"coupled", "extinct", "censored"}
    for o in outcomes:
        assert (o.tau_c is not None) == (o.status == "coupled")
        if o.tau_c is not None:
            assert 1 <= o.tau_c <= 200


def test_outcomes_do_not_depend_on_workers():
    serial = _small_run()
    with ThreadPoolExecutor(max_workers=3) as pool:
        parallel = _small_run(workers=pool)
    assert serial == parallel


def test_burn_in_pool_drops_leading_share():
    net = preset("sir")
    cfg = SimConfig(volume=100, step=0.001, steps_per_segment=100, seed=7)
    pool = burn_in_pool(net, cfg, initial_state("sir"), 500, discard=0.2)
    assert pool.shape == (400, 2)
    assert np.all(pool > 0)


def test_collect_needs_runs_and_starts():
    net = preset("sir")
    with pytest.raises(ConfigError):
        collect_coupling_times(net, CFG, 0, 0.05, 10, 0, start=([1.0, 1.0], [1.0, 1.0]))
    with pytest.raises(ConfigError):
        collect_coupling_times(net, CFG, 5, 0.05, 10, 0)


def test_write_outcomes_csv():
    stream = io.StringIO()
    outcomes = [CouplingOutcome("coupled", 4, 0, 0), CouplingOutcome("extinct", None, 0, 1)]
    write_outcomes_csv(stream, outcomes, 0.5)
    assert stream.getvalue().splitlines() == [
        "run,status,tau_steps,tau_time",
        "0,coupled,4,2.0",
        "1,extinct,,",
    ]
