"""Sensitivity bound for the QSD of the Poisson model against its diffusion approximation.

    d_w(pi_X, pi_Y) <= finite time error / (1 - alpha),   alpha = exp(-gamma T)

The finite time error comes from chained paired segments, gamma from the exponential tail of
coupling times of two diffusion copies.
"""

import csv
import logging
import math
from concurrent.futures import Executor
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
from scipy.integrate import solve_ivp

from qsd_sensitivity import rng as rngmod
from qsd_sensitivity.coupling import (
    CouplingOutcome,
    burn_in_pool,
    collect_coupling_times,
    default_threshold,
)
from qsd_sensitivity.errors import (
    ConfigError,
    DivergentBound,
    HorizonExceeded,
    StructureError,
    TailFitRejected,
)
from qsd_sensitivity.network import ReactionNetwork, as_state, deterministic_rhs, propensities
from qsd_sensitivity.paired_paths import SkeletonSet, generate_skeleton_set, required_length
from qsd_sensitivity.presets import initial_state, preset, preset_defaults
from qsd_sensitivity.simulate import (
    ChannelClock,
    OccupationReservoir,
    RegenSequence,
    SimConfig,
    simulate_with_regeneration,
)

logger = logging.getLogger(__name__)

Z_95 = 1.96
MAX_SKELETON_DOUBLINGS = 8


@dataclass(frozen=True)
class FiniteTimeErrorEstimate:
    mean: float
    std_error: float
    segments: int
    horizon: float
    volume: float
    distances: Optional[np.ndarray] = None
    regenerations: Tuple[int, int] = (0, 0)
    burn_in_steps: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mean <= 1.0:
            raise StructureError(f"capped distance mean must lie in [0, 1], got {self.mean}")


def segment_distance(x, y) -> float:
    """min(1, |x - y|)"""
    return min(1.0, float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))))


def internal_horizon(net: ReactionNetwork, cfg: SimConfig, start) -> np.ndarray:
    """Deterministic estimate of V integral_0^T f_k(x(t)) dt for every channel."""
    d = net.dimension

    def rhs(_t, z):
        x = np.maximum(z[:d], 0.0)
        return np.concatenate((deterministic_rhs(net, x), cfg.volume * propensities(net, x)))

    z0 = np.concatenate((as_state(net, start), np.zeros(net.num_reactions)))
    solution = solve_ivp(rhs, (0.0, cfg.horizon), z0, method="LSODA", rtol=1e-6, atol=1e-9)
    if not solution.success:
        # fall back to frozen propensities at the start point
        return cfg.volume * cfg.horizon * propensities(net, as_state(net, start))
    return solution.y[d:, -1]


def _run_segment(net, cfg, steps, start, skeletons, regen, reservoirs, offset):
    runs = []
    for process, reservoir in zip(("poisson", "diffusion"), reservoirs):
        runs.append(
            simulate_with_regeneration(
                net, cfg, process, steps, regen,
                start=start,
                skeletons=skeletons,
                reservoir=reservoir,
                clock=None if offset is None else ChannelClock(offset.copy()),
                keep_trajectory=False,
            )
        )
    return runs[0], runs[1]


def _burn_in(net: ReactionNetwork, cfg: SimConfig, start, steps: int):
    """Free tau-leaping run whose end state and occupation reservoir seed segment 0."""
    result = simulate_with_regeneration(
        net,
        replace(cfg, mode="free"),
        "poisson",
        steps,
        start=start,
        rng=rngmod.stream(cfg.seed, rngmod.BURN_IN, 1),
        keep_trajectory=False,
    )
    logger.info("burn-in: %d steps, %d regenerations", steps, result.regen_count)
    return result.final_state, result.reservoir


def finite_time_error(
    net: ReactionNetwork,
    cfg: SimConfig,
    segments: int,
    start,
    delta: float,
    *,
    skeletons: Optional[SkeletonSet] = None,
    skeleton_length: Optional[int] = None,
    regen_budget: Optional[int] = None,
    reuse_skeletons: bool = False,
    burn_in_steps: Optional[int] = None,
    margin: float = 1.5,
) -> FiniteTimeErrorEstimate:
    """Mean capped distance between the two processes after T over chained segments.

    A free tau-leaping burn-in of 10 T is run first and discarded; its end state starts
    segment 0 and its visited states fill both occupation reservoirs. Every segment then starts
    both processes from the Poisson end state of the previous one with a fresh regeneration
    sequence shared by the two processes.

    By default each segment draws its own skeleton set. With reuse_skeletons (or an explicit
    `skeletons`) one long set serves all segments and the channel clocks continue where the
    previous segment's Poisson run left them, so no stretch of noise is used twice.

    Skeleton length is sized from the deterministic internal horizon times `margin`. When an
    explicit skeleton_length or skeleton set is given, running past it raises HorizonExceeded;
    otherwise the segment is redone on a skeleton twice as long. Skeletons are prefix-stable,
    so the estimate does not depend on how many resizes happened.

    Args:
        net: reaction network
        cfg: volume, step and steps per segment; cfg.seed keys every stream
        segments: number of chained segments M
        start: interior initial state
        delta: skeleton grid step
        skeletons: one skeleton set shared by every segment
        skeleton_length: fixed skeleton length in cells
        regen_budget: regeneration uniforms per segment, default steps per segment
        reuse_skeletons: share one growing skeleton set between the segments
        burn_in_steps: discarded burn-in steps, default ceil(10 T / h); 0 skips it
        margin: safety factor on the internal horizon estimate

    Returns:
        FiniteTimeErrorEstimate
    """
    if segments < 1:
        raise ConfigError(f"need at least one segment, got {segments}")
    paired = replace(cfg, mode="paired")
    steps = paired.steps_per_segment
    budget = regen_budget or steps
    fixed = skeletons is not None or skeleton_length is not None
    shared = skeletons is not None or reuse_skeletons
    burn_in = 10 * steps if burn_in_steps is None else burn_in_steps
    if burn_in < 0:
        raise ConfigError(f"burn-in steps must be non-negative, got {burn_in}")

    if burn_in:
        x, burnt = _burn_in(net, paired, start, burn_in)
        reservoirs = (burnt, burnt.copy())
    else:
        x = as_state(net, start).copy()
        reservoirs = (
            OccupationReservoir(net.dimension, paired.thinning),
            OccupationReservoir(net.dimension, paired.thinning),
        )

    distances = np.empty(segments)
    regenerations = [0, 0]
    report_every = max(segments // 10, 1)
    offset = np.zeros(net.num_reactions) if shared else None
    skels = skeletons

    for m in range(segments):
        if m and not paired.carry_reservoir:
            reservoirs = (
                OccupationReservoir(net.dimension, paired.thinning),
                OccupationReservoir(net.dimension, paired.thinning),
            )
        regen = RegenSequence.from_seed(paired.seed, budget, segment=m)
        if skeletons is None:
            length = skeleton_length or required_length(
                internal_horizon(net, paired, x), delta, margin, offset
            )
            if not shared or skels is None or skels.length < length:
                if shared and skels is not None:
                    length = max(length, 2 * skels.length)
                skels = None

        for attempt in range(MAX_SKELETON_DOUBLINGS + 1):
            if skels is None:
                skels = generate_skeleton_set(
                    delta, length, paired.seed, net.num_reactions, segment=0 if shared else m
                )
            marks = (reservoirs[0].mark(), reservoirs[1].mark())
            regen.reset()
            try:
                px, py = _run_segment(net, paired, steps, x, skels, regen, reservoirs, offset)
                break
            except HorizonExceeded:
                if fixed or attempt == MAX_SKELETON_DOUBLINGS:
                    raise
                reservoirs[0].rollback(marks[0])
                reservoirs[1].rollback(marks[1])
                length = 2 * skels.length
                skels = None
                logger.info("segment %d: skeleton too short, retrying with %d cells", m, length)

        distances[m] = segment_distance(px.final_state, py.final_state)
        regenerations[0] += px.regen_count
        regenerations[1] += py.regen_count
        x = px.final_state
        if shared:
            offset = px.clock.q.copy()
        if (m + 1) % report_every == 0:
            logger.info(
                "finite time error: %d/%d segments, running mean %.4g",
                m + 1, segments, distances[: m + 1].mean(),
            )

    std_error = float(distances.std(ddof=1) / math.sqrt(segments)) if segments > 1 else 0.0
    return FiniteTimeErrorEstimate(
        float(distances.mean()),
        std_error,
        segments,
        paired.horizon,
        paired.volume,
        distances,
        tuple(regenerations),
        burn_in,
    )


@dataclass(frozen=True)
class SurvivalCurve:
    """n_i runs still uncoupled at t_i out of `trials` non-extinct runs."""

    times: np.ndarray
    survivors: np.ndarray
    trials: int

    @property
    def p(self) -> np.ndarray:
        return self.survivors / self.trials


def survival_curve(
    outcomes: Sequence[CouplingOutcome], times: Sequence[float], step: float
) -> SurvivalCurve:
    """Conditional survival P(tau_c > t_i) over the runs that did not go extinct.

    Censored runs count as survivors at every grid time.
    """
    grid = np.asarray(times, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ConfigError("the survival time grid must be a non-empty 1-D sequence")
    if np.any(np.diff(grid) <= 0):
        raise ConfigError("the survival time grid must be strictly increasing")
    kept = [o for o in outcomes if o.status != "extinct"]
    if not kept:
        raise ConfigError("every coupling run went extinct; nothing to fit")
    if not any(o.status == "coupled" for o in kept):
        raise ConfigError("no coupling run coupled; run the coupling for longer")
    tau = np.array([o.tau_c * step if o.status == "coupled" else np.inf for o in kept])
    survivors = (tau[np.newaxis, :] > grid[:, np.newaxis]).sum(axis=1)
    return SurvivalCurve(grid, survivors, len(kept))


def default_time_grid(
    outcomes: Sequence[CouplingOutcome], step: float, points: int = 40
) -> np.ndarray:
    """Evenly spaced times from h to the 99th percentile of the coupled times."""
    coupled = [o.tau_c * step for o in outcomes if o.status == "coupled"]
    if not coupled:
        raise ConfigError("no coupling run coupled; cannot place a time grid")
    top = max(float(np.percentile(coupled, 99)), 2 * step)
    return np.linspace(step, top, points)


def agresti_coull(
    successes, trials: int, z: float = Z_95, compat: bool = False
) -> Tuple[np.ndarray, np.ndarray]:
    """Agresti-Coull interval for a binomial proportion, clipped to [0, 1].

    n~ = trials + z^2, p~ = (successes + z^2 / 2) / n~. With compat=True n~ is
    successes + z^2 instead.
    """
    n = np.asarray(successes, dtype=float)
    n_tilde = (n if compat else trials) + z * z
    p_tilde = (n + z * z / 2) / n_tilde
    half = z * np.sqrt(np.clip(p_tilde * (1 - p_tilde), 0.0, None) / n_tilde)
    return np.clip(p_tilde - half, 0.0, 1.0), np.clip(p_tilde + half, 0.0, 1.0)


@dataclass(frozen=True)
class TailFit:
    gamma: float
    intercept: float
    tail_start: Optional[int]
    times: np.ndarray
    p: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    accepted: bool
    message: str = ""

    @property
    def tail_start_time(self) -> Optional[float]:
        return None if self.tail_start is None else float(self.times[self.tail_start])


def _log_linear_fit(
    t: np.ndarray, p: np.ndarray, trials: int
) -> Optional[Tuple[float, float]]:
    positive = p > 0
    if positive.sum() < 2:
        return None
    t, p = t[positive], p[positive]
    # 1 / sd of log p_i under binomial sampling
    weights = np.sqrt(trials * p / np.maximum(1.0 - p, 1.0 / trials))
    slope, intercept = np.polyfit(t, np.log(p), 1, w=weights)
    return -float(slope), float(intercept)


def fit_exponential_tail(
    curve: SurvivalCurve,
    z: float = Z_95,
    width_threshold: float = 0.1,
    compat: bool = False,
) -> TailFit:
    """Fit p_i ~ exp(a - gamma t_i) on the tail of a survival curve.

    log p_i is fitted by least squares weighted with the binomial standard error of each point.
    The tail starts at the smallest index i0 for which the fit over i >= i0 stays
    inside the Agresti-Coull band at every i >= i0. The fit is accepted when the band at i0 is
    narrower than width_threshold and gamma > 0.
    """
    t, p = curve.times, curve.p
    lower, upper = agresti_coull(curve.survivors, curve.trials, z, compat)

    for i0 in range(len(t) - 1):
        fit = _log_linear_fit(t[i0:], p[i0:], curve.trials)
        if fit is None:
            break
        gamma, intercept = fit
        fitted = np.exp(intercept - gamma * t[i0:])
        if np.all((fitted >= lower[i0:]) & (fitted <= upper[i0:])):
            width = float(upper[i0] - lower[i0])
            if gamma <= 0:
                message = f"survival does not decay (gamma={gamma:.4g})"
            elif width >= width_threshold:
                message = (
                    f"confidence band at the tail start is {width:.3g} wide "
                    f"(limit {width_threshold}); add coupling runs"
                )
            else:
                message = ""
            accepted = not message
            logger.info(
                "tail fit: gamma=%.4g from t=%.4g (%s)",
                gamma, t[i0], "accepted" if accepted else "rejected",
            )
            return TailFit(gamma, intercept, i0, t, p, lower, upper, accepted, message)

    fit = _log_linear_fit(t, p, curve.trials)
    gamma, intercept = fit if fit is not None else (float("nan"), float("nan"))
    return TailFit(
        gamma, intercept, None, t, p, lower, upper, False,
        "no tail start keeps the fit inside the confidence band; run the coupling for longer",
    )


@dataclass(frozen=True)
class BoundReport:
    fte: float
    fte_std_error: float
    gamma: float
    alpha: float
    bound: float
    horizon: float
    volume: Optional[float] = None
    step: Optional[float] = None
    preset: str = ""
    # discretisation terms of order h are reported, never added
    correction: str = "+ O(h)"


def assemble_bound(
    fte: Union[FiniteTimeErrorEstimate, float],
    gamma: float,
    horizon: float,
    *,
    volume: Optional[float] = None,
    step: Optional[float] = None,
    preset_name: str = "",
) -> BoundReport:
    """bound = fte / (1 - exp(-gamma T))"""
    if not horizon > 0:
        raise ConfigError(f"horizon must be positive, got {horizon}")
    if not gamma > 0:
        raise DivergentBound(
            f"contraction rate gamma={gamma} gives alpha >= 1; the bound does not apply"
        )
    if isinstance(fte, FiniteTimeErrorEstimate):
        mean, se = fte.mean, fte.std_error
        volume = fte.volume if volume is None else volume
    else:
        mean, se = float(fte), 0.0
    alpha = math.exp(-gamma * horizon)
    return BoundReport(
        fte=mean,
        fte_std_error=se,
        gamma=float(gamma),
        alpha=alpha,
        bound=mean / (1.0 - alpha),
        horizon=horizon,
        volume=volume,
        step=step,
        preset=preset_name,
    )


@dataclass(frozen=True)
class Budgets:
    """Monte Carlo budgets of one bound estimate."""

    segments: int
    runs: int
    max_coupling_steps: Optional[int] = None
    burn_in_steps: Optional[int] = None
    threshold: Optional[float] = None
    width_threshold: float = 0.1
    compat_ac: bool = False
    reuse_skeletons: bool = False
    skeleton_length: Optional[int] = None

    def __post_init__(self):
        if self.segments < 1 or self.runs < 1:
            raise ConfigError("segment and run budgets must be at least 1")
        if self.threshold is not None and not self.threshold > 0:
            raise ConfigError(f"coupling threshold must be positive, got {self.threshold}")


def estimate_contraction(
    net: ReactionNetwork,
    cfg: SimConfig,
    budgets: Budgets,
    start,
    *,
    workers: Optional[Executor] = None,
) -> Tuple[List[CouplingOutcome], SurvivalCurve, TailFit]:
    """Coupling times of two diffusion copies started from a burn-in pool, and their tail fit."""
    free = replace(cfg, mode="free")
    burn_in = budgets.burn_in_steps or 10 * free.steps_per_segment
    pool = burn_in_pool(net, free, start, burn_in)
    threshold = budgets.threshold or default_threshold(net, free, start)
    max_steps = budgets.max_coupling_steps or 20 * free.steps_per_segment
    logger.info(
        "coupling: %d runs, threshold %.4g, up to %d steps each", budgets.runs, threshold, max_steps
    )
    outcomes = collect_coupling_times(
        net, free, budgets.runs, threshold, max_steps, free.seed, pool=pool, workers=workers
    )
    curve = survival_curve(outcomes, default_time_grid(outcomes, free.step), free.step)
    fit = fit_exponential_tail(
        curve, width_threshold=budgets.width_threshold, compat=budgets.compat_ac
    )
    return outcomes, curve, fit


def estimate_bound(
    net: ReactionNetwork,
    start,
    cfg: SimConfig,
    budgets: Budgets,
    delta: float,
    *,
    workers: Optional[Executor] = None,
    label: str = "",
) -> BoundReport:
    """Finite time error, contraction rate and the assembled bound for one network and volume.

    Raises:
        TailFitRejected: the coupling-time tail was not accepted
        DivergentBound: the fitted rate is not positive
    """
    logger.info("%s V=%g: h=%g T=%g", label or "network", cfg.volume, cfg.step, cfg.horizon)
    fte = finite_time_error(
        net,
        cfg,
        budgets.segments,
        start,
        delta,
        skeleton_length=budgets.skeleton_length,
        reuse_skeletons=budgets.reuse_skeletons,
    )
    _, _, fit = estimate_contraction(net, cfg, budgets, start, workers=workers)
    if not fit.accepted:
        raise TailFitRejected(f"{label or 'network'} V={cfg.volume:g}: {fit.message}")
    report = assemble_bound(
        fte, fit.gamma, cfg.horizon, volume=cfg.volume, step=cfg.step, preset_name=label
    )
    logger.info(
        "%s V=%g: fte=%.4g gamma=%.4g bound=%.4g",
        label or "network", cfg.volume, report.fte, report.gamma, report.bound,
    )
    return report


def table_row(
    preset_name: str,
    volume: float,
    step: float,
    horizon: float,
    budgets: Budgets,
    seed: int,
    *,
    delta: Optional[float] = None,
    workers: Optional[Executor] = None,
) -> BoundReport:
    """One row (V, fte, gamma, bound) of a results table for a preset network."""
    defaults = preset_defaults(preset_name)
    return estimate_bound(
        preset(preset_name),
        initial_state(preset_name, defaults),
        SimConfig.from_horizon(volume, step, horizon, seed=seed),
        budgets,
        delta or defaults.delta,
        workers=workers,
        label=preset_name,
    )


BOUND_COLUMNS = ("V", "fte", "gamma", "bound", "alpha", "fte_se", "h", "T", "preset")


def write_bound_csv(stream: TextIO, reports: Sequence[BoundReport]) -> None:
    """Rows in table layout: V, fte, gamma, bound first."""
    writer = csv.writer(stream)
    writer.writerow(BOUND_COLUMNS)
    for r in reports:
        writer.writerow(
            [
                "" if r.volume is None else repr(float(r.volume)),
                repr(r.fte),
                repr(r.gamma),
                repr(r.bound),
                repr(r.alpha),
                repr(r.fte_std_error),
                "" if r.step is None else repr(float(r.step)),
                repr(r.horizon),
                r.preset,
            ]
        )
