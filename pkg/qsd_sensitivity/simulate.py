"""Tau-leaping and Euler-Maruyama simulation with regeneration on absorption.

Both processes run on the concentration scale x = count / V. In paired mode the channel noise
comes from a SkeletonSet (one paired Poisson/Wiener skeleton per reaction); in free mode it is
drawn fresh from a Generator. When a step lands on the absorbing set the process restarts from a
state sampled uniformly out of its own occupation reservoir.
"""

import csv
import logging
import math
from dataclasses import dataclass, replace
from typing import Literal, Optional, TextIO, Tuple, Union

import numpy as np

from qsd_sensitivity import rng as rngmod
from qsd_sensitivity.errors import (
    ConfigError,
    InvalidCovariance,
    RegenExhausted,
    StructureError,
)
from qsd_sensitivity.network import (
    ProcessKind,
    ReactionNetwork,
    as_state,
    in_absorbing,
    propensities,
)
from qsd_sensitivity.paired_paths import SkeletonSet

logger = logging.getLogger(__name__)

SimMode = Literal["paired", "free"]
NoiseForm = Literal["rectangular", "square"]
Randomness = Union[SkeletonSet, np.random.Generator]


@dataclass(frozen=True)
class SimConfig:
    """Volume, step and segment length of a run.

    thinning stores every s-th visited state in the occupation reservoir; carry_reservoir keeps
    the reservoir across segments of a finite time error run instead of resetting it.
    """

    volume: float
    step: float
    steps_per_segment: int
    seed: int = 0
    mode: SimMode = "free"
    thinning: int = 1
    carry_reservoir: bool = True

    def __post_init__(self):
        if not self.volume > 0:
            raise ConfigError(f"volume must be positive, got {self.volume}")
        if not self.step > 0:
            raise ConfigError(f"time step must be positive, got {self.step}")
        if self.steps_per_segment < 1:
            raise ConfigError(
                f"steps per segment must be at least 1, got {self.steps_per_segment}"
            )
        if self.mode not in ("paired", "free"):
            raise ConfigError(f"unknown simulation mode {self.mode!r}")
        if self.thinning < 1:
            raise ConfigError(f"thinning must be at least 1, got {self.thinning}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    @property
    def horizon(self) -> float:
        """T = h * T_steps"""
        return self.step * self.steps_per_segment

    @classmethod
    def from_horizon(cls, volume: float, step: float, horizon: float, **kwargs) -> "SimConfig":
        steps = int(round(horizon / step))
        if steps < 1 or abs(steps * step - horizon) > 1e-9 * horizon:
            raise ConfigError(
                f"horizon {horizon} is not an integer multiple of the step {step}"
            )
        return cls(volume, step, steps, **kwargs)


@dataclass(frozen=True)
class ChannelClock:
    """Cumulative internal intensity q_k = V h sum_m f_k(x_m) of every channel."""

    q: np.ndarray

    @classmethod
    def zeros(cls, channels: int) -> "ChannelClock":
        return cls(np.zeros(channels))

    def advance(self, dq: np.ndarray) -> "ChannelClock":
        if np.any(dq < 0):
            raise StructureError("internal intensity increments must be non-negative")
        return ChannelClock(self.q + dq)


class OccupationReservoir:
    """Append-only pool of visited interior states, the empirical occupation measure.

    Backed by a doubling numpy buffer. With thinning s only every s-th recorded state is kept;
    `recorded` counts all of them and `len()` the stored ones.
    """

    def __init__(self, dimension: int, thinning: int = 1, capacity: int = 1024):
        if thinning < 1:
            raise ConfigError(f"thinning must be at least 1, got {thinning}")
        self.dimension = dimension
        self.thinning = thinning
        self._buffer = np.empty((max(capacity, 1), dimension))
        self._size = 0
        self.recorded = 0

    def __len__(self) -> int:
        return self._size

    @property
    def states(self) -> np.ndarray:
        """Read-only view of the stored states, shape (n, d)."""
        view = self._buffer[: self._size]
        view.flags.writeable = False
        return view

    def append(self, state: np.ndarray) -> None:
        if in_absorbing(state):
            raise StructureError("the occupation reservoir only holds interior states")
        self.recorded += 1
        if (self.recorded - 1) % self.thinning:
            return
        if self._size == self._buffer.shape[0]:
            grown = np.empty((2 * self._buffer.shape[0], self.dimension))
            grown[: self._size] = self._buffer[: self._size]
            self._buffer = grown
        self._buffer[self._size] = state
        self._size += 1

    def copy(self) -> "OccupationReservoir":
        clone = OccupationReservoir(self.dimension, self.thinning, self._buffer.shape[0])
        clone._buffer[: self._size] = self._buffer[: self._size]
        clone._size, clone.recorded = self._size, self.recorded
        return clone

    def mark(self) -> Tuple[int, int]:
        return self._size, self.recorded

    def rollback(self, mark: Tuple[int, int]) -> None:
        """Forget every state appended since `mark`."""
        self._size, self.recorded = mark

    def sample(self, z: float) -> np.ndarray:
        """Entry floor(z * n) for z in (0, 1)."""
        if self._size == 0:
            raise StructureError("cannot sample from an empty reservoir")
        if not 0.0 < z < 1.0:
            raise ValueError(f"regeneration uniform must lie in (0, 1), got {z}")
        return self._buffer[min(int(math.floor(z * self._size)), self._size - 1)].copy()


class RegenSequence:
    """Shared regeneration uniforms Z_1..Z_N with separate counters for the two processes."""

    def __init__(self, uniforms: np.ndarray):
        uniforms = np.asarray(uniforms, dtype=float)
        if uniforms.ndim != 1 or np.any(uniforms <= 0) or np.any(uniforms >= 1):
            raise ValueError("regeneration uniforms must be a 1-D array in (0, 1)")
        self.uniforms = uniforms
        self.counters = {"poisson": 0, "diffusion": 0}

    @classmethod
    def from_seed(cls, seed: int, size: int, segment: int = 0) -> "RegenSequence":
        return cls(
            rngmod.open_uniforms(rngmod.stream(seed, rngmod.REGENERATION, segment), size)
        )

    def __len__(self) -> int:
        return self.uniforms.shape[0]

    def draw(self, process: ProcessKind) -> float:
        n = self.counters[process]
        if n >= len(self):
            raise RegenExhausted(
                f"the {process} process used all {len(self)} regeneration uniforms; "
                "raise the regeneration budget N"
            )
        self.counters[process] = n + 1
        return float(self.uniforms[n])

    def reset(self) -> None:
        self.counters = {"poisson": 0, "diffusion": 0}


@dataclass
class SimulationResult:
    final_state: np.ndarray
    reservoir: OccupationReservoir
    regen_count: int
    clock: ChannelClock
    trajectory: Optional[np.ndarray] = None
    regen_flags: Optional[np.ndarray] = None
    step: float = 0.0
    process: ProcessKind = "poisson"


def tau_leap_step(
    net: ReactionNetwork,
    state,
    clock: ChannelClock,
    cfg: SimConfig,
    randomness: Randomness,
):
    """One tau-leaping step.

    Args:
        net: reaction network
        state: current interior concentration vector
        clock: channel clocks before the step
        cfg: volume and step size
        randomness: SkeletonSet for paired mode, Generator for free mode

    Returns:
        (state', clock', absorbed)
    """
    x = as_state(net, state)
    dq = cfg.volume * cfg.step * propensities(net, x)
    new_clock = clock.advance(dq)
    if isinstance(randomness, np.random.Generator):
        counts = randomness.poisson(dq)
    else:
        counts = randomness.poisson_increment(clock.q, new_clock.q)
    new_state = x + (counts @ net.change_matrix) / cfg.volume
    return new_state, new_clock, in_absorbing(new_state, "poisson")


def diffusion_matrix(net: ReactionNetwork, state, cfg: SimConfig) -> np.ndarray:
    """d x K matrix whose column k is l_k * sqrt(V h f_k(state))."""
    f = propensities(net, state)
    assert np.all(f >= 0)
    return net.change_matrix.T * np.sqrt(cfg.volume * cfg.step * f)


def covariance_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root by spectral decomposition."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise InvalidCovariance(f"expected a square matrix, got shape {cov.shape}")
    scale = max(1.0, float(np.max(np.abs(cov))))
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10 * scale):
        raise InvalidCovariance("covariance matrix is not symmetric")
    eigenvalues, vectors = np.linalg.eigh((cov + cov.T) / 2)
    if np.any(eigenvalues < -1e-8 * scale):
        raise InvalidCovariance(
            f"covariance matrix has a negative eigenvalue {eigenvalues.min():.3g}"
        )
    roots = np.sqrt(np.clip(eigenvalues, 0.0, None))
    root = (vectors * roots) @ vectors.T
    return (root + root.T) / 2


def closed_form_sqrt_2x2(cov: np.ndarray) -> np.ndarray:
    """(N + sqrt(det N) I) / sqrt(tr N + 2 sqrt(det N)) for a 2 x 2 PSD matrix."""
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (2, 2):
        raise InvalidCovariance(f"closed form needs a 2 x 2 matrix, got {cov.shape}")
    s = math.sqrt(max(np.linalg.det(cov), 0.0))
    t = math.sqrt(np.trace(cov) + 2 * s)
    if t == 0:
        return np.zeros((2, 2))
    return (cov + s * np.eye(2)) / t


def em_step(
    net: ReactionNetwork,
    state,
    clock: ChannelClock,
    cfg: SimConfig,
    randomness: Randomness,
    form: NoiseForm = "rectangular",
):
    """One Euler-Maruyama step of the chemical Langevin equation.

    Propensities are evaluated on max(state, 0) so a marginal overshoot never yields NaN.
    The square form only applies to free mode; paired noise always comes channel by channel.

    Returns:
        (state', clock', absorbed)
    """
    x = as_state(net, state)
    f = propensities(net, np.maximum(x, 0.0))
    drift = cfg.step * (f @ net.change_matrix)
    dq = cfg.volume * cfg.step * f
    new_clock = clock.advance(dq)

    if isinstance(randomness, np.random.Generator):
        m = net.change_matrix.T * np.sqrt(dq)
        if form == "rectangular":
            noise = m @ randomness.standard_normal(net.num_reactions)
        elif form == "square":
            noise = covariance_sqrt(m @ m.T) @ randomness.standard_normal(net.dimension)
        else:
            raise ConfigError(f"unknown noise form {form!r}")
    else:
        noise = randomness.wiener_increment(clock.q, new_clock.q) @ net.change_matrix

    new_state = x + drift + noise / cfg.volume
    return new_state, new_clock, in_absorbing(new_state, "diffusion")


def simulate_with_regeneration(
    net: ReactionNetwork,
    cfg: SimConfig,
    process: ProcessKind,
    steps: int,
    regen: Optional[RegenSequence] = None,
    *,
    start,
    skeletons: Optional[SkeletonSet] = None,
    rng: Optional[np.random.Generator] = None,
    reservoir: Optional[OccupationReservoir] = None,
    clock: Optional[ChannelClock] = None,
    form: NoiseForm = "rectangular",
    keep_trajectory: bool = True,
    replica: int = 0,
) -> SimulationResult:
    """Run `steps` steps of one process, regenerating from the occupation measure on absorption.

    The reservoir holds x_0..x_{n-1} when step n is taken, so a step absorbed at n restarts
    from entry floor(Z * n); with an empty reservoir it restarts from the current state. Z comes
    from `regen` when given (paired runs share it between the two processes) and otherwise
    from the process generator.

    Args:
        net: reaction network
        cfg: run configuration; cfg.mode selects skeleton or fresh noise
        process: "poisson" (tau-leaping) or "diffusion" (Euler-Maruyama)
        steps: number of steps
        regen: shared regeneration uniforms
        start: interior initial state
        skeletons: channel skeletons, required in paired mode
        rng: generator for free mode, defaults to the replica stream of cfg.seed
        reservoir: reservoir to continue filling, a fresh one otherwise
        clock: channel clocks to continue from, zero otherwise
        form: Euler-Maruyama noise form in free mode
        keep_trajectory: also return every visited state
        replica: replica index for the default generator

    Returns:
        SimulationResult with the final state, reservoir, regeneration count and clocks
    """
    if steps < 1:
        raise ConfigError(f"steps must be at least 1, got {steps}")
    if process not in ("poisson", "diffusion"):
        raise ConfigError(f"unknown process {process!r}")
    x = as_state(net, start).copy()
    if in_absorbing(x):
        raise ConfigError(f"initial state {tuple(x)} is not interior")

    if cfg.mode == "paired":
        if skeletons is None:
            raise ConfigError("paired mode needs channel skeletons")
        if len(skeletons) != net.num_reactions:
            raise StructureError(
                f"{len(skeletons)} skeletons for {net.num_reactions} reactions"
            )
        if regen is None:
            raise ConfigError("paired mode needs a shared regeneration sequence")
        noise: Randomness = skeletons
    else:
        rng = rng if rng is not None else rngmod.stream(cfg.seed, rngmod.REPLICA, replica)
        noise = rng

    reservoir = reservoir if reservoir is not None else OccupationReservoir(
        net.dimension, cfg.thinning
    )
    clock = clock if clock is not None else ChannelClock.zeros(net.num_reactions)
    advance = tau_leap_step if process == "poisson" else em_step
    kwargs = {} if process == "poisson" else {"form": form}

    trajectory = np.empty((steps + 1, net.dimension)) if keep_trajectory else None
    flags = np.zeros(steps + 1, dtype=bool) if keep_trajectory else None
    if keep_trajectory:
        trajectory[0] = x

    regen_count = 0
    report_every = max(steps // 10, 1)
    for n in range(steps):
        new_x, clock, absorbed = advance(net, x, clock, cfg, noise, **kwargs)
        if absorbed:
            if len(reservoir) == 0:
                new_x = x.copy()
            else:
                z = regen.draw(process) if regen is not None else float(
                    rngmod.open_uniforms(rng, 1)[0]
                )
                new_x = reservoir.sample(z)
            regen_count += 1
            if keep_trajectory:
                flags[n + 1] = True
        reservoir.append(x)
        x = new_x
        if keep_trajectory:
            trajectory[n + 1] = x
        if steps >= 100_000 and (n + 1) % report_every == 0:
            logger.info(
                "%s: %d/%d steps, %d regenerations", process, n + 1, steps, regen_count
            )

    logger.debug("%s run of %d steps: %d regenerations", process, steps, regen_count)
    return SimulationResult(
        final_state=x,
        reservoir=reservoir,
        regen_count=regen_count,
        clock=clock,
        trajectory=trajectory,
        regen_flags=flags,
        step=cfg.step,
        process=process,
    )


def paired_sup_distance(
    net: ReactionNetwork,
    cfg: SimConfig,
    start,
    skeletons: SkeletonSet,
) -> float:
    """sup_n |X_n - Y_n| (Euclidean) of tau-leaping and Euler-Maruyama on shared skeletons.

    No regeneration: the comparison stops at the first step where either process is absorbed.
    """
    paired = replace(cfg, mode="paired")
    x = y = as_state(net, start)
    clock_x = clock_y = ChannelClock.zeros(net.num_reactions)
    sup = 0.0
    for n in range(paired.steps_per_segment):
        x, clock_x, absorbed_x = tau_leap_step(net, x, clock_x, paired, skeletons)
        y, clock_y, absorbed_y = em_step(net, y, clock_y, paired, skeletons)
        sup = max(sup, float(np.linalg.norm(x - y)))
        if absorbed_x or absorbed_y:
            logger.warning("sup-distance run absorbed at step %d of %d", n + 1,
                           paired.steps_per_segment)
            break
    return sup


def write_trajectory_csv(
    stream: TextIO, net: ReactionNetwork, result: SimulationResult
) -> None:
    """CSV with columns step, time, one per species, regen."""
    if result.trajectory is None:
        raise ConfigError("the run did not keep its trajectory")
    writer = csv.writer(stream)
    writer.writerow(["step", "time", *net.species_names, "regen"])
    for n, (state, flag) in enumerate(zip(result.trajectory, result.regen_flags)):
        writer.writerow([n, repr(n * result.step), *(repr(float(v)) for v in state), int(flag)])
