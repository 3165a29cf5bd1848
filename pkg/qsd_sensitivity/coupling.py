"""Couplings of two copies of the discretised diffusion and coupling-time collection.

Far apart, the copies move by reflection coupling; within the threshold distance every step
attempts a maximal coupling of the two one-step Gaussian kernels. Copies only merge through a
successful maximal coupling, and stay merged afterwards.
"""

import csv
import logging
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Callable, List, Literal, Optional, Sequence, TextIO, Tuple

import numpy as np
from scipy.stats import multivariate_normal

from qsd_sensitivity import rng as rngmod
from qsd_sensitivity.errors import ConfigError, NumericalDegeneracy, StructureError
from qsd_sensitivity.network import (
    ReactionNetwork,
    as_state,
    in_absorbing,
    propensities,
)
from qsd_sensitivity.simulate import (
    SimConfig,
    covariance_sqrt,
    diffusion_matrix,
    simulate_with_regeneration,
)

logger = logging.getLogger(__name__)

Status = Literal["coupled", "extinct", "censored"]

MIN_SINGULAR_VALUE = 1e-10
MAX_REJECTIONS = 1_000_000


@dataclass(frozen=True)
class CoupledPair:
    y1: np.ndarray
    y2: np.ndarray
    coupled: bool = False
    t: int = 0

    def __post_init__(self):
        if self.coupled and not np.array_equal(self.y1, self.y2):
            raise StructureError("a coupled pair must have identical copies")

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.y1 - self.y2))


@dataclass(frozen=True)
class CouplingOutcome:
    status: Status
    tau_c: Optional[int] = None
    fallbacks: int = 0
    run: int = 0

    def __post_init__(self):
        if self.status == "coupled" and (self.tau_c is None or self.tau_c < 0):
            raise StructureError("a coupled outcome needs a coupling step")


@dataclass(frozen=True)
class GaussianKernel:
    """One-step transition law N(mean, cov) of the square-form Euler-Maruyama step."""

    mean: np.ndarray
    cov: np.ndarray
    sqrt_cov: np.ndarray

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.sqrt_cov @ rng.standard_normal(self.mean.shape[0])

    def logpdf(self, z: np.ndarray) -> float:
        return float(
            multivariate_normal.logpdf(z, mean=self.mean, cov=self.cov, allow_singular=True)
        )


def _drift(net: ReactionNetwork, y: np.ndarray, cfg: SimConfig) -> np.ndarray:
    return cfg.step * (propensities(net, np.maximum(y, 0.0)) @ net.change_matrix)


def _sigma_eq(net: ReactionNetwork, y: np.ndarray, cfg: SimConfig) -> np.ndarray:
    m = diffusion_matrix(net, np.maximum(y, 0.0), cfg)
    return covariance_sqrt(m @ m.T)


def one_step_kernel(net: ReactionNetwork, y, cfg: SimConfig) -> GaussianKernel:
    """Gaussian law of em_step from y: mean y + drift, covariance M M^T / V^2."""
    y = as_state(net, y)
    root = _sigma_eq(net, y, cfg) / cfg.volume
    return GaussianKernel(y + _drift(net, y, cfg), root @ root, root)


def householder_reflect(w: np.ndarray, e: np.ndarray) -> np.ndarray:
    """(I - 2 e e^T) w for a unit vector e."""
    return w - 2.0 * e * (e @ w)


def reflection_step(
    pair: CoupledPair,
    net: ReactionNetwork,
    cfg: SimConfig,
    w: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[CoupledPair, bool]:
    """Advance both copies, y2 with the noise reflected about the whitened separation.

    The separation is whitened with Sigma_eq(y2). When Sigma_eq(y2) is near singular the step
    uses fresh independent noise for y2 instead; the second return value flags that fallback.
    """
    if pair.coupled or np.array_equal(pair.y1, pair.y2):
        raise StructureError("reflection needs two distinct uncoupled copies")
    sigma1 = _sigma_eq(net, pair.y1, cfg)
    sigma2 = _sigma_eq(net, pair.y2, cfg)
    y1 = pair.y1 + _drift(net, pair.y1, cfg) + sigma1 @ w / cfg.volume

    fell_back = np.linalg.svd(sigma2, compute_uv=False).min() <= MIN_SINGULAR_VALUE
    if fell_back:
        if rng is None:
            raise ConfigError("independent fallback needs a generator")
        w2 = rng.standard_normal(w.shape[0])
    else:
        direction = np.linalg.solve(sigma2, pair.y1 - pair.y2)
        w2 = householder_reflect(w, direction / np.linalg.norm(direction))
    y2 = pair.y2 + _drift(net, pair.y2, cfg) + sigma2 @ w2 / cfg.volume
    return CoupledPair(y1, y2, False, pair.t + 1), bool(fell_back)


def maximal_coupling_step(
    logpdf1: Callable[[np.ndarray], float],
    sampler1: Callable[[np.random.Generator], np.ndarray],
    logpdf2: Callable[[np.ndarray], float],
    sampler2: Callable[[np.random.Generator], np.ndarray],
    rng: np.random.Generator,
    max_iter: int = MAX_REJECTIONS,
) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Draw (z1, z2) with z1 ~ p1, z2 ~ p2 and P(z1 == z2) = 1 - TV(p1, p2).

    Densities enter as log-densities: u p1(z) < p2(z) iff log u + log p1(z) < log p2(z).
    """
    z1 = sampler1(rng)
    if np.log(rngmod.open_uniforms(rng, 1)[0]) + logpdf1(z1) < logpdf2(z1):
        return z1, z1.copy(), True
    for _ in range(max_iter):
        z2 = sampler2(rng)
        if np.log(rngmod.open_uniforms(rng, 1)[0]) + logpdf2(z2) >= logpdf1(z2):
            return z1, z2, False
    raise NumericalDegeneracy(
        f"maximal coupling rejection loop exceeded {max_iter} iterations"
    )


def hybrid_coupling_run(
    net: ReactionNetwork,
    cfg: SimConfig,
    start: Tuple[Sequence[float], Sequence[float]],
    threshold: float,
    max_steps: int,
    rng: np.random.Generator,
    run: int = 0,
) -> CouplingOutcome:
    """Couple two diffusion copies: reflection while far apart, maximal coupling when close.

    Returns an extinct outcome as soon as either copy is absorbed before coupling, and a
    censored one after max_steps steps.
    """
    if not threshold > 0:
        raise ConfigError(f"coupling threshold must be positive, got {threshold}")
    y1, y2 = as_state(net, start[0]), as_state(net, start[1])
    if in_absorbing(y1) or in_absorbing(y2):
        raise ConfigError("coupling runs need interior starting states")
    if np.array_equal(y1, y2):
        return CouplingOutcome("coupled", 0, 0, run)

    pair = CoupledPair(y1.copy(), y2.copy())
    fallbacks = 0
    for t in range(1, max_steps + 1):
        if pair.distance > threshold:
            pair, fell_back = reflection_step(
                pair, net, cfg, rng.standard_normal(net.dimension), rng
            )
            fallbacks += fell_back
        else:
            k1 = one_step_kernel(net, pair.y1, cfg)
            k2 = one_step_kernel(net, pair.y2, cfg)
            z1, z2, merged = maximal_coupling_step(
                k1.logpdf, k1.sample, k2.logpdf, k2.sample, rng
            )
            pair = CoupledPair(z1, z2, merged, t)
        if in_absorbing(pair.y1, "diffusion") or in_absorbing(pair.y2, "diffusion"):
            return CouplingOutcome("extinct", None, fallbacks, run)
        if pair.coupled:
            return CouplingOutcome("coupled", t, fallbacks, run)
    return CouplingOutcome("censored", None, fallbacks, run)


def default_threshold(net: ReactionNetwork, cfg: SimConfig, center) -> float:
    """Two one-step noise scales at center: 2 sqrt(tr(M M^T)) / V."""
    m = diffusion_matrix(net, as_state(net, center), cfg)
    return float(2.0 * np.sqrt(np.trace(m @ m.T)) / cfg.volume)


def burn_in_pool(
    net: ReactionNetwork,
    cfg: SimConfig,
    start,
    steps: int,
    discard: float = 0.1,
) -> np.ndarray:
    """States of a free regenerating diffusion run, the first `discard` share dropped."""
    result = simulate_with_regeneration(
        net,
        cfg,
        "diffusion",
        steps,
        start=start,
        rng=rngmod.stream(cfg.seed, rngmod.BURN_IN),
        keep_trajectory=False,
        form="square",
    )
    states = result.reservoir.states
    return np.array(states[int(discard * len(states)):])


def _coupling_task(args) -> CouplingOutcome:
    net, cfg, pool, start, threshold, max_steps, seed, run = args
    rng = rngmod.stream(seed, rngmod.COUPLING, run)
    if start is None:
        i, j = rng.integers(0, pool.shape[0], size=2)
        start = (pool[i], pool[j])
    return hybrid_coupling_run(net, cfg, start, threshold, max_steps, rng, run)


def collect_coupling_times(
    net: ReactionNetwork,
    cfg: SimConfig,
    runs: int,
    threshold: float,
    max_steps: int,
    seed: int,
    *,
    pool: Optional[np.ndarray] = None,
    start: Optional[Tuple[Sequence[float], Sequence[float]]] = None,
    workers: Optional[Executor] = None,
) -> List[CouplingOutcome]:
    """Run `runs` independent hybrid couplings.

    Each run owns the stream (seed, run) and draws its two starting states independently
    from `pool` unless a fixed `start` pair is given. With an executor the runs are spread
    over its workers; the result is ordered by run index either way.
    """
    if runs < 1:
        raise ConfigError(f"need at least one coupling run, got {runs}")
    if start is None and (pool is None or len(pool) == 0):
        raise ConfigError("coupling runs need a state pool or a fixed starting pair")
    tasks = [
        (net, cfg, pool, start, threshold, max_steps, seed, run) for run in range(runs)
    ]
    if workers is None:
        outcomes = [_coupling_task(task) for task in tasks]
    else:
        outcomes = list(workers.map(_coupling_task, tasks, chunksize=max(1, runs // 64)))

    counts = {s: sum(o.status == s for o in outcomes) for s in ("coupled", "extinct", "censored")}
    logger.info(
        "coupling runs: %d coupled, %d extinct, %d censored",
        counts["coupled"],
        counts["extinct"],
        counts["censored"],
    )
    return outcomes


def write_outcomes_csv(
    stream: TextIO, outcomes: Sequence[CouplingOutcome], step: float
) -> None:
    """Columns run, status, tau_steps, tau_time."""
    writer = csv.writer(stream)
    writer.writerow(["run", "status", "tau_steps", "tau_time"])
    for o in outcomes:
        if o.tau_c is None:
            writer.writerow([o.run, o.status, "", ""])
        else:
            writer.writerow([o.run, o.status, o.tau_c, repr(o.tau_c * step)])
