"""QSD estimates: histograms of occupation reservoirs, distances between them, and the
small-chain oracle for the O(h) discretisation error of the QSD.
"""

import csv
import itertools
import logging
from dataclasses import dataclass
from typing import Literal, Mapping, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
from scipy import stats
from scipy.linalg import expm
from scipy.optimize import linear_sum_assignment
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from qsd_sensitivity.errors import (
    ConfigError,
    ConvergenceError,
    CostGuardError,
    MeshMismatch,
    StructureError,
)
from qsd_sensitivity.simulate import OccupationReservoir

logger = logging.getLogger(__name__)

Mesh = Tuple[np.ndarray, ...]

MAX_ASSIGNMENT_SAMPLES = 512


def uniform_mesh(lower: Sequence[float], upper: Sequence[float], bins) -> Mesh:
    """Evenly spaced bin edges per dimension; bins is an int or one int per dimension."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != upper.shape or np.any(upper <= lower):
        raise StructureError("mesh bounds must have equal length with upper > lower")
    counts = np.broadcast_to(np.asarray(bins, dtype=int), lower.shape)
    if np.any(counts < 1):
        raise StructureError("every dimension needs at least one bin")
    return tuple(np.linspace(lo, hi, n + 1) for lo, hi, n in zip(lower, upper, counts))


def _same_mesh(a: Mesh, b: Mesh) -> bool:
    return len(a) == len(b) and all(
        ea.shape == eb.shape and np.allclose(ea, eb, rtol=1e-12, atol=0.0)
        for ea, eb in zip(a, b)
    )


@dataclass(frozen=True)
class HistogramMeasure:
    """Binned empirical measure.

    weights are unnormalised bin masses so partial histograms merge by addition;
    probabilities normalises them.
    """

    mesh: Mesh
    weights: np.ndarray
    clip_fraction: float = 0.0

    def __post_init__(self):
        shape = tuple(len(e) - 1 for e in self.mesh)
        if self.weights.shape != shape:
            raise MeshMismatch(f"weights shape {self.weights.shape} != mesh shape {shape}")
        if np.any(self.weights < 0) or not self.weights.sum() > 0:
            raise StructureError("histogram weights must be non-negative with positive total")

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    @property
    def probabilities(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    def bin_centers(self) -> Mesh:
        return tuple((e[:-1] + e[1:]) / 2 for e in self.mesh)


def histogram(
    reservoir: Union[OccupationReservoir, np.ndarray],
    mesh: Mesh,
    discard: float = 0.0,
) -> HistogramMeasure:
    """Bin the states of a reservoir on a mesh.

    States outside the mesh are clipped into the boundary bins and the clipped share is kept
    as clip_fraction. The first `discard` fraction of states is dropped as burn-in.
    """
    states = reservoir.states if isinstance(reservoir, OccupationReservoir) else reservoir
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, np.newaxis]
    if not 0.0 <= discard < 1.0:
        raise ValueError(f"burn-in fraction must lie in [0, 1), got {discard}")
    states = states[int(discard * states.shape[0]):]
    if states.shape[0] == 0:
        raise StructureError("cannot build a histogram from an empty reservoir")
    if states.shape[1] != len(mesh):
        raise MeshMismatch(f"{states.shape[1]}-dimensional states on a {len(mesh)}-D mesh")

    lower = np.array([e[0] for e in mesh])
    upper = np.array([e[-1] for e in mesh])
    outside = np.any((states < lower) | (states > upper), axis=1)
    counts, _ = np.histogramdd(np.clip(states, lower, upper), bins=list(mesh))
    clip_fraction = float(outside.mean())
    if clip_fraction > 0.01:
        logger.warning("%.1f%% of states fell outside the mesh", 100 * clip_fraction)
    return HistogramMeasure(mesh, counts, clip_fraction)


def merge_histograms(a: HistogramMeasure, b: HistogramMeasure) -> HistogramMeasure:
    """Pool two partial histograms on the same mesh. Associative and commutative."""
    if not _same_mesh(a.mesh, b.mesh):
        raise MeshMismatch("cannot merge histograms on different meshes")
    clipped = (a.clip_fraction * a.total + b.clip_fraction * b.total) / (a.total + b.total)
    return HistogramMeasure(a.mesh, a.weights + b.weights, clipped)


def _subdivision(coarse: np.ndarray, fine: np.ndarray) -> int:
    cells, fine_cells = len(coarse) - 1, len(fine) - 1
    if fine_cells % cells:
        raise MeshMismatch(f"{fine_cells} fine bins do not subdivide {cells} coarse bins")
    r = fine_cells // cells
    if not np.allclose(fine[::r], coarse, rtol=1e-12, atol=1e-12):
        raise MeshMismatch("fine mesh edges do not nest the coarse mesh")
    return r


def refine_to_common_mesh(coarse: HistogramMeasure, fine_mesh: Mesh) -> HistogramMeasure:
    """Split each coarse bin's mass equally over the fine bins it contains."""
    if len(fine_mesh) != len(coarse.mesh):
        raise MeshMismatch("meshes have different dimensions")
    weights = coarse.weights
    for axis, (c, f) in enumerate(zip(coarse.mesh, fine_mesh)):
        r = _subdivision(c, f)
        weights = np.repeat(weights, r, axis=axis) / r
    return HistogramMeasure(tuple(fine_mesh), weights, coarse.clip_fraction)


def lattice_mesh(mesh: Mesh, volume: float, coarse_bins) -> Optional[Mesh]:
    """Coarse mesh for states on the 1/V lattice, or None when the fine mesh resolves it.

    The Poisson states sit on multiples of 1/V; once that spacing exceeds a fine bin width
    some fine bins can never be hit and the histograms are built on `coarse_bins` per
    dimension instead, then refined back onto `mesh`.
    """
    widths = np.array([e[1] - e[0] for e in mesh])
    if not 1.0 / volume > widths.min():
        return None
    coarse = uniform_mesh([e[0] for e in mesh], [e[-1] for e in mesh], coarse_bins)
    try:
        for c, f in zip(coarse, mesh):
            _subdivision(c, f)
    except MeshMismatch as e:
        raise ConfigError(
            f"bins must be a multiple of {coarse_bins} at V={volume:g}: {e}"
        ) from None
    return coarse


def tv_distance(a: HistogramMeasure, b: HistogramMeasure) -> float:
    """Total variation distance (1/2) sum |a_i - b_i|."""
    if not _same_mesh(a.mesh, b.mesh):
        raise MeshMismatch("total variation needs histograms on a common mesh")
    return float(0.5 * np.abs(a.probabilities - b.probabilities).sum())


def empirical_w1(samples_a, samples_b, cap: float = 1.0) -> float:
    """Exact W1 between two equal-size samples under d(x, y) = min(cap, |x - y|).

    Solved as an assignment problem on the n x n cost matrix; n is limited to 512.
    """
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    a = a[:, np.newaxis] if a.ndim == 1 else a
    b = b[:, np.newaxis] if b.ndim == 1 else b
    if a.shape != b.shape:
        raise StructureError(f"sample sets differ in shape: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n > MAX_ASSIGNMENT_SAMPLES:
        raise CostGuardError(
            f"{n} samples exceed the assignment limit of {MAX_ASSIGNMENT_SAMPLES}"
        )
    if n == 0:
        raise StructureError("empty sample sets")
    cost = np.minimum(cap, cdist(a, b))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def sample_histogram(
    hist: HistogramMeasure, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw n points from a histogram: a bin by mass, then uniformly inside it."""
    flat = rng.choice(hist.weights.size, size=n, p=hist.probabilities.ravel())
    index = np.unravel_index(flat, hist.weights.shape)
    points = np.empty((n, len(hist.mesh)))
    for axis, edges in enumerate(hist.mesh):
        lo, hi = edges[index[axis]], edges[index[axis] + 1]
        points[:, axis] = lo + (hi - lo) * rng.random(n)
    return points


def write_histogram_csv(
    stream: TextIO,
    histograms: Mapping[str, HistogramMeasure],
    species_names: Sequence[str],
) -> None:
    """One row per bin: bin centre coordinates, then one probability column per histogram."""
    if not histograms:
        raise StructureError("nothing to write")
    meshes = [h.mesh for h in histograms.values()]
    mesh = meshes[0]
    if not all(_same_mesh(mesh, m) for m in meshes[1:]):
        raise MeshMismatch("histograms written side by side need a common mesh")
    writer = csv.writer(stream)
    writer.writerow([*species_names, *histograms])
    probabilities = [h.probabilities for h in histograms.values()]
    for index in itertools.product(*(range(len(e) - 1) for e in mesh)):
        center = [(e[i] + e[i + 1]) / 2 for e, i in zip(mesh, index)]
        writer.writerow(
            [*(repr(float(c)) for c in center), *(repr(float(p[index])) for p in probabilities)]
        )


@dataclass(frozen=True)
class SmallChainSpec:
    """Sub-generator Q of a killed Markov chain restricted to its transient class.

    Off-diagonal entries are rates, row sums are minus the killing rates.
    """

    Q: np.ndarray
    births: Optional[np.ndarray] = None
    deaths: Optional[np.ndarray] = None

    def __post_init__(self):
        q = self.Q
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise StructureError(f"Q must be square, got shape {q.shape}")
        off = q - np.diag(np.diag(q))
        if np.any(off < 0):
            raise StructureError("off-diagonal rates must be non-negative")
        if np.any(q.sum(axis=1) > 1e-12):
            raise StructureError("row sums of a sub-generator must be <= 0")
        n_components, _ = connected_components(off > 0, directed=True, connection="strong")
        if n_components != 1:
            raise ConvergenceError(
                f"Q is reducible ({n_components} communicating classes)"
            )

    @property
    def size(self) -> int:
        return self.Q.shape[0]

    @classmethod
    def birth_death(cls, births: Sequence[float], deaths: Sequence[float]) -> "SmallChainSpec":
        """Birth-death chain on {1..n}, killed when it leaves the set.

        births[i] and deaths[i] are the rates out of state i + 1.
        """
        b = np.asarray(births, dtype=float)
        d = np.asarray(deaths, dtype=float)
        if b.shape != d.shape or b.ndim != 1 or b.size < 1:
            raise StructureError("births and deaths must be equal-length 1-D sequences")
        if np.any(b < 0) or np.any(d < 0):
            raise StructureError("rates must be non-negative")
        n = b.size
        q = np.diag(-(b + d))
        q[np.arange(n - 1), np.arange(1, n)] = b[:-1]
        q[np.arange(1, n), np.arange(n - 1)] = d[1:]
        return cls(q, b, d)

    def tau_leap_kernel(self, h: float) -> np.ndarray:
        """One tau-leaping step: independent Poisson(h b_j) births and Poisson(h d_j) deaths.

        Entry [j, k] is the probability of moving from state j to state k; mass leaving
        {1..n} is killed, so rows sum to less than one.
        """
        if self.births is None:
            raise StructureError("the tau-leaping kernel needs a birth-death chain")
        n = self.size
        support = np.arange(n + 1)
        kernel = np.zeros((n, n))
        for j in range(n):
            pb = stats.poisson.pmf(support, h * self.births[j])
            pd = stats.poisson.pmf(support, h * self.deaths[j])
            # index i of the convolution is a net change of i - n
            net = np.convolve(pb, pd[::-1])
            changes = np.arange(n) - j
            kernel[j] = net[changes + n]
        return kernel


def _perron_left_vector(
    matrix: np.ndarray, tol: float = 1e-12, max_iter: int = 100_000
) -> np.ndarray:
    pi = np.full(matrix.shape[0], 1.0 / matrix.shape[0])
    for iteration in range(1, max_iter + 1):
        nxt = np.clip(pi @ matrix, 0.0, None)
        total = nxt.sum()
        if not total > 0:
            raise ConvergenceError("power iteration collapsed to zero")
        nxt /= total
        if np.abs(nxt - pi).sum() < tol:
            logger.debug("power iteration converged after %d iterations", iteration)
            return nxt
        pi = nxt
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations (tol {tol})"
    )


def _accelerated(matrix: np.ndarray, h: float) -> np.ndarray:
    # P and P^(2^j) share their Perron vector; squaring brings the spectral gap to order 1
    for _ in range(max(0, int(np.ceil(np.log2(1.0 / h))))):
        matrix = matrix @ matrix
        matrix /= np.abs(matrix).max()
    return matrix


def small_chain_qsd(
    spec: SmallChainSpec,
    h: float,
    kernel: Literal["tau_leap", "linear"] = "tau_leap",
) -> Tuple[np.ndarray, np.ndarray, float]:
    """QSD of the exact step-h kernel e^{hQ} against that of the discretised kernel.

    kernel="tau_leap" uses the birth-death tau-leaping kernel, kernel="linear" uses I + hQ.

    Returns:
        (pi_exact, pi_discrete, l1 distance between them)
    """
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    exact = expm(h * spec.Q)
    if kernel == "tau_leap":
        discrete = spec.tau_leap_kernel(h)
    elif kernel == "linear":
        discrete = np.eye(spec.size) + h * spec.Q
        if np.any(discrete < 0):
            raise ConvergenceError(f"I + hQ has negative entries at h={h}; reduce h")
    else:
        raise ValueError(f"unknown kernel {kernel!r}")

    pi = _perron_left_vector(_accelerated(exact, h))
    pi_hat = _perron_left_vector(_accelerated(discrete, h))
    return pi, pi_hat, float(np.abs(pi - pi_hat).sum())
