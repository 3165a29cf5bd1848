"""Paired discretized Poisson / Wiener paths on a common grid.

The default pairing is the dyadic KMT construction. The grid is cut into blocks of 1, 1, 2, 4,
8, ... cells; every block owns a random stream, so a longer skeleton extends a shorter one.
Inside a block the Poisson count over the whole block is the Poisson quantile of the uniform
that also fixes the Brownian increment, and each dyadic interval's count is split between its
halves by the Binomial(n, 1/2) quantile of the uniform that fixes the Brownian bridge midpoint.
The gap P(s) - s - B(s) then grows like log s.

pairing="quantile" instead drives every cell's two increments by one uniform through their
quantile functions. Its marginals are the same but the gap grows like sqrt(s).
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.special import ndtri

from qsd_sensitivity import rng as rngmod
from qsd_sensitivity.errors import ConfigError, HorizonExceeded

logger = logging.getLogger(__name__)

PathKind = Literal["poisson", "wiener"]
Pairing = Literal["dyadic", "quantile"]
PAIRINGS = ("dyadic", "quantile")

CACHE_FORMAT_VERSION = 2

# CDF tables stop once the remaining tail is below this
POISSON_TAIL = 1e-15


@dataclass(frozen=True)
class PairedSkeleton:
    delta: float
    cum_poisson: np.ndarray
    cum_wiener: np.ndarray
    seed: int = 0
    channel: int = 0
    segment: int = 0
    pairing: Pairing = "dyadic"

    def __post_init__(self):
        if self.cum_poisson.shape != self.cum_wiener.shape or self.cum_poisson.ndim != 1:
            raise ValueError("cumulative arrays must be 1-D and of equal length")
        if self.cum_poisson[0] != 0 or self.cum_wiener[0] != 0:
            raise ValueError("cumulative arrays must start at 0")

    @property
    def length(self) -> int:
        """Number of grid cells L."""
        return self.cum_poisson.shape[0] - 1

    @property
    def horizon(self) -> float:
        return self.length * self.delta

    def increments(self, kind: PathKind) -> np.ndarray:
        return np.diff(self.cum_poisson if kind == "poisson" else self.cum_wiener)


@dataclass(frozen=True)
class KmtGammaEstimate:
    gamma_hat: float
    argmax_time: float


def _poisson_quantiles(u: np.ndarray, mean: float) -> np.ndarray:
    """Poisson(mean) inverse CDF evaluated at u in (0, 1)."""
    spread = 12.0 * math.sqrt(mean) + 40.0
    lo = max(0, int(math.floor(mean - spread)))
    hi = int(math.ceil(mean + spread))
    cdf = stats.poisson.cdf(np.arange(lo, hi + 1), mean)
    for _ in range(8):
        if cdf[-1] >= 1.0 - POISSON_TAIL:
            break
        hi = 2 * hi + 1
        cdf = stats.poisson.cdf(np.arange(lo, hi + 1), mean)
    if not np.all(np.isfinite(cdf)):
        raise ConfigError(f"Poisson CDF is not finite for mean {mean}")
    cdf[-1] = 1.0
    # smallest k with F(k) >= u; mass below lo is under 1e-30 and lands on lo
    return lo + np.searchsorted(cdf, u, side="left").astype(np.int64)


def paired_increments(u: np.ndarray, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    """Poisson(delta) and N(0, delta) increments driven by the same uniforms."""
    u = np.asarray(u, dtype=float)
    return _poisson_quantiles(u, delta), math.sqrt(delta) * ndtri(u)


def _binomial_halves(u: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Binomial(n, 1/2) inverse CDF at u, one n per entry."""
    left = np.zeros_like(counts)
    one = counts == 1
    left[one] = u[one] > 0.5
    many = counts > 1
    if np.any(many):
        quantiles = stats.binom.ppf(u[many], counts[many], 0.5)
        left[many] = np.clip(quantiles, 0, counts[many]).astype(np.int64)
    return left


def _dyadic_block(u: np.ndarray, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    """Cumulative Poisson and Wiener values on the 2^m + 1 grid points of one block.

    u holds one uniform per cell: u[0] fixes the block totals, the rest are consumed level by
    level, one per interval being split.
    """
    cells = u.shape[0]
    cum_p = np.zeros(cells + 1, dtype=np.int64)
    cum_w = np.zeros(cells + 1)
    top_p, top_w = paired_increments(u[:1], cells * delta)
    cum_p[-1], cum_w[-1] = top_p[0], top_w[0]
    used, width = 1, cells
    while width > 1:
        half = width // 2
        left = np.arange(0, cells, width)
        mid, right = left + half, left + width
        level = u[used : used + left.size]
        used += left.size
        cum_p[mid] = cum_p[left] + _binomial_halves(level, cum_p[right] - cum_p[left])
        # Brownian bridge midpoint: sd is half the square root of the interval length
        bridge = 0.5 * math.sqrt(width * delta) * ndtri(level)
        cum_w[mid] = 0.5 * (cum_w[left] + cum_w[right]) + bridge
        width = half
    return cum_p, cum_w


def _block_sizes(length: int):
    """Cell counts 1, 1, 2, 4, ... of the blocks covering `length` cells."""
    block, covered = 0, 0
    while covered < length:
        size = 1 if block == 0 else 2 ** (block - 1)
        yield block, size
        covered += size
        block += 1


def _dyadic_increments(
    delta: float, length: int, seed: int, channel: int, segment: int
) -> Tuple[np.ndarray, np.ndarray]:
    poisson_parts, wiener_parts = [], []
    for block, size in _block_sizes(length):
        gen = rngmod.stream(seed, rngmod.SKELETON, segment, channel, block)
        cum_p, cum_w = _dyadic_block(rngmod.open_uniforms(gen, size), delta)
        poisson_parts.append(np.diff(cum_p))
        wiener_parts.append(np.diff(cum_w))
    return (
        np.concatenate(poisson_parts)[:length],
        np.concatenate(wiener_parts)[:length],
    )


def _from_increments(
    poisson_inc, wiener_inc, delta, seed, channel, segment, pairing
) -> PairedSkeleton:
    cum_p = np.concatenate(([0], np.cumsum(poisson_inc, dtype=np.int64)))
    cum_w = np.concatenate(([0.0], np.cumsum(wiener_inc)))
    return PairedSkeleton(delta, cum_p, cum_w, seed, channel, segment, pairing)


def generate_paired_skeleton(
    delta: float,
    length: int,
    seed: int,
    channel: int = 0,
    segment: int = 0,
    pairing: Pairing = "dyadic",
) -> PairedSkeleton:
    """Skeleton with `length` cells of width delta; a pure function of its arguments.

    Either pairing is prefix-stable: the first L cells do not depend on the requested length.
    """
    if not delta > 0:
        raise ConfigError(f"grid step must be positive, got {delta}")
    if length < 1:
        raise ConfigError(f"skeleton length must be at least 1, got {length}")
    if pairing == "dyadic":
        poisson_inc, wiener_inc = _dyadic_increments(delta, length, seed, channel, segment)
    elif pairing == "quantile":
        u = rngmod.open_uniforms(rngmod.stream(seed, rngmod.SKELETON, segment, channel), length)
        poisson_inc, wiener_inc = paired_increments(u, delta)
    else:
        raise ConfigError(f"unknown pairing {pairing!r}; choose one of {', '.join(PAIRINGS)}")
    return _from_increments(poisson_inc, wiener_inc, delta, seed, channel, segment, pairing)


def path_value(skel: PairedSkeleton, kind: PathKind, s: float) -> float:
    """Piecewise-constant path value at internal time s (index floor(s / delta))."""
    cum = skel.cum_poisson if kind == "poisson" else skel.cum_wiener
    return cum[_grid_index(np.asarray([s], dtype=float), skel.delta, skel.length)[0]].item()


def _grid_index(s: np.ndarray, delta: float, length: int) -> np.ndarray:
    horizon = length * delta
    if np.any(s < 0):
        raise ValueError("internal time must be non-negative")
    # tolerate round-off exactly at the horizon
    if np.any(s > horizon * (1 + 1e-12)):
        raise HorizonExceeded(float(np.max(s)), horizon)
    return np.minimum(np.floor(s / delta).astype(np.int64), length)


def empirical_kmt_gamma(skel: PairedSkeleton) -> KmtGammaEstimate:
    """max over grid points of |P(s) - s - B(s)| / log(max(s, 2))."""
    if skel.length < 1:
        raise ValueError("empty skeleton")
    s = skel.delta * np.arange(1, skel.length + 1)
    deviation = np.abs(skel.cum_poisson[1:] - s - skel.cum_wiener[1:])
    ratio = deviation / np.log(np.maximum(s, 2.0))
    i = int(np.argmax(ratio))
    return KmtGammaEstimate(float(ratio[i]), float(s[i]))


class SkeletonSet:
    """One skeleton per reaction channel on a shared grid, stacked for vectorised lookups."""

    def __init__(self, skeletons: Sequence[PairedSkeleton]):
        if not skeletons:
            raise ValueError("a skeleton set needs at least one channel")
        deltas = {s.delta for s in skeletons}
        lengths = {s.length for s in skeletons}
        if len(deltas) != 1 or len(lengths) != 1:
            raise ValueError("all channels must share grid step and length")
        self.skeletons = tuple(skeletons)
        self.delta = skeletons[0].delta
        self.length = skeletons[0].length
        self._poisson = np.stack([s.cum_poisson for s in skeletons])
        self._wiener = np.stack([s.cum_wiener for s in skeletons])
        self._rows = np.arange(len(skeletons))

    def __len__(self) -> int:
        return len(self.skeletons)

    @property
    def horizon(self) -> float:
        return self.length * self.delta

    def _indices(self, q: np.ndarray) -> np.ndarray:
        try:
            return _grid_index(np.asarray(q, dtype=float), self.delta, self.length)
        except HorizonExceeded as e:
            needed = int(math.ceil(e.required / self.delta))
            raise HorizonExceeded(
                e.required,
                e.available,
                f"regenerate skeletons with length >= {needed} cells",
            ) from None

    def poisson_increment(self, q_old: np.ndarray, q_new: np.ndarray) -> np.ndarray:
        """P_k(q_new_k) - P_k(q_old_k) for every channel k."""
        return (
            self._poisson[self._rows, self._indices(q_new)]
            - self._poisson[self._rows, self._indices(q_old)]
        )

    def wiener_increment(self, q_old: np.ndarray, q_new: np.ndarray) -> np.ndarray:
        """B_k(q_new_k) - B_k(q_old_k) for every channel k."""
        return (
            self._wiener[self._rows, self._indices(q_new)]
            - self._wiener[self._rows, self._indices(q_old)]
        )


def generate_skeleton_set(
    delta: float,
    length: int,
    seed: int,
    channels: int,
    segment: int = 0,
    pairing: Pairing = "dyadic",
) -> SkeletonSet:
    """K independent paired skeletons; channel k uses stream (seed, segment, k)."""
    return SkeletonSet(
        [
            generate_paired_skeleton(delta, length, seed, k, segment, pairing)
            for k in range(channels)
        ]
    )


def required_length(
    internal_horizon: np.ndarray,
    delta: float,
    margin: float = 1.5,
    offset: Optional[np.ndarray] = None,
) -> int:
    """Cells needed to cover margin x the per-channel internal horizon past `offset`."""
    reach = np.asarray(internal_horizon, dtype=float) * margin
    if offset is not None:
        reach = reach + np.asarray(offset, dtype=float)
    return max(1, int(math.ceil(float(np.max(reach)) / delta)) + 1)


def save_skeleton(path: str | Path, skel: PairedSkeleton) -> None:
    """Write a skeleton to an uncompressed .npz cache."""
    with open(path, "wb") as fh:
        np.savez(
            fh,
            format_version=np.array(CACHE_FORMAT_VERSION),
            delta=np.array(skel.delta, dtype=np.float64),
            length=np.array(skel.length),
            seed=np.array(skel.seed),
            channel=np.array(skel.channel),
            segment=np.array(skel.segment),
            pairing=np.array(skel.pairing),
            cum_poisson=skel.cum_poisson,
            cum_wiener=skel.cum_wiener,
        )


def load_skeleton(path: str | Path) -> PairedSkeleton:
    """Read a cache written by save_skeleton; arrays come back bit-identical."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CACHE_FORMAT_VERSION:
            raise ConfigError(
                f"skeleton cache {path} has format {version}, expected {CACHE_FORMAT_VERSION}"
            )
        skel = PairedSkeleton(
            float(data["delta"]),
            data["cum_poisson"].copy(),
            data["cum_wiener"].copy(),
            int(data["seed"]),
            int(data["channel"]),
            int(data["segment"]),
            str(data["pairing"]),
        )
        if skel.length != int(data["length"]):
            raise ConfigError(f"skeleton cache {path} is truncated")
    return skel
