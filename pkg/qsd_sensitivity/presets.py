"""The three example networks and their desk-scale run defaults.

Reaction order is canonical and documented per preset; it fixes which skeleton channel drives
which reaction.

sir (species S, I):
    0 birth      0 -> S          alpha
    1 infection  S + I -> 2I     beta
    2 death_S    S -> 0          mu
    3 removal_I  I -> 0          mu + rho + gamma

oregonator (species S1, S2, S3):
    0 S2 -> S1            C1
    1 S1 + S2 -> 0        C2
    2 S1 -> 2 S1 + 2 S3   C3
    3 2 S1 -> 0           C4
    4 S3 -> S2            C5 * delta
    5 S3 -> 0             C5 * (1 - delta)

lv4 (species S1..S4), species by species i = 1..4:
    growth     S_i -> 2 S_i            r_i
    then for j = 1..4 with a_ij != 0:
    competition S_j + S_i -> S_j       a_ij r_i   (2 S_i -> S_i when j == i)
    a_14, a_21, a_32 are zero, leaving 4 + 4 + 4 + 5 = 17 reactions.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Literal, Optional, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import root

from qsd_sensitivity.errors import ConfigError
from qsd_sensitivity.network import (
    Reaction,
    ReactionNetwork,
    deterministic_rhs,
    in_absorbing,
)

logger = logging.getLogger(__name__)

PRESET_NAMES = ("sir", "oregonator", "lv4")

SIR_PARAMETERS = {"alpha": 7.0, "beta": 3.0, "mu": 1.0, "rho": 1.0, "gamma": 2.0}
OREGONATOR_PARAMETERS = {
    "C1": 2560.0,
    "C2": 800000.0,
    "C3": 16000.0,
    "C4": 2000.0,
    "C5": 9000.0,
    "delta": 0.4,
}
LV4_GROWTH = (1.0, 0.72, 1.53, 1.27)
LV4_COMPETITION = (
    (1.0, 1.09, 1.52, 0.0),
    (0.0, 1.0, 0.44, 1.36),
    (2.33, 0.0, 1.0, 0.47),
    (1.21, 0.51, 0.35, 1.0),
)


def _unit(d: int, *indices: int) -> Tuple[int, ...]:
    v = [0] * d
    for i in indices:
        v[i] += 1
    return tuple(v)


def _sir() -> ReactionNetwork:
    p = SIR_PARAMETERS
    return ReactionNetwork(
        ("S", "I"),
        (
            Reaction((0, 0), (1, 0), p["alpha"], "birth"),
            Reaction((1, 1), (0, 2), p["beta"], "infection"),
            Reaction((1, 0), (0, 0), p["mu"], "death_S"),
            Reaction((0, 1), (0, 0), p["mu"] + p["rho"] + p["gamma"], "removal_I"),
        ),
    )


def _oregonator() -> ReactionNetwork:
    p = OREGONATOR_PARAMETERS
    return ReactionNetwork(
        ("S1", "S2", "S3"),
        (
            Reaction((0, 1, 0), (1, 0, 0), p["C1"], "S2->S1"),
            Reaction((1, 1, 0), (0, 0, 0), p["C2"], "S1+S2->0"),
            Reaction((1, 0, 0), (2, 0, 2), p["C3"], "S1->2S1+2S3"),
            Reaction((2, 0, 0), (0, 0, 0), p["C4"], "2S1->0"),
            Reaction((0, 0, 1), (0, 1, 0), p["C5"] * p["delta"], "S3->S2"),
            Reaction((0, 0, 1), (0, 0, 0), p["C5"] * (1 - p["delta"]), "S3->0"),
        ),
    )


def _lv4() -> ReactionNetwork:
    d = 4
    reactions = []
    for i in range(d):
        r_i = LV4_GROWTH[i]
        reactions.append(Reaction(_unit(d, i), _unit(d, i, i), r_i, f"growth_{i + 1}"))
        for j in range(d):
            a_ij = LV4_COMPETITION[i][j]
            if a_ij == 0.0:
                continue
            reactions.append(
                Reaction(_unit(d, i, j), _unit(d, j), a_ij * r_i, f"compete_{i + 1}{j + 1}")
            )
    return ReactionNetwork(("S1", "S2", "S3", "S4"), tuple(reactions))


_BUILDERS = {"sir": _sir, "oregonator": _oregonator, "lv4": _lv4}


def preset(name: str) -> ReactionNetwork:
    """Return one of the example networks by name."""
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; choose one of {', '.join(PRESET_NAMES)}"
        ) from None
    return builder()


@dataclass(frozen=True)
class PresetDefaults:
    """Desk-scale defaults. Full-length budgets are an opt-in long run."""

    volume: float
    step: float
    horizon: float
    delta: float
    segments: int
    runs: int
    start: Tuple[float, ...]
    burn_in_time: float
    settle: Literal["equilibrium", "attractor"]
    mesh_lower: Tuple[float, ...]
    mesh_upper: Tuple[float, ...]
    bins: int
    coarse_bins: int
    horizons_by_volume: Dict[float, float] = field(default_factory=dict)

    def horizon_for(self, volume: float) -> float:
        return self.horizons_by_volume.get(float(volume), self.horizon)


DEFAULTS: Dict[str, PresetDefaults] = {
    "sir": PresetDefaults(
        volume=1000.0,
        step=1e-3,
        horizon=0.5,
        delta=0.01,
        segments=200,
        runs=500,
        start=(1.5, 1.5),
        burn_in_time=50.0,
        settle="equilibrium",
        mesh_lower=(0.0, 0.0),
        mesh_upper=(3.6, 3.6),
        bins=60,
        coarse_bins=15,
    ),
    "oregonator": PresetDefaults(
        volume=1000.0,
        step=1e-8,
        horizon=2e-5,
        delta=1e-3,
        segments=20,
        runs=100,
        start=(1.0, 0.05, 5.0),
        burn_in_time=0.05,
        settle="attractor",
        mesh_lower=(0.0, 0.0, 0.0),
        mesh_upper=(10.0, 0.5, 40.0),
        bins=30,
        coarse_bins=10,
        horizons_by_volume={1000.0: 2e-4, 400.0: 4e-5, 100.0: 1e-5, 10.0: 2e-6},
    ),
    "lv4": PresetDefaults(
        volume=1000.0,
        step=1e-3,
        horizon=1.0,
        delta=0.01,
        segments=500,
        runs=200,
        start=(0.3, 0.3, 0.3, 0.3),
        burn_in_time=200.0,
        settle="attractor",
        mesh_lower=(0.0, 0.0, 0.0, 0.0),
        mesh_upper=(1.0, 1.0, 1.0, 1.0),
        bins=10,
        coarse_bins=5,
    ),
}


def preset_defaults(name: str) -> PresetDefaults:
    preset(name)  # validates the name
    return DEFAULTS[name]


def attractor_point(
    net: ReactionNetwork,
    start,
    burn_in_time: float,
    settle: Literal["equilibrium", "attractor"] = "attractor",
) -> np.ndarray:
    """A point near the deterministic attractor of the network's ODE.

    The ODE is integrated for burn_in_time from start; with settle="equilibrium" the end point
    is then polished into a root of the vector field.
    """
    x0 = np.asarray(start, dtype=float)
    solution = solve_ivp(
        lambda _t, x: deterministic_rhs(net, x),
        (0.0, burn_in_time),
        x0,
        method="LSODA",
        rtol=1e-8,
        atol=1e-10,
    )
    if not solution.success:
        raise ConfigError(f"ODE burn-in failed: {solution.message}")
    point = solution.y[:, -1]

    if settle == "equilibrium":
        polished = root(lambda x: deterministic_rhs(net, x), point, tol=1e-12)
        if polished.success:
            point = polished.x

    if in_absorbing(point):
        raise ConfigError(
            f"ODE burn-in from {tuple(x0)} ended on the absorbing set at {tuple(point)}"
        )
    logger.debug("attractor point %s (settle=%s)", np.round(point, 6), settle)
    return point


def initial_state(name: str, defaults: Optional[PresetDefaults] = None) -> np.ndarray:
    """Interior start point for a preset, near its deterministic attractor."""
    defaults = defaults or preset_defaults(name)
    return attractor_point(
        preset(name), defaults.start, defaults.burn_in_time, defaults.settle
    )
