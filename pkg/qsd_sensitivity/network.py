"""Mass-action reaction networks.

States are concentrations (molecule count / V). A network is immutable once built and is
shared read-only by every simulation worker.

Network documents are TOML:

    species = ["S", "I"]

    [[reaction]]
    name = "birth"          # optional
    consumed = [0, 0]
    produced = [1, 0]
    rate = 7.0

Unknown keys are rejected.
"""

import logging
import re
import tomllib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal, Sequence, Tuple

import numpy as np
import tomli_w

from qsd_sensitivity.errors import NetworkParseError, StructureError

logger = logging.getLogger(__name__)

ProcessKind = Literal["poisson", "diffusion"]

_TOP_KEYS = {"species", "reaction"}
_REACTION_KEYS = {"name", "consumed", "produced", "rate"}


@dataclass(frozen=True)
class Reaction:
    """One reaction channel: consumed -> produced at rate constant `rate`."""

    consumed: Tuple[int, ...]
    produced: Tuple[int, ...]
    rate: float
    name: str = ""

    def __post_init__(self):
        if len(self.consumed) != len(self.produced):
            raise StructureError(
                f"reaction {self.name or '?'}: consumed and produced have different lengths"
            )
        if any(c < 0 for c in self.consumed) or any(p < 0 for p in self.produced):
            raise StructureError(
                f"reaction {self.name or '?'}: molecule counts must be non-negative"
            )
        if not self.rate > 0:
            raise StructureError(
                f"reaction {self.name or '?'}: rate constant must be positive, got {self.rate}"
            )
        if self.consumed == self.produced:
            raise StructureError(f"reaction {self.name or '?'} changes nothing")

    @property
    def order(self) -> int:
        return sum(self.consumed)

    @property
    def change(self) -> np.ndarray:
        """l = c' - c"""
        return np.asarray(self.produced, dtype=np.int64) - np.asarray(
            self.consumed, dtype=np.int64
        )


@dataclass(frozen=True)
class ReactionNetwork:
    species_names: Tuple[str, ...]
    reactions: Tuple[Reaction, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.species_names) < 1:
            raise StructureError("a network needs at least one species")
        if len(set(self.species_names)) != len(self.species_names):
            raise StructureError("species names must be unique")
        if len(self.reactions) < 1:
            raise StructureError("a network needs at least one reaction")
        d = len(self.species_names)
        for k, reaction in enumerate(self.reactions):
            if len(reaction.consumed) != d:
                raise StructureError(
                    f"reaction {k} has {len(reaction.consumed)} entries, expected {d}"
                )

    @property
    def dimension(self) -> int:
        return len(self.species_names)

    @property
    def num_reactions(self) -> int:
        return len(self.reactions)

    @cached_property
    def reactant_matrix(self) -> np.ndarray:
        """K x d matrix of consumed counts c_ki."""
        return np.array([r.consumed for r in self.reactions], dtype=np.int64)

    @cached_property
    def change_matrix(self) -> np.ndarray:
        """K x d matrix whose rows are l_k."""
        return np.array([r.change for r in self.reactions], dtype=np.int64)

    @cached_property
    def rate_constants(self) -> np.ndarray:
        return np.array([r.rate for r in self.reactions], dtype=float)

    def reaction_labels(self) -> list:
        return [r.name or f"r{k}" for k, r in enumerate(self.reactions)]


def as_state(net: ReactionNetwork, x: Sequence[float]) -> np.ndarray:
    """Coerce x to a float vector of the network's dimension."""
    state = np.asarray(x, dtype=float)
    if state.shape != (net.dimension,):
        raise StructureError(
            f"state has shape {state.shape}, network has {net.dimension} species"
        )
    return state


def propensities(net: ReactionNetwork, x: Sequence[float]) -> np.ndarray:
    """f_k(x) = kappa_k * prod_i x_i ** c_ki for every reaction k."""
    state = as_state(net, x)
    if np.any(state < 0):
        raise StructureError("propensities need non-negative concentrations")
    # 0 ** 0 == 1, so species a reaction does not consume drop out of the product
    monomials = np.prod(state[np.newaxis, :] ** net.reactant_matrix, axis=1)
    return net.rate_constants * monomials


def stoich_vector(net: ReactionNetwork, k: int) -> np.ndarray:
    """l_k for reaction index k (0-based)."""
    if not 0 <= k < net.num_reactions:
        raise StructureError(
            f"reaction index {k} out of range for {net.num_reactions} reactions"
        )
    return net.change_matrix[k].copy()


def deterministic_rhs(net: ReactionNetwork, x: Sequence[float]) -> np.ndarray:
    """Mean-field vector field sum_k l_k f_k(x)."""
    return propensities(net, np.maximum(as_state(net, x), 0.0)) @ net.change_matrix


def in_absorbing(x: Sequence[float], kind: ProcessKind = "poisson") -> bool:
    """True when the state sits on or beyond a coordinate hyperplane.

    Poisson states are multiples of 1/V and hit 0 exactly; diffusion steps can overshoot
    below 0. Both are absorbed by the same test.
    """
    if kind not in ("poisson", "diffusion"):
        raise ValueError(f"unknown process kind {kind!r}")
    return bool(np.any(np.asarray(x, dtype=float) <= 0.0))


def _line_of(text: str, needle: str, occurrence: int = 0) -> int | None:
    """Best-effort line number of the occurrence-th match of needle."""
    matches = [m.start() for m in re.finditer(re.escape(needle), text)]
    if occurrence < len(matches):
        return text.count("\n", 0, matches[occurrence]) + 1
    return None


def _int_vector(value, d: int, line, field_name: str) -> Tuple[int, ...]:
    if not isinstance(value, list) or not all(
        isinstance(v, int) and not isinstance(v, bool) for v in value
    ):
        raise NetworkParseError("expected a list of integers", line, field_name)
    if len(value) != d:
        raise NetworkParseError(
            f"expected {d} entries (one per species), got {len(value)}", line, field_name
        )
    if any(v < 0 for v in value):
        raise NetworkParseError("molecule counts must be non-negative", line, field_name)
    return tuple(value)


def load_network(config_text: str) -> ReactionNetwork:
    """Parse and validate a TOML network document."""
    try:
        doc = tomllib.loads(config_text)
    except tomllib.TOMLDecodeError as e:
        # the decoder message already carries "(at line N, column M)"
        raise NetworkParseError(str(e)) from e

    unknown = set(doc) - _TOP_KEYS
    if unknown:
        name = sorted(unknown)[0]
        raise NetworkParseError("unknown key", _line_of(config_text, name), name)

    species = doc.get("species")
    if not isinstance(species, list) or not species or not all(
        isinstance(s, str) for s in species
    ):
        raise NetworkParseError(
            "expected a non-empty list of species names",
            _line_of(config_text, "species"),
            "species",
        )
    d = len(species)

    blocks = doc.get("reaction")
    if not isinstance(blocks, list) or not blocks:
        raise NetworkParseError("at least one [[reaction]] block is required", None, "reaction")

    reactions = []
    for k, block in enumerate(blocks):
        line = _line_of(config_text, "[[reaction]]", k)
        unknown = set(block) - _REACTION_KEYS
        if unknown:
            raise NetworkParseError("unknown key", line, f"reaction[{k}].{sorted(unknown)[0]}")
        for required in ("consumed", "produced", "rate"):
            if required not in block:
                raise NetworkParseError("missing key", line, f"reaction[{k}].{required}")
        consumed = _int_vector(block["consumed"], d, line, f"reaction[{k}].consumed")
        produced = _int_vector(block["produced"], d, line, f"reaction[{k}].produced")
        rate = block["rate"]
        if isinstance(rate, bool) or not isinstance(rate, (int, float)):
            raise NetworkParseError("rate must be a number", line, f"reaction[{k}].rate")
        if not rate > 0:
            raise NetworkParseError(
                f"rate constant must be positive, got {rate}", line, f"reaction[{k}].rate"
            )
        if consumed == produced:
            raise NetworkParseError(
                "reaction changes nothing (produced == consumed)", line, f"reaction[{k}]"
            )
        name = block.get("name", "")
        if not isinstance(name, str):
            raise NetworkParseError("name must be a string", line, f"reaction[{k}].name")
        reactions.append(Reaction(consumed, produced, float(rate), name))

    net = ReactionNetwork(tuple(species), tuple(reactions))
    logger.debug("loaded network: %d species, %d reactions", d, len(reactions))
    return net


def dump_network(net: ReactionNetwork) -> str:
    """Serialize a network to the TOML document load_network reads."""
    doc = {
        "species": list(net.species_names),
        "reaction": [
            {
                **({"name": r.name} if r.name else {}),
                "consumed": list(r.consumed),
                "produced": list(r.produced),
                "rate": float(r.rate),
            }
            for r in net.reactions
        ],
    }
    return tomli_w.dumps(doc)
