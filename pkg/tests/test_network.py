"""Test network module and presets"""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qsd_sensitivity.errors import ConfigError, NetworkParseError, StructureError
from qsd_sensitivity.network import (
    Reaction,
    ReactionNetwork,
    deterministic_rhs,
    dump_network,
    in_absorbing,
    load_network,
    propensities,
    stoich_vector,
)
from qsd_sensitivity.presets import (
    attractor_point,
    initial_state,
    preset,
    preset_defaults,
)

SIR_TOML = """\
species = ["S", "I"]

[[reaction]]
name = "birth"
consumed = [0, 0]
produced = [1, 0]
rate = 7.0

[[reaction]]
name = "infection"
consumed = [1, 1]
produced = [0, 2]
rate = 3.0
"""


def test_sir_propensities_at_unit_state():
    """SIR at (1, 1) gives (alpha, beta, mu, mu + rho + gamma)."""
    f = propensities(preset("sir"), [1.0, 1.0])
    np.testing.assert_allclose(f, [7.0, 3.0, 1.0, 4.0])


def test_propensities_vanish_without_reactants():
    """A reaction consuming S has zero propensity at S = 0."""
    f = propensities(preset("sir"), [0.0, 2.0])
    assert f[0] == 7.0
    assert f[1] == 0.0 and f[2] == 0.0
    assert f[3] == 8.0


def test_propensities_reject_bad_states():
    """Wrong dimension and negative concentrations are structure errors."""
    net = preset("sir")
    with pytest.raises(StructureError):
        propensities(net, [1.0, 1.0, 1.0])
    with pytest.raises(StructureError):
        propensities(net, [-0.1, 1.0])


@given(
    st.lists(st.floats(min_value=0.0, max_value=50.0), min_size=4, max_size=4),
)
def test_lv4_propensities_non_negative(x):
    """Mass-action propensities are never negative on the closed orthant."""
    assert np.all(propensities(preset("lv4"), x) >= 0)


@given(
    st.floats(min_value=0.01, max_value=10.0),
    st.floats(min_value=0.01, max_value=10.0),
    st.floats(min_value=0.1, max_value=10.0),
)
def test_propensities_are_homogeneous_in_reaction_order(s, i, c):
    """f_k(c x) = c ** order_k * f_k(x)."""
    net = preset("sir")
    orders = np.array([r.order for r in net.reactions])
    scaled = propensities(net, [c * s, c * i])
    np.testing.assert_allclose(scaled, c**orders * propensities(net, [s, i]), rtol=1e-10)


def test_stoich_vector_is_zero_based():
    """Index 1 of SIR is the infection S + I -> 2I."""
    net = preset("sir")
    np.testing.assert_array_equal(stoich_vector(net, 1), [-1, 1])
    with pytest.raises(StructureError):
        stoich_vector(net, 4)


def test_reaction_validation():
    """Non-positive rates, negative counts and no-op reactions are rejected."""
    with pytest.raises(StructureError):
        Reaction((1,), (0,), 0.0)
    with pytest.raises(StructureError):
        Reaction((-1,), (0,), 1.0)
    with pytest.raises(StructureError):
        Reaction((1,), (1,), 1.0)
    with pytest.raises(StructureError):
        ReactionNetwork(("A", "B"), (Reaction((1,), (0,), 1.0),))


def test_in_absorbing():
    """Any coordinate at or below zero is absorbing, for both process kinds."""
    assert in_absorbing([0.0, 1.0])
    assert in_absorbing([1.0, -1e-9], "diffusion")
    assert not in_absorbing([0.001, 2.0])


def test_load_network_parses_names_and_rates():
    """A TOML document becomes a network with the listed reactions."""
    net = load_network(SIR_TOML)
    assert net.species_names == ("S", "I")
    assert net.reaction_labels() == ["birth", "infection"]
    np.testing.assert_allclose(net.rate_constants, [7.0, 3.0])


def test_dump_then_load_preserves_preset():
    """dump_network output loads back into an equal network."""
    net = preset("lv4")
    assert load_network(dump_network(net)) == net


def test_load_network_unknown_key_reports_line():
    """Unknown reaction keys point at the block's line."""
    text = SIR_TOML + '\n[[reaction]]\nconsumed = [0, 1]\nproduced = [0, 0]\nrate = 4.0\nspeed = 1\n'
    with pytest.raises(NetworkParseError) as info:
        load_network(text)
    assert info.value.line == 15
    assert info.value.field == "reaction[2].speed"
    assert "line 15" in str(info.value)


def test_load_network_wrong_length_and_rate():
    """Length mismatches and non-positive rates are parse errors."""
    bad_length = SIR_TOML.replace("consumed = [1, 1]", "consumed = [1, 1, 0]")
    with pytest.raises(NetworkParseError) as info:
        load_network(bad_length)
    assert info.value.field == "reaction[1].consumed"

    with pytest.raises(NetworkParseError):
        load_network(SIR_TOML.replace("rate = 3.0", "rate = 0.0"))

    with pytest.raises(NetworkParseError):
        load_network("species = [\n")


def test_lv4_has_seventeen_reactions():
    """Zero competition coefficients drop three reactions."""
    net = preset("lv4")
    assert net.num_reactions == 17
    assert net.dimension == 4
    # second reaction of species 1 is the self-competition 2 S1 -> S1
    assert net.reactions[1].consumed == (2, 0, 0, 0)
    assert net.reactions[1].produced == (1, 0, 0, 0)


def test_unknown_preset():
    """Unknown preset names are configuration errors."""
    with pytest.raises(ConfigError):
        preset("brusselator")


def test_sir_attractor_is_the_equilibrium():
    """The SIR burn-in settles on (4/3, 17/12), where the vector field vanishes."""
    point = initial_state("sir")
    np.testing.assert_allclose(point, [4.0 / 3.0, 17.0 / 12.0], rtol=1e-6)
    np.testing.assert_allclose(deterministic_rhs(preset("sir"), point), 0.0, atol=1e-8)


def test_attractor_point_polishes_equilibrium():
    """Immigration-death 0 -> A (2), A -> 0 (1) settles at A = 2."""
    net = ReactionNetwork(
        ("A",), (Reaction((0,), (1,), 2.0), Reaction((1,), (0,), 1.0))
    )
    point = attractor_point(net, [0.5], burn_in_time=5.0, settle="equilibrium")
    np.testing.assert_allclose(point, [2.0], rtol=1e-9)


def test_oregonator_horizon_depends_on_volume():
    """Per-volume horizons override the default."""
    d = preset_defaults("oregonator")
    assert d.horizon_for(10) == 2e-6
    assert d.horizon_for(1000) == 2e-4
    assert d.horizon_for(55) == d.horizon
