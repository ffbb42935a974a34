import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import constants

from egocg.core import (ConfigurationError, MoleculeTemplate, SystemState, Topology,
                        TopologyError, box_edge_for_density, build_system, builtin_species,
                        ego_chain, minimum_image_displacement, molecule_center_of_mass,
                        water_template)
from egocg.potentials import total_energy

coord = st.floats(-20.0, 20.0, allow_nan=False)
edge = st.floats(0.5, 10.0, allow_nan=False)


def test_min_image_identity():
    d = minimum_image_displacement((0, 0, 0), (0, 0, 0), (5, 5, 5))
    assert np.array_equal(d, [0.0, 0.0, 0.0])


def test_min_image_wraps():
    d = minimum_image_displacement((4.9, 0, 0), (0.1, 0, 0), (5, 5, 5))
    assert np.allclose(d, [-0.2, 0.0, 0.0], atol=1e-12)


def test_min_image_half_box_and_brute_force():
    ri, rj, box = np.array([1.0, 2, 3]), np.array([3.0, 1, 0.5]), np.array([4.0, 4, 4])
    d = minimum_image_displacement(ri, rj, box)
    assert np.allclose(d, [2.0, 1.0, -1.5])
    # brute force over image shifts, ties broken toward +L/2
    shifts = np.arange(-2, 3)
    for ax in range(3):
        cands = ri[ax] - rj[ax] + shifts * box[ax]
        ok = cands[(cands > -box[ax] / 2) & (cands <= box[ax] / 2)]
        assert ok.size == 1 and abs(ok[0] - d[ax]) < 1e-12


@given(st.tuples(coord, coord, coord), st.tuples(coord, coord, coord),
       st.tuples(edge, edge, edge))
def test_min_image_range_and_lattice(a, b, box):
    box = np.asarray(box)
    d = minimum_image_displacement(a, b, box)
    assert np.all(d > -box / 2 - 1e-9) and np.all(d <= box / 2 + 1e-9)
    k = (np.asarray(a) - np.asarray(b) - d) / box
    assert np.allclose(k, np.round(k), atol=1e-6)


@given(st.tuples(coord, coord, coord), st.tuples(coord, coord, coord),
       st.tuples(edge, edge, edge))
def test_min_image_antisymmetric(a, b, box):
    box = np.asarray(box)
    d1 = minimum_image_displacement(a, b, box)
    d2 = minimum_image_displacement(b, a, box)
    # exact antisymmetry except on the half-box boundary, where the fold picks +L/2
    half = np.isclose(np.abs(d1), box / 2, rtol=0, atol=1e-9)
    assert np.allclose(d1[~half], -d2[~half], atol=1e-9)


def test_box_edge_for_1000_water_beads():
    mass_kg = 1000 * 54.0 * constants.atomic_mass
    edge_m = (mass_kg / 998.0) ** (1 / 3)
    oracle = edge_m * 1e9
    got = box_edge_for_density(1000 * 54.0, 0.998)
    assert abs(got - oracle) < 1e-6
    assert abs(got - 4.4789) < 1e-4


@pytest.fixture
def mixture_topology(ff):
    return Topology(dict(ff.bead_types), [builtin_species("EGO4"), water_template()], [20, 200])


def test_build_system_density_and_box(ff):
    top = Topology(dict(ff.bead_types), [water_template()], [1000])
    state = build_system(top, 0.998, 293.0, 1, forcefield=ff)
    assert abs(state.density() - 0.998) / 0.998 < 1e-9
    assert np.allclose(state.box, box_edge_for_density(54000.0, 0.998))
    assert np.all(state.positions >= 0) and np.all(state.positions < state.box)


def test_build_system_deterministic(ff, mixture_topology):
    a = build_system(mixture_topology, 1.0, 293.0, 7, forcefield=ff)
    b = build_system(mixture_topology, 1.0, 293.0, 7, forcefield=ff)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.velocities, b.velocities)
    assert np.array_equal(a.box, b.box)


def test_build_system_seed_changes_energy_not_density(ff, mixture_topology):
    a = build_system(mixture_topology, 1.0, 293.0, 1, forcefield=ff)
    b = build_system(mixture_topology, 1.0, 293.0, 2, forcefield=ff)
    assert a.density() == pytest.approx(b.density(), rel=1e-12)
    assert total_energy(a, ff).total != total_energy(b, ff).total


def test_build_system_momentum_and_temperature(ff, mixture_topology):
    state = build_system(mixture_topology, 1.0, 293.0, 3, forcefield=ff)
    assert np.linalg.norm(state.momentum()) / state.n_beads < 1e-8
    assert state.temperature() == pytest.approx(293.0, rel=1e-12)


def test_build_system_bond_lengths(ff, mixture_topology):
    state = build_system(mixture_topology, 1.0, 293.0, 3, forcefield=ff)
    exp = state.topology
    r0 = ff.bond_potential("PA", "PB").minimum()
    d = state.unwrapped()[exp.bonds[:, 0]] - state.unwrapped()[exp.bonds[:, 1]]
    assert np.all(np.linalg.norm(d, axis=1) <= 1.2 * r0)


def test_build_system_no_molecules(ff):
    top = Topology(dict(ff.bead_types), [water_template()], [0])
    with pytest.raises(TopologyError):
        build_system(top, 1.0, 293.0, 1)


def test_build_system_density_too_high(ff):
    top = Topology(dict(ff.bead_types), [water_template()], [100])
    with pytest.raises(ConfigurationError, match="too high"):
        build_system(top, 50.0, 293.0, 1)


def test_build_system_nonpositive_density(ff):
    top = Topology(dict(ff.bead_types), [water_template()], [10])
    with pytest.raises(ConfigurationError):
        build_system(top, 0.0, 293.0, 1)


def _state_for(ff, molecules, counts, pos, box=(10.0, 10.0, 10.0)):
    exp = Topology(dict(ff.bead_types), molecules, counts).expand()
    return SystemState(np.asarray(pos, float), np.zeros((len(pos), 3)), np.asarray(box), exp)


def test_com_single_bead(ff):
    st_ = _state_for(ff, [water_template()], [1], [[1, 1, 1]])
    assert np.allclose(molecule_center_of_mass(st_, 0), [1, 1, 1])


def test_com_equal_masses(ff):
    st_ = _state_for(ff, [ego_chain(2)], [1], [[0, 0, 0], [2, 0, 0]])
    assert np.allclose(molecule_center_of_mass(st_, 0), [1, 0, 0])


def test_com_pa_pb(ff):
    mol = MoleculeTemplate("AB", ["PA", "PB"], [(0, 1)])
    st_ = _state_for(ff, [mol], [1], [[0, 0, 0], [1, 0, 0]])
    com = molecule_center_of_mass(st_, 0)
    assert com[0] == pytest.approx(44.0 / 97.0, abs=1e-12)
    assert round(com[0], 4) == 0.4536


def test_com_uses_unwrapped_positions(ff):
    st_ = _state_for(ff, [ego_chain(2)], [1], [[4.9, 1, 1], [5.1, 1, 1]], box=(5, 5, 5))
    # the second bead wrapped to 0.1 but carries an image count
    assert st_.positions[1, 0] == pytest.approx(0.1)
    assert np.allclose(molecule_center_of_mass(st_, 0), [5.0, 1, 1])


def test_species_masses_and_molecules_per_bead(ff):
    assert (ff.bead_types["PA"].mass, ff.bead_types["PB"].mass, ff.bead_types["PW"].mass) == \
        (53.0, 44.0, 54.0)
    assert water_template().molecules_per_bead == 3
    assert ego_chain(13).beads == ["PA"] + ["PB"] * 11 + ["PA"]
    assert builtin_species("EGO2").beads == ["PA", "PA"]
    assert builtin_species("EGO4").molecules_per_bead == 1


@pytest.mark.parametrize("bonds,angles,match", [
    ([(0, 3)], [], "out of range"),
    ([(0, 1), (1, 0)], [], "duplicate"),
    ([(0, 1)], [(0, 1, 2)], "middle bead"),
])
def test_template_validation(bonds, angles, match):
    with pytest.raises(TopologyError, match=match):
        MoleculeTemplate("X", ["PA", "PB", "PA"], bonds, angles).validate()


def test_remove_com_motion(ff):
    st_ = _state_for(ff, [water_template()], [3], [[1, 1, 1], [2, 2, 2], [3, 3, 3]])
    st_.velocities[:] = [[1.0, 0, 0], [0, 2, 0], [0, 0, 3]]
    st_.remove_com_motion()
    assert np.linalg.norm(st_.momentum()) < 1e-12
