"""Domain types, units, periodic geometry and topology handling.

Internal units are nm, ps, amu, kJ/mol and K. Conversions to reporting units
(g/cm^3, m^2/s, mPa s, bar) happen only through the constants defined here.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import constants as _si

BOLTZMANN = 0.0083144621  # kJ/(mol K)
AVOGADRO = _si.Avogadro
AMU_G = _si.atomic_mass * 1e3
AMU_PER_NM3_TO_G_PER_CM3 = AMU_G * 1e21
NM2_PER_PS_TO_M2_PER_S = 1e-6
KJ_MOL_NM3_TO_BAR = 1e3 / AVOGADRO / 1e-27 / 1e5
AMU_PER_NM_PS_TO_MPA_S = AMU_G * 1e-3 / (1e-9 * 1e-12) * 1e3
ATM_BAR = 1.01325


class TopologyError(ValueError):
    """Raised for an inconsistent molecule template or system composition."""


class ConfigurationError(ValueError):
    """Raised when an initial configuration cannot be built."""


@dataclass(frozen=True)
class UnitSystem:
    length: str = "nm"
    time: str = "ps"
    mass: str = "amu"
    energy: str = "kJ/mol"
    temperature: str = "K"
    boltzmann_constant: float = BOLTZMANN

    def as_dict(self):
        return dataclasses.asdict(self)


UNITS = UnitSystem()


@dataclass(frozen=True)
class BeadType:
    name: str
    mass: float
    sigma: float
    epsilon: float

    def __post_init__(self):
        if self.mass <= 0 or self.sigma <= 0 or self.epsilon <= 0:
            raise ValueError(f"bead type {self.name}: mass, sigma and epsilon must be positive")


@dataclass
class MixingRule:
    """Lorentz-Berthelot mixing with optional per-pair epsilon multipliers."""

    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        cleaned = {}
        for key, gamma in dict(self.overrides).items():
            if gamma <= 0:
                raise ValueError(f"gamma for {key} must be positive")
            cleaned[frozenset(key) if not isinstance(key, frozenset) else key] = float(gamma)
        self.overrides = cleaned

    def gamma(self, name_i, name_j):
        return self.overrides.get(frozenset((name_i, name_j)), 1.0)

    def set(self, name_i, name_j, gamma):
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        self.overrides[frozenset((name_i, name_j))] = float(gamma)

    def pairs(self):
        """Overrides as sorted (type_i, type_j, gamma) tuples."""
        out = []
        for key, g in self.overrides.items():
            names = sorted(key)
            if len(names) == 1:
                names = names * 2
            out.append((names[0], names[1], g))
        return sorted(out)


@dataclass
class MoleculeTemplate:
    """One molecular species: bead sequence, bonds, angles and molecules per bead."""

    name: str
    beads: list
    bonds: list = field(default_factory=list)
    angles: list = field(default_factory=list)
    molecules_per_bead: int = 1

    def validate(self, bead_types=None):
        nb = len(self.beads)
        if nb == 0:
            raise TopologyError(f"{self.name}: molecule has no beads")
        if self.molecules_per_bead < 1:
            raise TopologyError(f"{self.name}: molecules_per_bead must be >= 1")
        if bead_types is not None:
            for b in self.beads:
                if b not in bead_types:
                    raise TopologyError(f"{self.name}: unknown bead type {b!r}")
        seen = set()
        for i, j in self.bonds:
            if not (0 <= i < nb and 0 <= j < nb) or i == j:
                raise TopologyError(f"{self.name}: bond ({i}, {j}) out of range")
            key = frozenset((i, j))
            if key in seen:
                raise TopologyError(f"{self.name}: duplicate bond ({i}, {j})")
            seen.add(key)
        for i, j, k in self.angles:
            if not all(0 <= x < nb for x in (i, j, k)):
                raise TopologyError(f"{self.name}: angle ({i}, {j}, {k}) out of range")
            if frozenset((i, j)) not in seen or frozenset((j, k)) not in seen:
                raise TopologyError(
                    f"{self.name}: angle ({i}, {j}, {k}) middle bead not bonded to both ends"
                )


def linear_chain(name, beads, molecules_per_bead=1):
    """Template for an unbranched chain with all bonds and angles along the backbone."""
    n = len(beads)
    bonds = [(i, i + 1) for i in range(n - 1)]
    angles = [(i, i + 1, i + 2) for i in range(n - 2)]
    return MoleculeTemplate(name, list(beads), bonds, angles, molecules_per_bead)


def ego_chain(n_units):
    """EGO_n: PA-(PB)_{n-2}-PA; EGO2 is PA-PA."""
    if n_units < 2:
        raise ValueError("an EGO chain needs at least two units")
    return linear_chain(f"EGO{n_units}", ["PA"] + ["PB"] * (n_units - 2) + ["PA"])


def water_template():
    return MoleculeTemplate("PW", ["PW"], molecules_per_bead=3)


def builtin_species(name):
    """Built-in templates: ``PW``/``water`` and ``EGO<n>``."""
    if name in ("PW", "water"):
        return water_template()
    if name.upper().startswith("EGO") and name[3:].isdigit():
        return ego_chain(int(name[3:]))
    raise KeyError(f"no built-in species {name!r}")


@dataclass
class Topology:
    bead_types: dict
    molecules: list
    counts: list

    def __post_init__(self):
        if isinstance(self.bead_types, (list, tuple)):
            self.bead_types = {b.name: b for b in self.bead_types}

    def validate(self):
        if len(self.molecules) != len(self.counts):
            raise TopologyError("molecules and counts differ in length")
        names = [m.name for m in self.molecules]
        if len(set(names)) != len(names):
            raise TopologyError("duplicate molecule names")
        for m, c in zip(self.molecules, self.counts):
            m.validate(self.bead_types)
            if c < 0:
                raise TopologyError(f"{m.name}: negative count")
        if sum(self.counts) == 0:
            raise TopologyError("system contains no molecules")

    def molecule(self, name):
        for m in self.molecules:
            if m.name == name:
                return m
        raise KeyError(name)

    def molecule_mass(self, template):
        return sum(self.bead_types[b].mass for b in template.beads)

    def total_mass(self):
        return sum(c * self.molecule_mass(m) for m, c in zip(self.molecules, self.counts))

    def expand(self):
        return ExpandedTopology.from_topology(self)


@dataclass
class ExpandedTopology:
    """Per-bead arrays for a concrete system (the engine's view of a Topology)."""

    topology: Topology
    type_names: list
    types: np.ndarray
    masses: np.ndarray
    mol_index: np.ndarray
    species_index: np.ndarray
    mol_start: np.ndarray
    bonds: np.ndarray
    angles: np.ndarray
    excl_ptr: np.ndarray
    excl_idx: np.ndarray

    @classmethod
    def from_topology(cls, top):
        top.validate()
        type_names = list(top.bead_types)
        type_of = {n: i for i, n in enumerate(type_names)}
        types, masses, mol_index, species, starts = [], [], [], [], []
        bonds, angles = [], []
        offset = 0
        imol = 0
        for s, (tmpl, count) in enumerate(zip(top.molecules, top.counts)):
            nb = len(tmpl.beads)
            for _ in range(count):
                starts.append(offset)
                for b in tmpl.beads:
                    types.append(type_of[b])
                    masses.append(top.bead_types[b].mass)
                    mol_index.append(imol)
                    species.append(s)
                bonds.extend((offset + i, offset + j) for i, j in tmpl.bonds)
                angles.extend((offset + i, offset + j, offset + k) for i, j, k in tmpl.angles)
                offset += nb
                imol += 1
        starts.append(offset)
        n = offset
        excl = [set() for _ in range(n)]
        for i, j in bonds:
            excl[i].add(j)
            excl[j].add(i)
        for i, _, k in angles:
            excl[i].add(k)
            excl[k].add(i)
        ptr = np.zeros(n + 1, dtype=np.int32)
        idx = []
        for i in range(n):
            partners = sorted(excl[i])
            idx.extend(partners)
            ptr[i + 1] = ptr[i] + len(partners)
        return cls(
            topology=top,
            type_names=type_names,
            types=np.asarray(types, dtype=np.int32),
            masses=np.asarray(masses, dtype=float),
            mol_index=np.asarray(mol_index, dtype=np.int32),
            species_index=np.asarray(species, dtype=np.int32),
            mol_start=np.asarray(starts, dtype=np.int64),
            bonds=np.asarray(bonds, dtype=np.int32).reshape(-1, 2),
            angles=np.asarray(angles, dtype=np.int32).reshape(-1, 3),
            excl_ptr=ptr,
            excl_idx=np.asarray(idx, dtype=np.int32),
        )

    @property
    def n_beads(self):
        return len(self.types)

    @property
    def n_molecules(self):
        return len(self.mol_start) - 1

    def molecules_of(self, species_name):
        names = [m.name for m in self.topology.molecules]
        if species_name not in names:
            raise KeyError(f"species {species_name!r} not in system")
        s = names.index(species_name)
        first = self.species_index[self.mol_start[:-1]]
        return np.flatnonzero(first == s)

    def beads_of_molecule(self, imol):
        return np.arange(self.mol_start[imol], self.mol_start[imol + 1])


@dataclass
class ThermostatState:
    p_eta: float = 0.0
    eta: float = 0.0


@dataclass
class BarostatState:
    p_eps: float = 0.0
    p_eta: float = 0.0
    eta: float = 0.0


@dataclass
class SystemState:
    """Positions are wrapped into [0, box); ``images`` counts box crossings per axis."""

    positions: np.ndarray
    velocities: np.ndarray
    box: np.ndarray
    topology: ExpandedTopology
    images: np.ndarray = None
    thermostat: ThermostatState = field(default_factory=ThermostatState)
    barostat: BarostatState = field(default_factory=BarostatState)
    time: float = 0.0
    step: int = 0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=float)
        self.velocities = np.ascontiguousarray(self.velocities, dtype=float)
        self.box = np.ascontiguousarray(self.box, dtype=float)
        if self.images is None:
            self.images = np.zeros(self.positions.shape, dtype=np.int64)
        self.wrap()

    @property
    def masses(self):
        return self.topology.masses

    @property
    def n_beads(self):
        return len(self.positions)

    def wrap(self):
        shift = np.floor(self.positions / self.box)
        if shift.any():
            self.positions -= shift * self.box
            self.images += shift.astype(np.int64)
        # floating round-off can leave x == box
        over = self.positions >= self.box
        if over.any():
            self.positions[over] -= np.broadcast_to(self.box, self.positions.shape)[over]
            self.images[over] += 1

    def unwrapped(self):
        return self.positions + self.images * self.box

    def volume(self):
        return float(np.prod(self.box))

    def total_mass(self):
        return float(self.masses.sum())

    def density(self):
        """Mass density in g/cm^3."""
        return self.total_mass() / self.volume() * AMU_PER_NM3_TO_G_PER_CM3

    def momentum(self):
        return (self.masses[:, None] * self.velocities).sum(axis=0)

    def kinetic_energy(self):
        return 0.5 * float((self.masses[:, None] * self.velocities**2).sum())

    def degrees_of_freedom(self):
        return 3 * self.n_beads - 3

    def temperature(self):
        return 2.0 * self.kinetic_energy() / (self.degrees_of_freedom() * BOLTZMANN)

    def remove_com_motion(self):
        m = self.masses
        vcm = (m[:, None] * self.velocities).sum(axis=0) / m.sum()
        self.velocities -= vcm

    def copy(self):
        return SystemState(
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            box=self.box.copy(),
            topology=self.topology,
            images=self.images.copy(),
            thermostat=dataclasses.replace(self.thermostat),
            barostat=dataclasses.replace(self.barostat),
            time=self.time,
            step=self.step,
        )


def minimum_image_displacement(r_i, r_j, box):
    """r_i - r_j with every component folded into (-L/2, L/2]."""
    d = np.asarray(r_i, dtype=float) - np.asarray(r_j, dtype=float)
    box = np.asarray(box, dtype=float)
    return d - box * np.ceil(d / box - 0.5)


def box_edge_for_density(total_mass_amu, density_g_cm3):
    """Edge of the cube holding ``total_mass_amu`` at the given density, in nm."""
    return (total_mass_amu * AMU_PER_NM3_TO_G_PER_CM3 / density_g_cm3) ** (1.0 / 3.0)


def _snake_order(nx, ny, nz):
    """Lattice sites in boustrophedon order; consecutive sites are nearest neighbours."""
    sites = []
    for ix in range(nx):
        ys = range(ny) if ix % 2 == 0 else range(ny - 1, -1, -1)
        for jy, iy in enumerate(ys):
            # z direction flips on every (x, y) row so the path stays continuous
            row = ix * ny + jy
            zs = range(nz) if row % 2 == 0 else range(nz - 1, -1, -1)
            for iz in zs:
                sites.append((ix, iy, iz))
    return np.asarray(sites, dtype=float)


def build_system(topology, target_density, temperature, seed, forcefield=None,
                 box_aspect=(1.0, 1.0, 1.0), jitter=0.05):
    """Perturbed-lattice start at the box implied by mass and density.

    Chains follow a continuous lattice path contracted to the equilibrium
    bond length; molecules are jittered rigidly so bond lengths stay exact.
    Velocities are Maxwell-Boltzmann with zero net momentum, rescaled to
    exactly ``temperature``.
    """
    if target_density <= 0:
        raise ConfigurationError("target density must be positive")
    if isinstance(topology, Topology):
        topology.validate()
        top = topology
        exp = topology.expand()
    else:
        exp = topology
        top = exp.topology
    rng = np.random.default_rng(seed)
    n = exp.n_beads
    mass = float(exp.masses.sum())
    volume = mass * AMU_PER_NM3_TO_G_PER_CM3 / target_density
    aspect = np.asarray(box_aspect, dtype=float)
    box = aspect * (volume / np.prod(aspect)) ** (1.0 / 3.0)

    a0 = (volume / n) ** (1.0 / 3.0)
    counts = np.maximum(1, np.floor(box / a0)).astype(int)
    while np.prod(counts) < n:
        # grow the axis with the largest spacing
        counts[np.argmax(box / counts)] += 1
    spacing = box / counts
    min_sigma = min(b.sigma for b in top.bead_types.values())
    if spacing.min() < 0.5 * min_sigma:
        raise ConfigurationError(
            f"density {target_density} g/cm^3 too high: lattice spacing "
            f"{spacing.min():.4f} nm < 0.5*min(sigma) = {0.5 * min_sigma:.4f} nm"
        )
    sites = _snake_order(*counts) * spacing + 0.5 * spacing

    positions = np.empty((n, 3))
    cursor = 0
    # interleave species along the lattice path
    for imol in rng.permutation(exp.n_molecules):
        beads = exp.beads_of_molecule(imol)
        nb = len(beads)
        path = sites[cursor:cursor + nb]
        start = sites[cursor]
        if nb > 1:
            bond_len = _equilibrium_bond_lengths(exp, beads, forcefield)
            seg = np.diff(path, axis=0)
            seg /= np.linalg.norm(seg, axis=1)[:, None]
            positions[beads[0]] = start
            for k in range(1, nb):
                positions[beads[k]] = positions[beads[k - 1]] + seg[k - 1] * bond_len[k - 1]
        else:
            positions[beads[0]] = start
        positions[beads] += rng.uniform(-jitter, jitter, 3) * spacing
        cursor += nb

    m = exp.masses
    vel = rng.standard_normal((n, 3)) * np.sqrt(BOLTZMANN * temperature / m)[:, None]
    state = SystemState(positions=positions, velocities=vel, box=box, topology=exp)
    state.remove_com_motion()
    if n > 1 and temperature > 0:
        state.velocities *= math.sqrt(temperature / state.temperature())
    elif temperature == 0:
        state.velocities[:] = 0.0
    return state


def _equilibrium_bond_lengths(exp, beads, forcefield):
    out = []
    names = exp.type_names
    for a, b in zip(beads[:-1], beads[1:]):
        if forcefield is None:
            out.append(0.32)
        else:
            pot = forcefield.bond_potential(names[exp.types[a]], names[exp.types[b]])
            out.append(pot.minimum())
    return np.asarray(out)


def molecule_center_of_mass(state, molecule_index):
    """Mass-weighted mean of the molecule's unwrapped bead positions."""
    beads = state.topology.beads_of_molecule(molecule_index)
    m = state.masses[beads]
    r = state.unwrapped()[beads]
    return (m[:, None] * r).sum(axis=0) / m.sum()


def molecule_centers_of_mass(exp, unwrapped):
    """COMs of all molecules for one frame (unwrapped positions), shape (n_mol, 3)."""
    m = exp.masses
    weighted = m[:, None] * unwrapped
    sums = np.add.reduceat(weighted, exp.mol_start[:-1], axis=0)
    msum = np.add.reduceat(m, exp.mol_start[:-1])
    return sums / msum[:, None]
