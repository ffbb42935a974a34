"""Energy and force evaluation for the CG force field.

Nonbonded: 12-6 Lennard-Jones, energy-shifted to zero at the cutoff, with
Lorentz-Berthelot mixing and optional per-pair epsilon multipliers.
Bonded: stretch and bend potentials given as minus kT times the log of a
sum of Gaussians, with analytic derivatives and quadratic tails.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.optimize import minimize_scalar

from . import kernels
from .core import BOLTZMANN, BeadType, MixingRule, minimum_image_displacement

R_FLOOR = 1e-4  # nm
BOND_MIN = 1e-6  # nm
SIN_FLOOR = 1e-6
_SQRT_HALF_PI = math.sqrt(math.pi / 2.0)


class OverlapError(RuntimeError):
    """Two beads closer than the allowed floor."""


@dataclass(frozen=True)
class LJPairParams:
    sigma: float
    epsilon: float
    r_cut: float = 1.4
    shifted: bool = True

    def __post_init__(self):
        if self.sigma <= 0 or self.epsilon <= 0:
            raise ValueError("sigma and epsilon must be positive")
        if self.r_cut <= self.sigma:
            raise ValueError("r_cut must exceed sigma")

    @property
    def shift(self):
        """Constant added to the LJ energy so that U(r_cut) = 0."""
        if not self.shifted:
            return 0.0
        sr6 = (self.sigma / self.r_cut) ** 6
        return -4.0 * self.epsilon * (sr6 * sr6 - sr6)

    @property
    def c12(self):
        return 4.0 * self.epsilon * self.sigma**12

    @property
    def c6(self):
        return 4.0 * self.epsilon * self.sigma**6


def lj_energy_force(r, p, cap=False):
    """Energy and radial force (positive = repulsive) of one LJ pair at distance r.

    With ``cap=True`` the force below 0.5*sigma is held at its value there and
    the energy continues linearly; otherwise r < 1e-4 nm raises OverlapError.
    """
    if r >= p.r_cut:
        return 0.0, 0.0
    if cap and r < 0.5 * p.sigma:
        rc = 0.5 * p.sigma
        e_c, f_c = lj_energy_force(rc, p)
        return e_c + f_c * (rc - r), f_c
    if r < R_FLOOR:
        raise OverlapError(f"pair distance {r:g} nm below floor {R_FLOOR} nm")
    sr6 = (p.sigma / r) ** 6
    energy = 4.0 * p.epsilon * (sr6 * sr6 - sr6) + p.shift
    force = 24.0 * p.epsilon * (2.0 * sr6 * sr6 - sr6) / r
    return energy, force


def combine_params(type_i, type_j, rule=None, r_cut=1.4, shifted=True):
    """Lorentz-Berthelot parameters, epsilon scaled by gamma where overridden."""
    sigma = 0.5 * (type_i.sigma + type_j.sigma)
    epsilon = math.sqrt(type_i.epsilon * type_j.epsilon)
    if rule is not None:
        epsilon *= rule.gamma(type_i.name, type_j.name)
    return LJPairParams(sigma, epsilon, r_cut, shifted)


@dataclass(frozen=True)
class MixturePotentialParams:
    """Gaussian-mixture bonded potential; ``mu``/``xi`` in nm (bond) or degrees (angle)."""

    kind: str
    A: tuple
    mu: tuple
    xi: tuple
    temperature_ref: float = 293.0

    def __post_init__(self):
        object.__setattr__(self, "A", tuple(float(a) for a in self.A))
        object.__setattr__(self, "mu", tuple(float(a) for a in self.mu))
        object.__setattr__(self, "xi", tuple(float(a) for a in self.xi))
        if self.kind not in ("bond", "angle"):
            raise ValueError(f"kind must be 'bond' or 'angle', got {self.kind!r}")
        if not (len(self.A) == len(self.mu) == len(self.xi) >= 1):
            raise ValueError("A, mu and xi must have equal length >= 1")
        if min(self.A) <= 0 or min(self.xi) <= 0:
            raise ValueError("all A and xi must be positive")

    @property
    def m(self):
        return len(self.A)

    @property
    def kT(self):
        return BOLTZMANN * self.temperature_ref

    @cached_property
    def _arrays(self):
        a = np.asarray(self.A)
        mu = np.asarray(self.mu)
        xi = np.asarray(self.xi)
        return np.log(a / (xi * _SQRT_HALF_PI)), mu, 1.0 / xi**2

    @cached_property
    def domain(self):
        """Tabulation interval; the tails beyond it are quadratic."""
        mu = np.asarray(self.mu)
        xi = np.asarray(self.xi)
        lo = float(np.min(mu - 5.0 * xi))
        hi = float(np.max(mu + 5.0 * xi))
        if self.kind == "angle":
            return max(lo, 0.0), min(hi, 180.0)
        return max(lo, 1e-3), hi

    def _raw(self, q):
        """Unshifted -kT ln(sum G), first and second derivative."""
        lp, mu, ix2 = self._arrays
        q = np.asarray(q, dtype=float)
        dq = q[..., None] - mu
        z = lp - 0.5 * dq * dq * ix2
        mx = z.max(axis=-1, keepdims=True)
        w = np.exp(z - mx)
        s = w.sum(axis=-1)
        u = -self.kT * (mx[..., 0] + np.log(s))
        w = w / s[..., None]
        g = dq * ix2
        d1 = (w * g).sum(axis=-1)
        d2 = (w * (ix2 - g * g)).sum(axis=-1) + d1 * d1
        return u, self.kT * d1, self.kT * d2

    @cached_property
    def offset(self):
        lo, hi = self.domain
        grid = np.linspace(lo, hi, 4001)
        u = self._raw(grid)[0]
        k = int(np.argmin(u))
        a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
        best = float(u[k])
        if b > a:
            res = minimize_scalar(lambda x: float(self._raw(x)[0]), bounds=(a, b),
                                  method="bounded", options={"xatol": 1e-13})
            best = min(best, float(res.fun))
        return best

    @cached_property
    def edges(self):
        """U, U', U'' at both domain edges (U'' floored by the widest component)."""
        lo, hi = self.domain
        kfloor = self.kT / max(self.xi) ** 2
        out = []
        for q in (lo, hi):
            u, d1, d2 = self._raw(q)
            out.extend([float(u) - self.offset, float(d1), max(float(d2), kfloor)])
        return tuple(out)

    def evaluate(self, q):
        """Energy (kJ/mol) and dU/dQ (kJ/mol per nm or per degree), vectorized."""
        q = np.asarray(q, dtype=float)
        lo, hi = self.domain
        ulo, dlo, klo, uhi, dhi, khi = self.edges
        u, d1, _ = self._raw(np.clip(q, lo, hi))
        u = u - self.offset
        below = q < lo
        above = q > hi
        dl = q - lo
        dh = q - hi
        u = np.where(below, ulo + dlo * dl + 0.5 * klo * dl * dl, u)
        d1 = np.where(below, dlo + klo * dl, d1)
        u = np.where(above, uhi + dhi * dh + 0.5 * khi * dh * dh, u)
        d1 = np.where(above, dhi + khi * dh, d1)
        if u.ndim == 0:
            return float(u), float(d1)
        return u, d1

    def probability(self, q):
        """Unnormalized sum of Gaussians, exp(-U_raw/kT)."""
        lp, mu, ix2 = self._arrays
        q = np.asarray(q, dtype=float)
        dq = q[..., None] - mu
        return np.exp(lp - 0.5 * dq * dq * ix2).sum(axis=-1)

    def minimum(self):
        """Location of the potential minimum inside the tabulation domain."""
        lo, hi = self.domain
        grid = np.linspace(lo, hi, 4001)
        u = self._raw(grid)[0]
        k = int(np.argmin(u))
        a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
        res = minimize_scalar(lambda x: float(self._raw(x)[0]), bounds=(a, b),
                              method="bounded", options={"xatol": 1e-12})
        return float(res.x)

    def sorted_by_area(self):
        order = np.argsort(self.A)[::-1]
        return dataclasses.replace(
            self,
            A=tuple(self.A[i] for i in order),
            mu=tuple(self.mu[i] for i in order),
            xi=tuple(self.xi[i] for i in order),
        )


def mixture_potential(q, p):
    """(U, dU/dQ) of a Gaussian-mixture potential; U has its minimum at zero."""
    return p.evaluate(q)


def _canonical_angle(a, b, c):
    return min((a, b, c), (c, b, a))


@dataclass
class ForceField:
    name: str
    bead_types: dict
    mixing: MixingRule = field(default_factory=MixingRule)
    bond_potentials: dict = field(default_factory=dict)
    angle_potentials: dict = field(default_factory=dict)
    r_cut: float = 1.4
    comments: list = field(default_factory=list)

    def __post_init__(self):
        if isinstance(self.bead_types, (list, tuple)):
            self.bead_types = {b.name: b for b in self.bead_types}
        self.bond_potentials = {tuple(sorted(k)): v for k, v in self.bond_potentials.items()}
        self.angle_potentials = {_canonical_angle(*k): v for k, v in self.angle_potentials.items()}

    def pair_params(self, name_i, name_j):
        return combine_params(self.bead_types[name_i], self.bead_types[name_j],
                              self.mixing, self.r_cut)

    def bond_potential(self, name_i, name_j):
        key = tuple(sorted((name_i, name_j)))
        try:
            return self.bond_potentials[key]
        except KeyError:
            raise KeyError(f"no bond potential for {name_i}-{name_j}") from None

    def angle_potential(self, a, b, c):
        key = _canonical_angle(a, b, c)
        try:
            return self.angle_potentials[key]
        except KeyError:
            raise KeyError(f"no angle potential for {a}-{b}-{c}") from None

    def with_bead(self, name, **changes):
        """Copy with one bead type's mass/sigma/epsilon replaced."""
        types = dict(self.bead_types)
        types[name] = dataclasses.replace(types[name], **changes)
        return dataclasses.replace(self, bead_types=types,
                                   mixing=MixingRule(dict(self.mixing.overrides)))

    def with_gamma(self, name_i, name_j, gamma):
        mixing = MixingRule(dict(self.mixing.overrides))
        mixing.set(name_i, name_j, gamma)
        return dataclasses.replace(self, bead_types=dict(self.bead_types), mixing=mixing)

    def types_for(self, topology):
        """Check every bead type of a Topology is parameterized."""
        missing = [t for t in topology.bead_types if t not in self.bead_types]
        if missing:
            raise KeyError(f"force field {self.name!r} lacks bead types {missing}")


def _pack_mixtures(potentials):
    mmax = max((p.m for p in potentials), default=1)
    comp = np.zeros((max(len(potentials), 1), mmax, 3))
    ncomp = np.ones(max(len(potentials), 1), dtype=np.int32)
    scal = np.zeros((max(len(potentials), 1), 10))
    for t, p in enumerate(potentials):
        lp, mu, ix2 = p._arrays
        comp[t, :p.m, 0] = lp
        comp[t, :p.m, 1] = mu
        comp[t, :p.m, 2] = ix2
        ncomp[t] = p.m
        lo, hi = p.domain
        ulo, dlo, klo, uhi, dhi, khi = p.edges
        scal[t] = [p.kT, p.offset, lo, hi, ulo, dlo, klo, uhi, dhi, khi]
    return comp, ncomp, scal


@dataclass
class ForceTerms:
    bond: float = 0.0
    angle: float = 0.0
    nonbonded: float = 0.0
    virial: float = 0.0

    @property
    def potential(self):
        return self.bond + self.angle + self.nonbonded


class ForceComputer:
    """Force-field tables compiled against one system's bead-type ordering."""

    def __init__(self, ff, topology, cap=False, backend=None):
        self.ff = ff
        self.topology = topology
        self.kernels = kernels if backend is None else kernels.get_backend(backend)
        names = topology.type_names
        ff.types_for(topology.topology)
        nt = len(names)
        self.c12 = np.zeros((nt, nt))
        self.c6 = np.zeros((nt, nt))
        self.shift = np.zeros((nt, nt))
        self.rcap2 = np.zeros((nt, nt))
        for a in range(nt):
            for b in range(nt):
                p = ff.pair_params(names[a], names[b])
                self.c12[a, b] = p.c12
                self.c6[a, b] = p.c6
                self.shift[a, b] = p.shift
                if cap:
                    self.rcap2[a, b] = (0.5 * p.sigma) ** 2
        self.r_cut = ff.r_cut

        bond_keys, bond_type = [], []
        for i, j in topology.bonds:
            key = tuple(sorted((names[topology.types[i]], names[topology.types[j]])))
            if key not in bond_keys:
                bond_keys.append(key)
            bond_type.append(bond_keys.index(key))
        self.bond_type = np.asarray(bond_type, dtype=np.int32)
        self.bond_pots = [ff.bond_potential(*k) for k in bond_keys]
        self.bond_tables = _pack_mixtures(self.bond_pots)

        angle_keys, angle_type = [], []
        for i, j, k in topology.angles:
            key = _canonical_angle(names[topology.types[i]], names[topology.types[j]],
                                   names[topology.types[k]])
            if key not in angle_keys:
                angle_keys.append(key)
            angle_type.append(angle_keys.index(key))
        self.angle_type = np.asarray(angle_type, dtype=np.int32)
        self.angle_pots = [ff.angle_potential(*k) for k in angle_keys]
        self.angle_tables = _pack_mixtures(self.angle_pots)

        top = topology
        self._bi = np.ascontiguousarray(top.bonds[:, 0])
        self._bj = np.ascontiguousarray(top.bonds[:, 1])
        self._ai = np.ascontiguousarray(top.angles[:, 0])
        self._aj = np.ascontiguousarray(top.angles[:, 1])
        self._ak = np.ascontiguousarray(top.angles[:, 2])

    def compute(self, positions, box, pairs, out=None):
        """Forces (N, 3) and ForceTerms for the given pair list."""
        k = self.kernels
        forces = np.zeros_like(positions) if out is None else out
        if out is not None:
            forces[:] = 0.0
        pi, pj = pairs
        e_lj, w_lj, bad = k.lj_forces(positions, box, pi, pj, self.topology.types,
                                      self.c12, self.c6, self.shift, self.rcap2,
                                      self.r_cut**2, R_FLOOR**2, forces)
        if bad >= 0:
            raise OverlapError(f"beads {pi[bad]} and {pj[bad]} closer than {R_FLOOR} nm")
        e_b, w_b, bad = k.bond_forces(positions, box, self._bi, self._bj, self.bond_type,
                                      *self.bond_tables, BOND_MIN, forces)
        if bad >= 0:
            raise OverlapError(f"bonded beads {self._bi[bad]}-{self._bj[bad]} coincide")
        e_a, w_a, bad = k.angle_forces(positions, box, self._ai, self._aj, self._ak,
                                       self.angle_type, *self.angle_tables, BOND_MIN,
                                       SIN_FLOOR, forces)
        if bad >= 0:
            raise OverlapError(f"angle {bad} has coincident beads")
        return forces, ForceTerms(e_b, e_a, e_lj, w_lj + w_b + w_a)


def bond_force(state, bead_i, bead_j, p):
    """Forces on beads i and j from one bond potential (minimum-image distance)."""
    if p.kind != "bond":
        raise ValueError("bond_force needs a bond potential")
    d = minimum_image_displacement(state.positions[bead_i], state.positions[bead_j], state.box)
    r = float(np.linalg.norm(d))
    if r < BOND_MIN:
        raise OverlapError(f"bonded beads {bead_i}-{bead_j} coincide")
    _, du = p.evaluate(r)
    f_i = -du * d / r
    return f_i, -f_i


def bond_angle(r_i, r_j, r_k, box):
    a = minimum_image_displacement(r_i, r_j, box)
    b = minimum_image_displacement(r_k, r_j, box)
    ua = a / np.linalg.norm(a)
    ub = b / np.linalg.norm(b)
    return math.degrees(math.atan2(np.linalg.norm(np.cross(ua, ub)), float(ua @ ub)))


def angle_force(state, bead_i, bead_j, bead_k, p):
    """Forces on i, j, k from one bend potential; theta in degrees.

    The angle comes from atan2(|a x b|, a.b), which stays accurate near 0 and
    180 degrees, and sin(theta) is floored at 1e-6 in the gradient.
    """
    if p.kind != "angle":
        raise ValueError("angle_force needs an angle potential")
    box = state.box
    a = minimum_image_displacement(state.positions[bead_i], state.positions[bead_j], box)
    b = minimum_image_displacement(state.positions[bead_k], state.positions[bead_j], box)
    la, lb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if la < BOND_MIN or lb < BOND_MIN:
        raise OverlapError("angle with coincident beads")
    ua, ub = a / la, b / lb
    cosv = float(ua @ ub)
    sinv = float(np.linalg.norm(np.cross(ua, ub)))
    theta = math.degrees(math.atan2(sinv, cosv))
    _, du = p.evaluate(theta)
    g = du * 180.0 / math.pi
    sinv = max(sinv, SIN_FLOOR)
    f_i = -g * (cosv * ua - ub) / (la * sinv)
    f_k = -g * (cosv * ub - ua) / (lb * sinv)
    return f_i, -(f_i + f_k), f_k


@dataclass
class EnergyBreakdown:
    bond: float
    angle: float
    nonbonded: float
    kinetic: float

    @property
    def total(self):
        return self.bond + self.angle + self.nonbonded + self.kinetic


def total_energy(state, ff, pairs=None, computer=None):
    """Bond, angle, nonbonded and kinetic energy (kJ/mol) of a state.

    ``pairs`` is the current pair list; when omitted it is built fresh at the
    force-field cutoff with 1-2 and 1-3 exclusions.
    """
    computer = computer or ForceComputer(ff, state.topology)
    if pairs is None:
        top = state.topology
        pairs = kernels.build_pairs(state.positions, state.box, ff.r_cut, top.mol_index,
                                    top.excl_ptr, top.excl_idx)
    _, terms = computer.compute(state.positions, state.box, pairs)
    return EnergyBreakdown(terms.bond, terms.angle, terms.nonbonded, state.kinetic_energy())


def bundled_forcefield(name="ego_water_293K"):
    from .formats import load_forcefield, bundled_path

    return load_forcefield(bundled_path(f"{name}.ff"))


__all__ = [
    "BeadType",
    "EnergyBreakdown",
    "ForceComputer",
    "ForceField",
    "ForceTerms",
    "LJPairParams",
    "MixturePotentialParams",
    "OverlapError",
    "angle_force",
    "bond_force",
    "bundled_forcefield",
    "combine_params",
    "lj_energy_force",
    "mixture_potential",
    "total_energy",
]
