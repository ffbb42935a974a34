"""Time integration, neighbour lists, NEMD forcing and run orchestration.

Integrators, all in Trotter-split velocity-Verlet form:

* NVE: plain velocity Verlet.
* NVT: single Nose-Hoover thermostat, half steps around the Verlet core.
* NpT: isotropic MTK barostat (second-order box momentum, Parrinello-Rahman
  style) with one Nose-Hoover thermostat acting on particles and barostat.

Under cosine forcing the thermostat acts on the peculiar velocity only: the
instantaneous amplitude V of the v_x ~ V cos(kz) profile is removed before
the kinetic energy is measured and scaled.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import ATM_BAR, BOLTZMANN, KJ_MOL_NM3_TO_BAR, ConfigurationError
from .potentials import ForceComputer, OverlapError

ENSEMBLES = ("NVE", "NVT", "NpT")
DEFAULT_COMPRESSIBILITY = 4.5e-5  # 1/bar, liquid water


class SimulationError(RuntimeError):
    """Numerical failure during integration (blow-up, overlap, box jump)."""


@dataclass
class IntegratorConfig:
    """Integrator settings. Times in ps, temperature in K, pressure in bar.

    ``thermostat_tau`` and ``barostat_tau`` are oscillation periods; ``None``
    or ``inf`` switches the coupling off.
    """

    ensemble: str = "NVT"
    dt: float = 0.010
    temperature: float = 293.0
    pressure: float = ATM_BAR
    thermostat_tau: float = 1.0
    barostat_tau: float = 5.0
    compressibility: float = DEFAULT_COMPRESSIBILITY
    seed: int = 0
    skin: float = 0.2
    cap_forces: bool = False
    check_neighbors: bool = False

    def __post_init__(self):
        if self.ensemble not in ENSEMBLES:
            raise ConfigurationError(f"ensemble must be one of {ENSEMBLES}, got {self.ensemble!r}")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.ensemble != "NVE" and not self.temperature > 0:
            raise ConfigurationError("temperature must be positive for NVT/NpT")
        if self.skin < 0:
            raise ConfigurationError("skin must be non-negative")

    def as_dict(self):
        return dataclasses.asdict(self)


def _active(tau):
    return tau is not None and math.isfinite(tau) and tau > 0


@dataclass
class NemdForcing:
    """Cosine body acceleration a_x = A cos(k z) with k = 2 pi / l_z."""

    amplitude: float = 0.0005
    l_z: float = None

    def __post_init__(self):
        if self.amplitude < 0:
            raise ConfigurationError("forcing amplitude must be >= 0")

    @property
    def k(self):
        if self.l_z is None:
            raise ConfigurationError("forcing has no box height; call update_box first")
        return 2.0 * math.pi / self.l_z

    def update_box(self, box):
        self.l_z = float(box[2])


def apply_cosine_acceleration(state, f):
    """Per-bead acceleration field (N, 3) of the cosine forcing, x component only."""
    if f.l_z is None or f.l_z != state.box[2]:
        f.update_box(state.box)
    acc = np.zeros_like(state.positions)
    acc[:, 0] = f.amplitude * np.cos(f.k * state.positions[:, 2])
    return acc


def profile_amplitude(velocities, masses, z, k):
    """Least-squares amplitude V of v_x = V cos(k z)."""
    c = np.cos(k * z)
    return float((masses * velocities[:, 0] * c).sum() / (masses * c * c).sum())


def streaming_profile(velocities, masses, z, k):
    """Fitted x streaming velocity per bead, shifted to carry zero net momentum."""
    c = np.cos(k * z)
    c -= (masses * c).sum() / masses.sum()
    return profile_amplitude(velocities, masses, z, k) * c


class NeighborList:
    """Verlet pair list at r_cut + skin, built from a cell grid.

    The list is rebuilt when any bead has moved more than half the skin since
    the last build. Under box scaling the reference positions are scaled too
    and the usable skin shrinks with the box.
    """

    def __init__(self, topology, r_cut, skin=0.2, backend=None, check=False):
        self.topology = topology
        self.r_cut = float(r_cut)
        self.skin = float(skin)
        self.kernels = kernels if backend is None else kernels.get_backend(backend)
        self.check = check
        self.pairs = (np.empty(0, np.int32), np.empty(0, np.int32))
        self.ref_positions = None
        self.ref_box = None
        self.n_builds = 0

    @property
    def cutoff(self):
        return self.r_cut + self.skin

    def check_box(self, box):
        for axis, length in zip("xyz", box):
            if length < 2.0 * self.cutoff:
                raise ConfigurationError(
                    f"box {axis} edge {length:.4f} nm is shorter than 2*(r_cut+skin) = "
                    f"{2.0 * self.cutoff:.4f} nm"
                )

    def build(self, positions, box, unwrapped=None):
        box = np.asarray(box, dtype=float)
        self.check_box(box)
        top = self.topology
        pos = np.ascontiguousarray(positions, dtype=float)
        pi, pj = self.kernels.build_pairs(pos, box, self.cutoff, top.mol_index,
                                          top.excl_ptr, top.excl_idx)
        if self.check:
            from . import _kernels_py

            bi, bj = _kernels_py.build_pairs(pos, box, self.cutoff, top.mol_index,
                                             top.excl_ptr, top.excl_idx)
            if not (np.array_equal(bi, pi) and np.array_equal(bj, pj)):
                raise SimulationError("cell-list pairs differ from brute-force pairs")
        self.pairs = (pi, pj)
        ref = pos if unwrapped is None else unwrapped
        self.ref_positions = np.array(ref, dtype=float)
        self.ref_box = box.copy()
        self.n_builds += 1
        return self.pairs

    def max_displacement(self, unwrapped, box):
        scale = np.asarray(box) / self.ref_box
        d = unwrapped - self.ref_positions * scale
        return float(np.sqrt((d * d).sum(axis=1).max())) if len(d) else 0.0

    def needs_rebuild(self, unwrapped, box):
        if self.ref_positions is None:
            return True
        s = float(np.min(np.asarray(box) / self.ref_box))
        margin = s * self.cutoff - self.r_cut
        if margin <= 0:
            return True
        return 2.0 * self.max_displacement(unwrapped, box) >= margin

    def __len__(self):
        return len(self.pairs[0])


def build_neighbor_list(state, r_cut, skin=0.2, backend=None):
    """Neighbour list for the current configuration of ``state``."""
    nl = NeighborList(state.topology, r_cut, skin, backend)
    nl.build(state.positions, state.box, state.unwrapped())
    return nl


class Simulation:
    """Integrator bound to one SystemState; ``state`` is advanced in place."""

    def __init__(self, state, ff, cfg, forcing=None, backend=None):
        self._setup(state, ff, cfg, forcing, backend)
        self.nlist.build(state.positions, state.box, state.unwrapped())
        self.forces, self.terms = self._compute_forces()

    def _restore(self, state, ff, cfg, forcing, backend, meta, arrays):
        """Re-attach to a checkpointed state without rebuilding the pair list."""
        self._setup(state, ff, cfg, forcing, backend, meta.get("Q"), meta.get("W"))
        nl = self.nlist
        nl.pairs = (arrays["pairs_i"].astype(np.int32), arrays["pairs_j"].astype(np.int32))
        nl.ref_positions = arrays["ref_positions"]
        nl.ref_box = arrays["ref_box"]
        nl.n_builds = meta["n_builds"]
        self.forces, self.terms = self._compute_forces()

    def _setup(self, state, ff, cfg, forcing, backend, Q=None, W=None):
        self.state = state
        self.ff = ff
        self.cfg = cfg
        self.forcing = forcing
        if forcing is not None and forcing.l_z is None:
            forcing.update_box(state.box)
        self.computer = ForceComputer(ff, state.topology, cap=cfg.cap_forces, backend=backend)
        self.nlist = NeighborList(state.topology, ff.r_cut, cfg.skin, backend,
                                  check=cfg.check_neighbors)
        m = state.masses
        self.inv_m = (1.0 / m)[:, None]
        self.g = state.degrees_of_freedom()
        self.kT = BOLTZMANN * cfg.temperature
        ens = cfg.ensemble
        self.thermostat_on = ens in ("NVT", "NpT") and _active(cfg.thermostat_tau)
        self.barostat_on = ens == "NpT" and _active(cfg.barostat_tau)
        g_thermo = self.g + 1 if self.barostat_on else self.g
        self.g_thermo = g_thermo
        if self.thermostat_on:
            self.Q = g_thermo * self.kT * (cfg.thermostat_tau / (2 * math.pi)) ** 2
        else:
            self.Q = math.inf
        if self.barostat_on:
            kappa = cfg.compressibility * KJ_MOL_NM3_TO_BAR  # nm^3 mol / kJ
            self.W = 3.0 * state.volume() * (cfg.barostat_tau / (2 * math.pi)) ** 2 / kappa
        else:
            self.W = math.inf
        if Q is not None:
            self.Q = Q
        if W is not None:
            self.W = W
        self.p_ext = cfg.pressure / KJ_MOL_NM3_TO_BAR

    # ------------------------------------------------------------ forces

    def _compute_forces(self):
        st = self.state
        try:
            forces, terms = self.computer.compute(st.positions, st.box, self.nlist.pairs)
        except OverlapError as exc:
            raise SimulationError(f"step {st.step}: {exc}") from None
        if self.forcing is not None and self.forcing.amplitude > 0:
            ext = st.masses[:, None] * apply_cosine_acceleration(st, self.forcing)
            # sum of cos(k z_i) is not exactly zero for finite N; without this the
            # centre of mass random-walks along x and offsets the whole profile
            ext -= st.masses[:, None] * (ext.sum(axis=0) / st.masses.sum())
            forces += ext
        return forces, terms

    def _refresh(self):
        st = self.state
        unwrapped = st.unwrapped()
        if self.nlist.needs_rebuild(unwrapped, st.box):
            self.nlist.build(st.positions, st.box, unwrapped)
        self.forces, self.terms = self._compute_forces()

    # ------------------------------------------------------------ observables

    def peculiar_velocities(self):
        """Velocities with the cosine streaming profile removed (if forced)."""
        st = self.state
        if self.forcing is None or self.forcing.amplitude == 0:
            return st.velocities
        u = st.velocities.copy()
        u[:, 0] -= streaming_profile(st.velocities, st.masses, st.positions[:, 2],
                                     self.forcing.k)
        return u

    def kinetic_energy(self, peculiar=False):
        v = self.peculiar_velocities() if peculiar else self.state.velocities
        return 0.5 * float((self.state.masses[:, None] * v * v).sum())

    def temperature(self):
        return 2.0 * self.kinetic_energy(peculiar=True) / (self.g * BOLTZMANN)

    def pressure(self):
        """Instantaneous virial pressure in bar."""
        k2 = 2.0 * self.kinetic_energy(peculiar=True)
        p = (k2 + self.terms.virial) / (3.0 * self.state.volume())
        return p * KJ_MOL_NM3_TO_BAR

    def potential_energy(self):
        return self.terms.potential

    def conserved_energy(self):
        """Total energy plus the extended-system terms (kJ/mol)."""
        st = self.state
        h = self.kinetic_energy() + self.terms.potential
        if self.thermostat_on:
            th = st.thermostat
            h += th.p_eta**2 / (2 * self.Q) + self.g_thermo * self.kT * th.eta
        if self.barostat_on:
            h += st.barostat.p_eps**2 / (2 * self.W) + self.p_ext * st.volume()
        return h

    def observables(self):
        st = self.state
        return {
            "potential": self.terms.potential,
            "kinetic": self.kinetic_energy(),
            "conserved": self.conserved_energy(),
            "temperature": self.temperature(),
            "pressure": self.pressure(),
            "volume": st.volume(),
            "density": st.density(),
        }

    # ------------------------------------------------------------ propagators

    def _thermostat_half(self, h):
        st = self.state
        th = st.thermostat
        forced = self.forcing is not None and self.forcing.amplitude > 0
        if forced:
            flow = streaming_profile(st.velocities, st.masses, st.positions[:, 2],
                                     self.forcing.k)
            st.velocities[:, 0] -= flow
        k2 = 2.0 * self.kinetic_energy()
        extra = st.barostat.p_eps**2 / self.W if self.barostat_on else 0.0
        gkt = self.g_thermo * self.kT
        th.p_eta += 0.5 * h * (k2 + extra - gkt)
        s = math.exp(-th.p_eta / self.Q * h)
        st.velocities *= s
        if self.barostat_on:
            st.barostat.p_eps *= s
            extra = st.barostat.p_eps**2 / self.W
        k2 *= s * s
        th.eta += th.p_eta / self.Q * h
        th.p_eta += 0.5 * h * (k2 + extra - gkt)
        if forced:
            st.velocities[:, 0] += flow

    def _barostat_half(self, h):
        st = self.state
        k2 = 2.0 * self.kinetic_energy()
        g_eps = (1.0 + 3.0 / self.g) * k2 + self.terms.virial - 3.0 * st.volume() * self.p_ext
        st.barostat.p_eps += h * g_eps

    def _kick(self, h):
        st = self.state
        if self.barostat_on:
            a = (1.0 + 3.0 / self.g) * st.barostat.p_eps / self.W
            s = math.exp(-0.5 * a * h)
            st.velocities *= s
            st.velocities += self.forces * self.inv_m * h
            st.velocities *= s
        else:
            st.velocities += self.forces * self.inv_m * h

    def _drift(self, dt):
        st = self.state
        if self.barostat_on:
            x = st.barostat.p_eps / self.W * dt
            grow = 3.0 * x
            if abs(math.expm1(grow)) > 0.01:
                raise SimulationError(
                    f"step {st.step}: volume change {math.expm1(grow):+.3%} exceeds 1% in one step"
                )
            half = 0.5 * x
            sinhc = 1.0 + half * half / 6.0 if abs(half) < 1e-4 else math.sinh(half) / half
            disp = st.velocities * (dt * math.exp(half) * sinhc)
            st.positions *= math.exp(x)
            st.box *= math.exp(x)
            if self.forcing is not None:
                self.forcing.update_box(st.box)
        else:
            disp = st.velocities * dt
        step_max = float(np.sqrt((disp * disp).sum(axis=1).max())) if len(disp) else 0.0
        if step_max > self.cfg.skin and self.cfg.skin > 0:
            raise SimulationError(
                f"step {st.step}: bead displacement {step_max:.4f} nm exceeds skin "
                f"{self.cfg.skin} nm in one step (blow-up)"
            )
        st.positions += disp
        st.wrap()

    def step(self, n=1):
        dt = self.cfg.dt
        h = 0.5 * dt
        st = self.state
        for _ in range(n):
            if self.thermostat_on:
                self._thermostat_half(h)
            if self.barostat_on:
                self._barostat_half(h)
            self._kick(h)
            self._drift(dt)
            self._refresh()
            self._kick(h)
            if self.barostat_on:
                self._barostat_half(h)
            if self.thermostat_on:
                self._thermostat_half(h)
            st.step += 1
            st.time += dt
            if not np.isfinite(st.velocities).all():
                raise SimulationError(f"step {st.step}: non-finite velocities")
        return st


def relax_overlaps(state, ff, max_steps=500, max_disp=0.01, ftol=1e3, backend=None, skin=0.2):
    """Steepest-descent removal of close contacts before dynamics.

    Moves every bead along its force, the largest move capped at ``max_disp``
    nm; the cap halves on an energy increase. Stops when the largest force is
    below ``ftol`` kJ/(mol nm). Velocities are untouched.
    """
    comp = ForceComputer(ff, state.topology, cap=True, backend=backend)
    nl = NeighborList(state.topology, ff.r_cut, skin, backend)
    nl.build(state.positions, state.box, state.unwrapped())
    forces, terms = comp.compute(state.positions, state.box, nl.pairs)
    energy = terms.potential
    step = max_disp
    for _ in range(max_steps):
        fmax = float(np.sqrt((forces**2).sum(axis=1).max()))
        if fmax < ftol:
            break
        old_pos, old_img = state.positions.copy(), state.images.copy()
        state.positions += forces * (step / fmax)
        state.wrap()
        unwrapped = state.unwrapped()
        if nl.needs_rebuild(unwrapped, state.box):
            nl.build(state.positions, state.box, unwrapped)
        new_forces, new_terms = comp.compute(state.positions, state.box, nl.pairs)
        if new_terms.potential < energy:
            forces, energy = new_forces, new_terms.potential
            step = min(step * 1.2, max_disp)
        else:
            state.positions, state.images = old_pos, old_img
            step *= 0.5
            if step < 1e-7:
                break
    return energy


# ---------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    """Sampled frames of one run.

    Positions are stored unwrapped; wrapped copies are derived on access.
    ``observables`` maps names to per-frame scalars (energies, T, P, ...).
    """

    topology: object
    times: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    unwrapped: list = field(default_factory=list)
    velocities: list = field(default_factory=list)
    observables: dict = field(default_factory=dict)
    sample_interval: float = 0.0
    metadata: dict = field(default_factory=dict)

    def append(self, state, obs=None):
        t = float(state.time)
        if self.times and t <= self.times[-1]:
            raise ValueError("trajectory times must increase strictly")
        if self.unwrapped and len(state.positions) != len(self.unwrapped[0]):
            raise ValueError("particle count changed within trajectory")
        self.times.append(t)
        self.boxes.append(state.box.copy())
        self.unwrapped.append(state.unwrapped())
        self.velocities.append(state.velocities.copy())
        for key, val in (obs or {}).items():
            self.observables.setdefault(key, []).append(val)

    def __len__(self):
        return len(self.times)

    @property
    def n_beads(self):
        return len(self.unwrapped[0]) if self.unwrapped else 0

    def time_array(self):
        return np.asarray(self.times, dtype=float)

    def box_array(self):
        return np.asarray(self.boxes, dtype=float).reshape(-1, 3)

    def unwrapped_array(self):
        return np.asarray(self.unwrapped, dtype=float).reshape(len(self), -1, 3)

    def velocity_array(self):
        return np.asarray(self.velocities, dtype=float).reshape(len(self), -1, 3)

    def wrapped(self, i):
        box = self.boxes[i]
        return self.unwrapped[i] - np.floor(self.unwrapped[i] / box) * box

    def observable(self, name):
        return np.asarray(self.observables[name], dtype=float)

    def masses(self):
        return self.topology.masses

    def window(self, t_start=None, t_stop=None):
        """Frame indices with t_start <= t <= t_stop."""
        t = self.time_array()
        lo = -np.inf if t_start is None else t_start
        hi = np.inf if t_stop is None else t_stop
        idx = np.flatnonzero((t >= lo - 1e-9) & (t <= hi + 1e-9))
        return idx


def _steps_for(duration, dt, what):
    n = duration / dt
    steps = int(round(n))
    if abs(n - steps) > 1e-6 * max(1.0, n):
        raise ConfigurationError(f"{what} {duration} ps is not a multiple of dt = {dt} ps")
    return steps


def run(state, ff, cfg, duration, sample_interval, forcing=None, checkpoint_every=None,
        checkpoint_path=None, backend=None, sim=None, trajectory=None, metadata=None):
    """Advance ``state`` for ``duration`` ps, sampling every ``sample_interval`` ps.

    The initial frame is always recorded (unless continuing an existing
    trajectory). A checkpoint is written every ``checkpoint_every`` steps when
    a path is given. Step errors are re-raised with the frame index.
    """
    if duration < 0:
        raise ConfigurationError("duration must be >= 0")
    sim = sim or Simulation(state, ff, cfg, forcing=forcing, backend=backend)
    n_steps = _steps_for(duration, cfg.dt, "duration")
    stride = max(1, _steps_for(sample_interval, cfg.dt, "sample interval")) if duration else 1
    if trajectory is None:
        meta = {
            "config": cfg.as_dict(),
            "forcefield": ff.name,
            "seed": cfg.seed,
            "backend": sim.computer.kernels.__name__.rsplit(".", 1)[-1],
            "profile_corrected_thermostat": bool(forcing is not None and forcing.amplitude > 0),
        }
        if forcing is not None:
            meta["forcing_amplitude_nm_ps2"] = forcing.amplitude
        meta.update(metadata or {})
        trajectory = Trajectory(state.topology, sample_interval=sample_interval, metadata=meta)
        trajectory.append(state, sim.observables())
    done = 0
    while done < n_steps:
        chunk = min(stride - state.step % stride if state.step % stride else stride,
                    n_steps - done)
        if checkpoint_every:
            to_ckpt = checkpoint_every - state.step % checkpoint_every
            chunk = min(chunk, to_ckpt)
        try:
            sim.step(chunk)
        except SimulationError as exc:
            raise SimulationError(f"{exc} (after frame {len(trajectory) - 1})") from None
        done += chunk
        if state.step % stride == 0:
            trajectory.append(state, sim.observables())
        if checkpoint_every and checkpoint_path and state.step % checkpoint_every == 0:
            from .trajio import save_checkpoint

            save_checkpoint(checkpoint_path, sim, trajectory)
    return trajectory


def step_nve(state, ff, dt, backend=None):
    """One velocity-Verlet step (convenience; loops should reuse a Simulation)."""
    cfg = IntegratorConfig(ensemble="NVE", dt=dt, temperature=1.0, skin=0.2)
    Simulation(state, ff, cfg, backend=backend).step()
    return state


def step_nvt(state, ff, cfg, backend=None):
    if cfg.ensemble != "NVT":
        raise ConfigurationError("step_nvt needs an NVT config")
    Simulation(state, ff, cfg, backend=backend).step()
    return state


def step_npt(state, ff, cfg, backend=None):
    if cfg.ensemble != "NpT":
        raise ConfigurationError("step_npt needs an NpT config")
    Simulation(state, ff, cfg, backend=backend).step()
    return state
