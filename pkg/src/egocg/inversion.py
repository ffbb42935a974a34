"""Bonded CG potentials from atomistic trajectories.

Pipeline: map atoms to beads, histogram bond lengths and angles, divide out
the L^2 / sin(theta) Jacobians, take -kT ln P, and fit a sum of Gaussians to
P. Also provides exact samplers for a given mixture potential and the
synthetic TEGDE trajectory generator used as the bundled fixture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .core import BOLTZMANN, minimum_image_displacement
from .potentials import MixturePotentialParams

DEFAULT_BIN = {"bond": 0.005, "angle": 1.0}
DEFAULT_RANGE = {"bond": (0.0, 1.0), "angle": (0.0, 180.0)}
_SQRT_HALF_PI = math.sqrt(math.pi / 2.0)


class InversionError(ValueError):
    pass


class FitError(RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


# ---------------------------------------------------------------- mapping


class CgMapping:
    """Atom groups (index, weight) defining each CG bead.

    An atom may appear in several groups; its weights must then sum to 1.
    """

    def __init__(self, groups, names=None, bonds=(), angles=(), atom_masses=None,
                 atom_names=None, n_atoms=None):
        self.groups = [[(int(a), float(w)) for a, w in g] for g in groups]
        self.names = list(names) if names else [f"B{i}" for i in range(len(self.groups))]
        self.bonds = [tuple(b) for b in bonds]
        self.angles = [tuple(a) for a in angles]
        self.atom_masses = dict(atom_masses or {})
        self.atom_names = dict(atom_names or {})
        self.n_atoms = n_atoms
        self.validate()

    def validate(self):
        if not self.groups:
            raise InversionError("mapping has no beads")
        if len(self.names) != len(self.groups):
            raise InversionError("one name per bead required")
        total = {}
        for b, g in enumerate(self.groups):
            if not g:
                raise InversionError(f"bead {b} ({self.names[b]}) has an empty atom group")
            for a, w in g:
                if a < 0:
                    raise InversionError(f"negative atom index {a}")
                if not w > 0:
                    raise InversionError(f"bead {b}: weight of atom {a} must be > 0")
                total[a] = total.get(a, 0.0) + w
        for a, w in total.items():
            if sum(1 for g in self.groups for x, _ in g if x == a) > 1 and abs(w - 1.0) > 1e-9:
                raise InversionError(f"weights of shared atom {a} sum to {w}, not 1")
        n = self.n_atoms or max(max(total) + 1, len(self.atom_masses))
        missing = sorted(set(range(n)) - set(total))
        if missing:
            raise InversionError(f"atoms {missing} are not referenced by any bead")
        self.n_atoms = n
        nb = len(self.groups)
        for b in self.bonds:
            if len(b) != 2 or not all(0 <= i < nb for i in b):
                raise InversionError(f"bond {b} references a missing bead")
        for a in self.angles:
            if len(a) != 3 or not all(0 <= i < nb for i in a):
                raise InversionError(f"angle {a} references a missing bead")

    def weight_matrix(self, masses):
        """(n_beads, n_atoms) matrix of w*m normalised per row."""
        masses = np.asarray(masses, dtype=float)
        W = np.zeros((len(self.groups), len(masses)))
        for b, g in enumerate(self.groups):
            for a, w in g:
                if a >= len(masses):
                    raise InversionError(f"atom index {a} out of range ({len(masses)} atoms)")
                W[b, a] += w * masses[a]
        return W / W.sum(axis=1, keepdims=True)

    def masses_array(self):
        if not self.atom_masses:
            raise InversionError("mapping carries no atom masses")
        return np.array([self.atom_masses[i] for i in range(self.n_atoms)])

    def __eq__(self, other):
        return isinstance(other, CgMapping) and (
            self.groups, self.names, self.bonds, self.angles, self.atom_masses, self.atom_names
        ) == (other.groups, other.names, other.bonds, other.angles, other.atom_masses,
              other.atom_names)


def map_frame(positions, masses, mapping):
    """Bead positions sum(w m r)/sum(w m) for one frame or a stack of frames."""
    W = mapping.weight_matrix(masses)
    return np.einsum("ba,...ak->...bk", W, np.asarray(positions, dtype=float))


# ---------------------------------------------------------------- observables


def bond_lengths(frames, bonds, box=None):
    """Bond lengths (nm), shape (F, n_bonds); min-image when ``box`` is given."""
    frames = np.asarray(frames, dtype=float)
    if frames.ndim == 2:
        frames = frames[None]
    b = np.asarray(bonds, dtype=int).reshape(-1, 2)
    d = frames[:, b[:, 0]] - frames[:, b[:, 1]]
    if box is not None:
        d = minimum_image_displacement(d, 0.0, box)
    return np.linalg.norm(d, axis=-1)


def bond_angles(frames, angles, box=None):
    """Angles (degrees) at the middle bead, shape (F, n_angles)."""
    frames = np.asarray(frames, dtype=float)
    if frames.ndim == 2:
        frames = frames[None]
    t = np.asarray(angles, dtype=int).reshape(-1, 3)
    a = frames[:, t[:, 0]] - frames[:, t[:, 1]]
    b = frames[:, t[:, 2]] - frames[:, t[:, 1]]
    if box is not None:
        a = minimum_image_displacement(a, 0.0, box)
        b = minimum_image_displacement(b, 0.0, box)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = (a * b).sum(axis=-1)
    return np.degrees(np.arctan2(cross, dot))


# ---------------------------------------------------------------- histograms


@dataclass
class HistogramSet:
    kind: str
    edges: np.ndarray
    counts: np.ndarray
    underflow: int = 0
    overflow: int = 0
    P: np.ndarray = None

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def widths(self):
        return np.diff(self.edges)

    @property
    def total(self):
        return int(self.counts.sum()) + self.underflow + self.overflow


def default_edges(kind, bin_width=None, value_range=None):
    w = DEFAULT_BIN[kind] if bin_width is None else bin_width
    lo, hi = DEFAULT_RANGE[kind] if value_range is None else value_range
    n = int(round((hi - lo) / w))
    return lo + w * np.arange(n + 1)


def histogram_values(values, kind, edges=None):
    """Raw counts of ``values``; out-of-range values go to under/overflow."""
    if kind not in DEFAULT_BIN:
        raise InversionError(f"kind must be 'bond' or 'angle', got {kind!r}")
    v = np.asarray(values, dtype=float).ravel()
    e = default_edges(kind) if edges is None else np.asarray(edges, dtype=float)
    counts, _ = np.histogram(v, bins=e)
    # np.histogram includes the right edge in the last bin
    under = int((v < e[0]).sum())
    over = int((v > e[-1]).sum())
    return HistogramSet(kind, e, counts.astype(float), under, over)


def histogram(cg_frames, kind, instances, edges=None, box=None):
    """Histogram of one observable over all frames and instances."""
    if len(instances) == 0:
        raise InversionError(f"no {kind} instances to histogram")
    if kind == "bond":
        vals = bond_lengths(cg_frames, instances, box)
    elif kind == "angle":
        vals = bond_angles(cg_frames, instances, box)
    else:
        raise InversionError(f"kind must be 'bond' or 'angle', got {kind!r}")
    return histogram_values(vals, kind, edges)


def jacobian(kind, q):
    if kind == "bond":
        return q * q
    return np.sin(np.radians(q))


def renormalize(h):
    """P proportional to H/L^2 (bonds) or H/sin(theta) (angles), unit integral."""
    c = h.centers
    jac = jacobian(h.kind, c)
    occupied = h.counts > 0
    bad = occupied & (np.abs(jac) < 1e-12)
    if bad.any():
        raise InversionError(f"occupied {h.kind} bin at {c[bad][0]} where the Jacobian vanishes")
    raw = np.where(occupied, h.counts / np.where(occupied, jac, 1.0), 0.0)
    norm = float((raw * h.widths).sum())
    if norm <= 0:
        raise InversionError("histogram is empty")
    return HistogramSet(h.kind, h.edges, h.counts, h.underflow, h.overflow, raw / norm)


def denormalize(h):
    """Inverse map of renormalize up to a constant: P * Jacobian."""
    return h.P * jacobian(h.kind, h.centers)


@dataclass
class TabulatedPotential:
    kind: str
    q: np.ndarray
    U: np.ndarray  # nan where the bin is empty
    temperature: float

    @property
    def mask(self):
        return np.isfinite(self.U)


def boltzmann_invert(h, temperature):
    """U = -kT ln P at occupied bin centres, shifted so min U = 0."""
    if h.P is None:
        raise InversionError("histogram not renormalized")
    occ = h.P > 0
    if occ.sum() < 5:
        raise InversionError(f"only {int(occ.sum())} occupied bins; need at least 5 to fit")
    kT = BOLTZMANN * temperature
    U = np.full(len(h.P), np.nan)
    U[occ] = -kT * np.log(h.P[occ])
    U -= np.nanmin(U)
    return TabulatedPotential(h.kind, h.centers.copy(), U, temperature)


# ---------------------------------------------------------------- mixture fit


def mixture_density(q, A, mu, xi):
    """sum_l A_l/(xi_l sqrt(pi/2)) exp(-(q-mu_l)^2 / (2 xi_l^2))."""
    q = np.asarray(q, dtype=float)[..., None]
    A, mu, xi = (np.asarray(x, dtype=float) for x in (A, mu, xi))
    return (A / (xi * _SQRT_HALF_PI) * np.exp(-0.5 * ((q - mu) / xi) ** 2)).sum(axis=-1)


@dataclass
class MixtureFit:
    params: MixturePotentialParams
    residual_norm: float
    rms: float
    success: bool
    n_starts: int
    start_residuals: list = field(default_factory=list)


def _weighted_quantiles(x, w, qs):
    c = np.cumsum(w)
    c = c / c[-1]
    return np.interp(qs, c, x)


def initial_guesses(q, P, m, n_restarts=8, seed=0):
    """Quantile-placed centres plus ``n_restarts`` jittered copies."""
    w = P * np.gradient(q) if len(q) > 1 else P
    mean = float((w * q).sum() / w.sum())
    sd = float(np.sqrt((w * (q - mean) ** 2).sum() / w.sum())) or float(np.ptp(q)) or 1.0
    if m == 1:
        qs = np.array([0.5])
    elif m == 3:
        qs = np.array([0.25, 0.5, 0.75])
    else:
        qs = (np.arange(m) + 1.0) / (m + 1.0)
    mu0 = _weighted_quantiles(q, w, qs)
    xi0 = np.full(m, sd / math.sqrt(m))
    area = float(w.sum())
    # sum of A_l integrates to 2 * sum(A_l)
    A0 = np.full(m, 0.5 * area / m)
    guesses = [(A0, mu0, xi0)]
    rng = np.random.default_rng(seed)
    for _ in range(n_restarts):
        mu = mu0 + rng.normal(0.0, 0.5 * sd, m)
        xi = xi0 * np.exp(rng.normal(0.0, 0.4, m))
        A = A0 * np.exp(rng.normal(0.0, 0.4, m))
        guesses.append((A, mu, xi))
    return guesses


def fit_mixture(q, P, m=3, kind="bond", temperature=293.0, n_restarts=8, seed=0):
    """Least-squares Gaussian-mixture fit to probability values P(q).

    Parameters are optimised as (log A, mu, log xi) from multiple starts; the
    lowest residual wins and components are returned sorted by descending A.
    Bins outside the occupied range are ignored, empty interior bins count as
    zeros.
    """
    if m < 1:
        raise InversionError("m must be >= 1")
    q = np.asarray(q, dtype=float)
    P = np.asarray(P, dtype=float)
    occ = np.flatnonzero(P > 0)
    if occ.size < max(5, 3 * m):
        raise InversionError(f"too few occupied points ({occ.size}) for m = {m}")
    sl = slice(occ[0], occ[-1] + 1)
    x, y = q[sl], P[sl]

    def unpack(p):
        return np.exp(p[:m]), p[m:2 * m], np.exp(p[2 * m:])

    def resid(p):
        return mixture_density(x, *unpack(p)) - y

    # widths no finer than a bin, areas no larger than ten times the data
    dq = float(np.min(np.diff(q))) if len(q) > 1 else 1e-6
    area = float((y * np.gradient(x)).sum())
    span = float(x[-1] - x[0]) or 1.0
    lower = np.concatenate([np.full(m, math.log(1e-12 * area)), np.full(m, x[0] - span),
                            np.full(m, math.log(dq))])
    upper = np.concatenate([np.full(m, math.log(10.0 * area)), np.full(m, x[-1] + span),
                            np.full(m, math.log(4.0 * span))])

    best = None
    start_res = []
    for A0, mu0, xi0 in initial_guesses(x, y, m, n_restarts, seed):
        p0 = np.concatenate([np.log(A0), mu0, np.log(xi0)])
        p0 = np.clip(p0, lower + 1e-9 * (upper - lower), upper - 1e-9 * (upper - lower))
        try:
            r = least_squares(resid, p0, method="trf", bounds=(lower, upper), xtol=1e-12,
                              ftol=1e-12, gtol=1e-12, max_nfev=4000 * (3 * m + 1))
        except (ValueError, FloatingPointError):
            start_res.append(float("inf"))
            continue
        norm = float(np.linalg.norm(r.fun))
        start_res.append(norm)
        if np.all(np.isfinite(r.x)) and (best is None or norm < best[0]):
            best = (norm, r)
    if best is None:
        raise FitError("mixture fit failed from every start")
    norm, r = best
    A, mu, xi = unpack(r.x)
    params = MixturePotentialParams(kind, A, mu, xi, temperature).sorted_by_area()
    fit = MixtureFit(params, norm, norm / math.sqrt(len(x)), bool(r.status > 0),
                     len(start_res), start_res)
    if not fit.success:
        raise FitError("mixture fit did not converge from any start", fit)
    return fit


def fit_histogram(h, m=3, temperature=293.0, n_restarts=8, seed=0):
    """renormalize + fit in one call; returns a MixtureFit."""
    if h.P is None:
        h = renormalize(h)
    return fit_mixture(h.centers, h.P, m, h.kind, temperature, n_restarts, seed)


# ---------------------------------------------------------------- sampling / comparison


def _sampling_grid(p, n=20001):
    lo, hi = p.domain
    pad = 0.0 if p.kind == "angle" else 2.0 * max(p.xi)
    lo = max(lo - pad, 1e-6) if p.kind == "bond" else 0.0
    hi = hi + pad if p.kind == "bond" else 180.0
    q = np.linspace(lo, hi, n)
    u, _ = p.evaluate(q)
    dens = jacobian(p.kind, q) * np.exp(-(u - np.min(u)) / p.kT)
    return q, dens


def sample_observable(p, n, rng):
    """Draw n values of L or theta from jac(Q) exp(-U(Q)/kT) by inverse CDF."""
    q, dens = _sampling_grid(p)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(q))])
    cdf /= cdf[-1]
    return np.interp(rng.random(n), cdf, q)


def central_interval(p, mass=0.8):
    """Interval holding the central ``mass`` of the sampled observable distribution."""
    q, dens = _sampling_grid(p)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(q))])
    cdf /= cdf[-1]
    tail = 0.5 * (1.0 - mass)
    return float(np.interp(tail, cdf, q)), float(np.interp(1.0 - tail, cdf, q))


def potential_rms_difference(p_fit, p_ref, mass=0.8, n=2001):
    """RMS of U_fit - U_ref (kT units) over the central interval of p_ref,
    after removing the best constant offset."""
    lo, hi = central_interval(p_ref, mass)
    q = np.linspace(lo, hi, n)
    d = (p_fit.evaluate(q)[0] - p_ref.evaluate(q)[0]) / p_ref.kT
    d -= d.mean()
    return float(np.sqrt(np.mean(d * d)))


def invert_samples(values, kind, temperature=293.0, m=3, edges=None, seed=0):
    """histogram -> renormalize -> fit for a flat array of observable values."""
    h = renormalize(histogram_values(values, kind, edges))
    return fit_mixture(h.centers, h.P, m, kind, temperature, seed=seed), h


# ---------------------------------------------------------------- synthetic TEGDE

# united-atom heavy atoms of CH3-O-(CH2-CH2-O)3-CH3
TEGDE_ATOMS = ["C", "O", "C", "C", "O", "C", "C", "O", "C", "C", "O", "C"]
TEGDE_MASSES = [15.035, 15.999, 14.027, 14.027, 15.999, 14.027, 14.027, 15.999,
                14.027, 14.027, 15.999, 15.035]


def tegde_mapping():
    """Three PB beads; the two inner ether oxygens are split 0.5/0.5."""
    groups = [
        [(0, 1.0), (1, 1.0), (2, 1.0), (3, 1.0), (4, 0.5)],
        [(4, 0.5), (5, 1.0), (6, 1.0), (7, 0.5)],
        [(7, 0.5), (8, 1.0), (9, 1.0), (10, 1.0), (11, 1.0)],
    ]
    return CgMapping(groups, names=["PB1", "PB2", "PB3"], bonds=[(0, 1), (1, 2)],
                     angles=[(0, 1, 2)],
                     atom_masses=dict(enumerate(TEGDE_MASSES)),
                     atom_names=dict(enumerate(TEGDE_ATOMS)))


def _random_rotations(n, rng):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], 1)


def synthetic_tegde(n_frames, bond, angle, seed=0, mapping=None):
    """Gas-phase TEGDE frames whose mapped beads follow the given potentials.

    Bead geometry (two bonds, one angle) is drawn independently from the
    potentials; atoms are laid out around the beads with random offsets and
    then projected so that mapping them returns the drawn beads exactly.
    Returns (positions[F, 12, 3] in nm, masses, mapping, beads[F, 3, 3]).
    """
    rng = np.random.default_rng(seed)
    mapping = mapping or tegde_mapping()
    masses = mapping.masses_array()
    l1 = sample_observable(bond, n_frames, rng)
    l2 = sample_observable(bond, n_frames, rng)
    th = np.radians(sample_observable(angle, n_frames, rng))
    beads = np.zeros((n_frames, 3, 3))
    beads[:, 0, 0] = l1
    beads[:, 2, 0] = l2 * np.cos(th)
    beads[:, 2, 1] = l2 * np.sin(th)
    rot = _random_rotations(n_frames, rng)
    beads = np.einsum("fij,fbj->fbi", rot, beads) + rng.uniform(-1.0, 1.0, (n_frames, 1, 3))

    W = mapping.weight_matrix(masses)
    Wp = np.linalg.pinv(W)
    # each atom starts near the bead that holds most of its weight
    home = np.argmax(W, axis=0)
    atoms = beads[:, home] + rng.normal(0.0, 0.08, (n_frames, len(masses), 3))
    atoms += np.einsum("ab,fbk->fak", Wp, beads - np.einsum("ba,fak->fbk", W, atoms))
    return atoms, masses, mapping, beads
