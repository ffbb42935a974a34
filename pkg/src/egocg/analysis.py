"""Trajectory analysis and the CG/atomistic scaling relations.

Units: trajectories are in nm and ps. Diffusion coefficients are reported in
m^2/s, viscosities in mPa s, densities in g/cm^3. Error bars use 5
contiguous blocks throughout.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import (
    AMU_PER_NM3_TO_G_PER_CM3,
    AMU_PER_NM_PS_TO_MPA_S,
    NM2_PER_PS_TO_M2_PER_S,
    ConfigurationError,
    molecule_centers_of_mass,
)
from .formats import atomic_write, dump_yaml

N_BLOCKS = 5


class AnalysisError(ValueError):
    pass


def block_average(values, n_blocks=N_BLOCKS):
    """Mean and standard error from ``n_blocks`` contiguous block means."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise AnalysisError("no samples")
    mean = float(x.mean())
    if x.size < n_blocks:
        return mean, float("nan")
    blocks = np.array([b.mean() for b in np.array_split(x, n_blocks)])
    return mean, float(blocks.std(ddof=1) / math.sqrt(n_blocks))


def _window_indices(traj, window):
    t = traj.time_array()
    if window is None:
        return np.arange(len(t))
    t0, t1 = window
    t0 = t[0] if t0 is None else t0
    t1 = t[-1] if t1 is None else t1
    if t0 > t[-1] + 1e-9 or t1 < t[0] - 1e-9 or t1 < t0:
        raise AnalysisError(f"window ({t0}, {t1}) ps lies outside trajectory "
                            f"[{t[0]}, {t[-1]}] ps")
    idx = np.flatnonzero((t >= t0 - 1e-9) & (t <= t1 + 1e-9))
    if idx.size == 0:
        raise AnalysisError(f"no frames in window ({t0}, {t1}) ps")
    return idx


def frame_densities(traj):
    """Per-frame mass density (g/cm^3)."""
    mass = float(traj.masses().sum())
    vol = np.prod(traj.box_array(), axis=1)
    return mass / vol * AMU_PER_NM3_TO_G_PER_CM3


def density(traj, window=None):
    """(mean, standard error) of the density over a time window in ps."""
    idx = _window_indices(traj, window)
    rho = frame_densities(traj)[idx]
    if np.ptp(rho) == 0.0:
        return float(rho[0]), 0.0
    return block_average(rho)


# ---------------------------------------------------------------- diffusion


@dataclass
class MsdCurve:
    lags: np.ndarray  # ps
    msd: np.ndarray  # nm^2
    species: str
    n_origins: np.ndarray


def msd(traj, species, max_lag=None, origin_stride=None):
    """Centre-of-mass MSD of one species, averaged over molecules and time origins.

    ``origin_stride`` defaults to 10 frame intervals; ``max_lag`` to half the
    trajectory length. Both in ps.
    """
    exp = traj.topology
    try:
        mols = exp.molecules_of(species)
    except KeyError:
        raise AnalysisError(f"species {species!r} absent from trajectory") from None
    t = traj.time_array()
    if len(t) < 2:
        raise AnalysisError("need at least two frames")
    dt = float(np.median(np.diff(t)))
    stride = max(1, int(round((origin_stride if origin_stride else 10 * dt) / dt)))
    span = t[-1] - t[0]
    max_lag = 0.5 * span if max_lag is None else min(max_lag, span)
    n_lag = int(round(max_lag / dt))
    com = np.array([molecule_centers_of_mass(exp, traj.unwrapped[i])[mols]
                    for i in range(len(t))])
    lags = np.arange(n_lag + 1)
    out = np.zeros(n_lag + 1)
    counts = np.zeros(n_lag + 1, dtype=int)
    origins = np.arange(0, len(t), stride)
    for lag in lags[1:]:
        o = origins[origins + lag < len(t)]
        if o.size == 0:
            break
        d = com[o + lag] - com[o]
        out[lag] = float((d * d).sum(axis=2).mean())
        counts[lag] = o.size
    counts[0] = origins.size
    keep = counts > 0
    return MsdCurve(lags[keep] * dt, out[keep], species, counts[keep])


@dataclass
class DiffusionResult:
    D: float  # m^2/s
    slope: float  # nm^2/ps
    intercept: float
    r_squared: float
    window: tuple
    warning: str = ""

    @property
    def D_nm2_ps(self):
        return self.slope / 6.0


def linear_fit(x, y):
    res = stats.linregress(x, y)
    return float(res.slope), float(res.intercept), float(res.rvalue**2)


def diffusion_from_msd(curve, fit_window=(1000.0, None)):
    """D = slope/6 of a linear fit over ``fit_window`` (ps), in m^2/s.

    A fit with R^2 < 0.9 carries a warning, as does a window whose log-log
    MSD exponent is outside 1 +/- 0.3 (ballistic or strongly sub-diffusive).
    """
    lo, hi = fit_window
    hi = curve.lags[-1] if hi is None else hi
    sel = (curve.lags >= lo - 1e-9) & (curve.lags <= hi + 1e-9)
    if sel.sum() < 3:
        raise AnalysisError(f"fit window ({lo}, {hi}) ps holds fewer than 3 MSD points "
                            f"(curve spans {curve.lags[0]}-{curve.lags[-1]} ps)")
    slope, icpt, r2 = linear_fit(curve.lags[sel], curve.msd[sel])
    warning = ""
    if not r2 >= 0.9:
        warning = f"poor linear fit (R^2 = {r2:.3f} < 0.9)"
    x, y = curve.lags[sel], curve.msd[sel]
    pos = (x > 0) & (y > 0)
    if pos.sum() >= 2:
        alpha = linear_fit(np.log(x[pos]), np.log(y[pos]))[0]
        if abs(alpha - 1.0) > 0.3:
            warning = (warning + "; " if warning else "") + \
                f"non-diffusive scaling (MSD ~ t^{alpha:.2f})"
    return DiffusionResult(slope / 6.0 * NM2_PER_PS_TO_M2_PER_S, slope, icpt, r2,
                           (float(lo), float(hi)), warning)


# ---------------------------------------------------------------- scaling relations


@dataclass(frozen=True)
class ScalingParams:
    S: float
    n: int = 1

    def __post_init__(self):
        if not self.S > 0:
            raise ConfigurationError("S must be positive")
        if int(self.n) != self.n or self.n < 1:
            raise ConfigurationError("n must be an integer >= 1")

    @property
    def diffusivity_factor(self):
        return self.n ** (1.0 / 3.0)


def compute_time_mapping(D_cg_water, D_exp_water, n=3):
    """Time-mapping factor S = n^(1/3) D_cg / D_exp (water beads hold n = 3)."""
    if not (D_cg_water > 0 and D_exp_water > 0):
        raise ConfigurationError("diffusion coefficients must be positive")
    return n ** (1.0 / 3.0) * D_cg_water / D_exp_water


def scale_diffusion(D_cg, sp):
    """Atomistic-time diffusion coefficient S^-1 n^(1/3) D_cg."""
    return D_cg * sp.diffusivity_factor / sp.S


def scale_viscosity(eta_cg, S):
    if not (eta_cg > 0 and S > 0):
        raise ConfigurationError("viscosity and S must be positive")
    return S * eta_cg


# ---------------------------------------------------------------- NEMD viscosity


@dataclass
class ViscosityResult:
    eta: float  # mPa s
    stderr: float
    inv_eta_mean: float  # nm ps / amu
    n_frames: int
    series: np.ndarray = field(repr=False, default=None)


def inverse_viscosity_series(traj, forcing, frames=None):
    """Per-frame 1/eta (nm ps/amu) from the cosine velocity response."""
    if forcing.amplitude == 0:
        raise AnalysisError("forcing amplitude is zero; estimator undefined")
    m = traj.masses()
    mass = float(m.sum())
    idx = range(len(traj)) if frames is None else frames
    out = []
    for i in idx:
        box = traj.boxes[i]
        k = 2.0 * math.pi / box[2]
        rho = mass / float(np.prod(box))  # amu/nm^3
        z = traj.wrapped(i)[:, 2]
        vx = traj.velocities[i][:, 0]
        amp = float((m * vx * np.cos(k * z)).sum() / mass)
        out.append(2.0 * k * k / (rho * forcing.amplitude) * amp)
    return np.asarray(out)


def viscosity_from_nemd(traj, forcing, discard=5000.0):
    """Shear viscosity eta = 1/<eta^-1> in mPa s with a 5-block error.

    The first ``discard`` ps are dropped.
    """
    if forcing.amplitude == 0:
        raise AnalysisError("forcing amplitude is zero; estimator undefined")
    t = traj.time_array()
    frames = np.flatnonzero(t >= t[0] + discard - 1e-9)
    if frames.size == 0:
        raise AnalysisError(f"discard {discard} ps leaves no frames")
    series = inverse_viscosity_series(traj, forcing, frames)
    mean, se = block_average(series)
    if not mean > 0:
        raise AnalysisError("mean inverse viscosity is not positive; signal below noise")
    eta = 1.0 / mean * AMU_PER_NM_PS_TO_MPA_S
    err = se / mean**2 * AMU_PER_NM_PS_TO_MPA_S if np.isfinite(se) else float("nan")
    return ViscosityResult(eta, err, mean, int(frames.size), series)


def velocity_profile(traj, n_bins=20, discard=0.0):
    """Slab-averaged v_x(z) and the fitted amplitude V of V cos(kz).

    Returns (z centres, mean v_x, V, residual RMS / |V|).
    """
    t = traj.time_array()
    frames = np.flatnonzero(t >= t[0] + discard - 1e-9)
    sums = np.zeros(n_bins)
    counts = np.zeros(n_bins)
    for i in frames:
        lz = traj.boxes[i][2]
        z = traj.wrapped(i)[:, 2] / lz
        b = np.minimum((z * n_bins).astype(int), n_bins - 1)
        sums += np.bincount(b, traj.velocities[i][:, 0], n_bins)
        counts += np.bincount(b, minlength=n_bins)
    centres = (np.arange(n_bins) + 0.5) / n_bins
    vx = sums / np.maximum(counts, 1)
    c = np.cos(2 * math.pi * centres)
    amp = float((vx * c).sum() / (c * c).sum())
    resid = vx - amp * c
    rel = float(np.sqrt(np.mean(resid**2)) / abs(amp)) if amp else float("inf")
    return centres * float(np.mean(traj.box_array()[frames, 2])), vx, amp, rel


@dataclass
class ShearRateResult:
    sh_max: float  # 1/ps
    A_max: float  # nm/ps^2 at which sh_max reaches 1/tau
    verdict: str  # PASS | WARN | "" (no tau given)


def max_shear_rate(A, rho, eta_cg, l_z, tau_longest=None):
    """Largest shear rate sh = A (rho/eta) l_z / (2 pi) of the cosine flow.

    ``A`` in nm/ps^2, ``rho`` in kg/m^3, ``eta_cg`` in kg/(m s), ``l_z`` in nm.
    rho/eta is converted to ps/nm^2 so sh_max comes out in 1/ps. The verdict
    is PASS when sh_max < 1/tau_longest (tau in ps), else WARN.
    """
    if A < 0 or not (rho > 0 and eta_cg > 0 and l_z > 0):
        raise ConfigurationError("A >= 0 and rho, eta, l_z > 0 required")
    ratio = rho / eta_cg * 1e-6  # s/m^2 -> ps/nm^2
    coeff = ratio * l_z / (2.0 * math.pi)
    sh = A * coeff
    verdict = ""
    a_max = float("inf")
    if tau_longest is not None:
        a_max = 1.0 / (tau_longest * coeff)
        verdict = "PASS" if sh < 1.0 / tau_longest else "WARN"
    return ShearRateResult(sh, a_max, verdict)


# ---------------------------------------------------------------- end-to-end relaxation


@dataclass
class RelaxationResult:
    tau: float  # ps
    lags: np.ndarray
    C: np.ndarray
    fit_range: tuple


def end_to_end_vectors(traj, species):
    exp = traj.topology
    try:
        mols = exp.molecules_of(species)
    except KeyError:
        raise AnalysisError(f"species {species!r} absent from trajectory") from None
    first = exp.mol_start[mols]
    last = exp.mol_start[mols + 1] - 1
    if np.any(last <= first):
        raise AnalysisError(f"species {species!r} needs at least two beads")
    u = np.array([traj.unwrapped[i][last] - traj.unwrapped[i][first] for i in range(len(traj))])
    return u / np.linalg.norm(u, axis=2, keepdims=True)


def autocorrelation_unit(u, dt, max_lag=None, origin_stride=1):
    """C(lag) = <u(t0).u(t0+lag)> for unit vectors u[frame, molecule, 3]."""
    n = len(u)
    n_lag = n - 1 if max_lag is None else min(n - 1, int(round(max_lag / dt)))
    origins = np.arange(0, n, max(1, origin_stride))
    C = np.ones(n_lag + 1)
    for lag in range(1, n_lag + 1):
        o = origins[origins + lag < n]
        C[lag] = float((u[o] * u[o + lag]).sum(axis=2).mean())
    return np.arange(n_lag + 1) * dt, C


def fit_relaxation(lags, C, upper=0.8, lower=0.1):
    """Single-exponential tau from ln C over the first stretch with lower <= C <= upper."""
    if not np.any(C < 0.5):
        raise AnalysisError("C(t) never drops below 0.5; trajectory too short")
    start = int(np.argmax(C <= upper))
    below = np.flatnonzero(C[start:] < lower)
    stop = start + (int(below[0]) if below.size else len(C) - start)
    sel = slice(start, stop)
    x, y = lags[sel], C[sel]
    ok = y > 0
    if ok.sum() < 2:
        raise AnalysisError("fewer than two points inside the fit range")
    slope, _, _ = linear_fit(x[ok], np.log(y[ok]))
    if not slope < 0:
        raise AnalysisError("C(t) does not decay inside the fit range")
    return -1.0 / slope, (float(x[0]), float(x[-1]))


def end_to_end_relaxation(traj, species, max_lag=None, origin_stride=1):
    """Rotational relaxation time (ps) of the end-to-end unit vector."""
    u = end_to_end_vectors(traj, species)
    t = traj.time_array()
    dt = float(np.median(np.diff(t)))
    lags, C = autocorrelation_unit(u, dt, max_lag, origin_stride)
    tau, rng = fit_relaxation(lags, C)
    return RelaxationResult(tau, lags, C, rng)


# ---------------------------------------------------------------- NMR correction


@dataclass
class NmrResult:
    D_w: float
    form: str
    valid: bool

    @property
    def flag(self):
        return "" if self.valid else "INVALID"


def water_diffusion_from_nmr(D_OH, D_EGO, chi, form="literal"):
    """Water self-diffusion from the hydroxyl-proton and oligomer signals.

    ``form="literal"``: chi/(1-chi) D_OH - D_EGO/(1-chi).
    ``form="average"``: (D_OH - chi D_EGO)/(1-chi), the inverse of the
    population-weighted fast-exchange average.
    Non-positive results are flagged INVALID.
    """
    if not 0.0 < chi < 1.0:
        raise ConfigurationError("chi must lie strictly between 0 and 1")
    if form == "literal":
        d = chi / (1.0 - chi) * D_OH - D_EGO / (1.0 - chi)
    elif form == "average":
        d = (D_OH - chi * D_EGO) / (1.0 - chi)
    else:
        raise ConfigurationError(f"unknown form {form!r}")
    return NmrResult(d, form, d > 0)


# ---------------------------------------------------------------- output


def csv_text(meta, columns):
    """CSV with ``# key: value`` metadata rows followed by named columns."""
    buf = io.StringIO()
    for k, v in meta.items():
        buf.write(f"# {k}: {v}\n")
    names = list(columns)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    cols = [np.atleast_1d(np.asarray(columns[n])) for n in names]
    for row in zip(*cols):
        writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def write_csv(path, meta, columns):
    atomic_write(path, csv_text(meta, columns))


def read_csv(path):
    """(meta dict, columns dict of float arrays) from a file written by write_csv."""
    meta, rows = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                k, _, v = line[1:].partition(":")
                meta[k.strip()] = v.strip()
            elif line.strip():
                rows.append(line.rstrip("\n"))
    reader = list(csv.reader(rows))
    names = reader[0]
    data = {n: [] for n in names}
    for row in reader[1:]:
        for n, v in zip(names, row):
            try:
                data[n].append(float(v))
            except ValueError:
                data[n].append(v)
    return meta, data


def write_summary(path, summary):
    atomic_write(path, dump_yaml(summary))
