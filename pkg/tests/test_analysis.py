import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import constants

from egocg.analysis import (AnalysisError, MsdCurve, ScalingParams, block_average,
                            compute_time_mapping, density, diffusion_from_msd,
                            end_to_end_relaxation, max_shear_rate, msd, read_csv,
                            scale_diffusion, scale_viscosity, viscosity_from_nemd,
                            water_diffusion_from_nmr, write_csv)
from egocg.core import BOLTZMANN, ConfigurationError, Topology, builtin_species, water_template
from egocg.engine import NemdForcing, Trajectory

CBRT3 = 3 ** (1 / 3)


def _traj(top, positions, boxes, times, velocities=None):
    positions = np.asarray(positions, float)
    velocities = np.zeros_like(positions) if velocities is None else np.asarray(velocities, float)
    return Trajectory(top, times=list(map(float, times)), boxes=[np.asarray(b, float) for b in boxes],
                      unwrapped=list(positions), velocities=list(velocities),
                      sample_interval=float(times[1] - times[0]) if len(times) > 1 else 0.0)


def _water(ff, n):
    return Topology(dict(ff.bead_types), [water_template()], [n]).expand()


# ---------------------------------------------------------------- density


def test_density_constant_box_exact(ff):
    top = _water(ff, 50)
    box = [3.0, 3.0, 3.0]
    pos = np.zeros((4, 50, 3))
    traj = _traj(top, pos, [box] * 4, [0, 1, 2, 3])
    mean, se = density(traj)
    oracle = 50 * 54.0 * constants.atomic_mass * 1e3 / (27.0 * 1e-21)
    assert mean == pytest.approx(oracle, rel=1e-12)
    # 1 amu and 1/N_A grams differ at the 1e-9 level since the 2019 SI revision
    assert mean == pytest.approx(50 * 54.0 / constants.Avogadro / 27e-21, rel=1e-8)
    assert se == 0.0


def test_density_window_outside_trajectory(ff):
    top = _water(ff, 10)
    traj = _traj(top, np.zeros((3, 10, 3)), [[3, 3, 3]] * 3, [0, 1, 2])
    with pytest.raises(AnalysisError, match="outside"):
        density(traj, (10.0, 20.0))


def test_density_half_windows_agree(ff, rng):
    top = _water(ff, 10)
    n = 2000
    edges = 3.0 * (1 + 0.002 * rng.standard_normal(n))
    boxes = [[e, e, e] for e in edges]
    traj = _traj(top, np.zeros((n, 10, 3)), boxes, np.arange(n, dtype=float))
    m1, s1 = density(traj, (0, 999))
    m2, s2 = density(traj, (1000, 1999))
    assert abs(m1 - m2) < 2 * math.hypot(s1, s2)


def test_block_average_errors():
    with pytest.raises(AnalysisError):
        block_average([])
    mean, se = block_average([1.0, 2.0])
    assert mean == 1.5 and math.isnan(se)
    mean, se = block_average(np.arange(10.0))
    assert mean == 4.5
    # block means 0.5, 2.5, ... 8.5: sd = sqrt(10), se = sqrt(10/5)
    assert se == pytest.approx(math.sqrt(2.0))


# ---------------------------------------------------------------- MSD and D


def test_msd_stationary(ff, rng):
    top = _water(ff, 20)
    pos = np.repeat(rng.uniform(0, 3, (1, 20, 3)), 30, axis=0)
    curve = msd(_traj(top, pos, [[3.2] * 3] * 30, np.arange(30.0)), "PW")
    assert curve.msd[0] == 0.0
    assert np.all(curve.msd == 0.0)
    assert np.all(np.diff(curve.lags) > 0)


def test_msd_ballistic(ff, rng):
    top = _water(ff, 20)
    v = np.array([0.1, -0.2, 0.05])
    t = np.arange(40.0)
    pos = rng.uniform(0, 3, (20, 3))[None] + t[:, None, None] * v
    curve = msd(_traj(top, pos, [[3.2] * 3] * 40, t), "PW", origin_stride=1.0)
    assert np.allclose(curve.msd, (v @ v) * curve.lags**2, rtol=1e-10, atol=1e-12)


def test_msd_translation_invariant(ff, rng):
    top = _water(ff, 10)
    pos = np.cumsum(rng.normal(0, 0.1, (50, 10, 3)), axis=0)
    a = msd(_traj(top, pos, [[3.2] * 3] * 50, np.arange(50.0)), "PW")
    b = msd(_traj(top, pos + [7.0, -3.0, 0.5], [[3.2] * 3] * 50, np.arange(50.0)), "PW")
    assert np.allclose(a.msd, b.msd, rtol=1e-10, atol=1e-12)


def test_msd_species_absent(ff):
    top = _water(ff, 5)
    traj = _traj(top, np.zeros((3, 5, 3)), [[3.2] * 3] * 3, [0, 1, 2])
    with pytest.raises(AnalysisError, match="absent"):
        msd(traj, "EGO13")


def test_msd_uses_molecule_com(ff):
    top = Topology(dict(ff.bead_types), [builtin_species("EGO2")], [1]).expand()
    t = np.arange(5.0)
    # beads oscillate about a fixed centre: COM MSD is zero
    a = np.stack([np.array([[-1, 0, 0], [1, 0, 0]]) * (1 + 0.1 * k) for k in range(5)])
    curve = msd(_traj(top, a + 2.0, [[4.0] * 3] * 5, t), "EGO2", origin_stride=1.0)
    assert np.allclose(curve.msd, 0.0, atol=1e-24)


def test_random_walk_recovers_d(ff, rng):
    D, dt, n, frames = 1e-3, 1.0, 200, 1000
    steps = rng.normal(0, math.sqrt(2 * D * dt), (frames, n, 3))
    steps[0] = 0
    pos = np.cumsum(steps, axis=0)
    traj = _traj(_water(ff, n), pos, [[4.0] * 3] * frames, np.arange(frames) * dt)
    curve = msd(traj, "PW", max_lag=200.0)
    res = diffusion_from_msd(curve, (20.0, 200.0))
    assert res.D == pytest.approx(D * 1e-6, rel=0.05)
    assert res.warning == ""


def test_diffusion_exact_slope():
    lags = np.linspace(0, 2000, 201)
    curve = MsdCurve(lags, 6 * 1e-3 * lags, "PW", np.ones(201, int))
    res = diffusion_from_msd(curve)
    assert res.D == pytest.approx(1e-9, rel=1e-12)
    assert res.r_squared == pytest.approx(1.0)
    assert res.warning == ""


def test_diffusion_ballistic_flags_warning():
    lags = np.linspace(0, 100, 101)
    curve = MsdCurve(lags, 0.01 * lags**2, "PW", np.ones(101, int))
    res = diffusion_from_msd(curve, (10.0, 100.0))
    assert res.warning


def test_diffusion_window_too_small():
    lags = np.linspace(0, 10, 11)
    with pytest.raises(AnalysisError, match="fewer than 3"):
        diffusion_from_msd(MsdCurve(lags, lags, "PW", np.ones(11, int)))


def test_langevin_free_particle(ff, rng):
    # exact Ornstein-Uhlenbeck velocities, trapezoid positions on a fine grid
    n, m, T, gamma = 200, 54.0, 293.0, 1.0
    h, every, frames = 0.02, 50, 600
    kT = BOLTZMANN * T
    c1 = math.exp(-gamma * h)
    c2 = math.sqrt(kT / m * (1 - c1 * c1))
    v = rng.normal(0, math.sqrt(kT / m), (n, 3))
    x = np.zeros((n, 3))
    out = [x.copy()]
    for _ in range(frames - 1):
        for _ in range(every):
            v_new = c1 * v + c2 * rng.standard_normal((n, 3))
            x += 0.5 * h * (v + v_new)
            v = v_new
        out.append(x.copy())
    t = np.arange(frames) * h * every
    curve = msd(_traj(_water(ff, n), np.array(out), [[4.0] * 3] * frames, t), "PW",
                max_lag=200.0)
    res = diffusion_from_msd(curve, (20.0, 200.0))
    oracle = kT / (m * gamma) * 1e-6
    assert res.D == pytest.approx(oracle, rel=0.10)


# ---------------------------------------------------------------- scaling relations


def test_time_mapping_examples():
    assert compute_time_mapping(2e-9, 2e-9) == pytest.approx(CBRT3, rel=1e-12)
    assert round(CBRT3, 5) == 1.44225
    d_cg = 6.19 * 2.0e-9 / CBRT3
    assert d_cg == pytest.approx(8.58e-9, abs=0.005e-9)
    assert compute_time_mapping(d_cg, 2.0e-9) == pytest.approx(6.19, rel=1e-12)
    assert compute_time_mapping(d_cg, 1.0e-9) == pytest.approx(2 * 6.19, rel=1e-12)


def test_time_mapping_rejects_nonpositive():
    with pytest.raises(ConfigurationError):
        compute_time_mapping(0.0, 2e-9)


def test_scale_diffusion_examples():
    assert scale_diffusion(3e-9, ScalingParams(1.0, 1)) == 3e-9
    assert scale_diffusion(8.58e-9, ScalingParams(6.19, 3)) == pytest.approx(2.0e-9, rel=2e-3)
    assert scale_diffusion(1e-8, ScalingParams(6.19, 1)) == pytest.approx(1e-8 / 6.19)
    assert ScalingParams(2.0, 8).diffusivity_factor == 2.0


@pytest.mark.parametrize("S,n", [(0.0, 1), (-1.0, 1), (1.0, 0), (1.0, 1.5)])
def test_scaling_params_invalid(S, n):
    with pytest.raises(ConfigurationError):
        ScalingParams(S, n)


@given(st.floats(1e-12, 1e-6), st.floats(1e-12, 1e-6))
def test_mapping_round_trip(d_cg, d_exp):
    S = compute_time_mapping(d_cg, d_exp)
    assert scale_diffusion(d_cg, ScalingParams(S, 3)) == pytest.approx(d_exp, rel=1e-12)


def test_scale_viscosity():
    assert scale_viscosity(0.7, 1.0) == 0.7
    assert round(scale_viscosity(0.162, 6.19), 3) == 1.003
    assert scale_viscosity(0.162, 12.38) == pytest.approx(2 * scale_viscosity(0.162, 6.19))
    with pytest.raises(ConfigurationError):
        scale_viscosity(0.0, 1.0)


# ---------------------------------------------------------------- NEMD viscosity


def _cosine_field_traj(ff, V, frames=6, lz=4.0):
    nx, nz = 4, 32
    top = _water(ff, nx * nx * nz)
    g = np.arange(nx) * (3.2 / nx)
    z = (np.arange(nz) + 0.25) * (lz / nz)
    pos = np.array([[x, y, zz] for zz in z for x in g for y in g])
    k = 2 * math.pi / lz
    vel = np.zeros_like(pos)
    vel[:, 0] = V * np.cos(k * pos[:, 2])
    box = [3.2, 3.2, lz]
    traj = _traj(top, [pos] * frames, [box] * frames, np.arange(frames, dtype=float),
                 [vel] * frames)
    return traj, top, k, box


def test_viscosity_closed_form(ff):
    V, A = 0.05, 0.001
    traj, top, k, box = _cosine_field_traj(ff, V)
    forcing = NemdForcing(A, box[2])
    res = viscosity_from_nemd(traj, forcing, discard=0.0)
    rho = top.masses.sum() / np.prod(box)  # amu/nm^3
    eta_native = rho * A / (V * k * k)  # amu/(nm ps)
    per_unit = constants.atomic_mass / (1e-9 * 1e-12) * 1e3  # -> mPa s
    assert res.eta == pytest.approx(eta_native * per_unit, rel=1e-10)
    assert res.n_frames == 6


def test_viscosity_zero_field_errors(ff):
    traj, _, _, box = _cosine_field_traj(ff, 0.0)
    with pytest.raises(AnalysisError, match="not positive"):
        viscosity_from_nemd(traj, NemdForcing(0.001, box[2]), discard=0.0)


def test_viscosity_zero_amplitude_errors(ff):
    traj, _, _, box = _cosine_field_traj(ff, 0.05)
    with pytest.raises(AnalysisError, match="amplitude"):
        viscosity_from_nemd(traj, NemdForcing(0.0, box[2]), discard=0.0)


def test_viscosity_doubling_amplitude_halves_eta(ff):
    traj, _, _, box = _cosine_field_traj(ff, 0.05)
    a = viscosity_from_nemd(traj, NemdForcing(0.001, box[2]), discard=0.0).eta
    b = viscosity_from_nemd(traj, NemdForcing(0.002, box[2]), discard=0.0).eta
    assert b == pytest.approx(2 * a, rel=1e-12)


def test_viscosity_discard(ff):
    traj, _, _, box = _cosine_field_traj(ff, 0.05)
    assert viscosity_from_nemd(traj, NemdForcing(0.001, box[2]), discard=2.0).n_frames == 4
    with pytest.raises(AnalysisError, match="no frames"):
        viscosity_from_nemd(traj, NemdForcing(0.001, box[2]), discard=100.0)


# ---------------------------------------------------------------- shear-rate guard


def test_shear_rate_regime_coefficient():
    res = max_shear_rate(1.0, 1000.0, 0.01, 8.0)
    # rho/eta = 1e5 s/m^2 = 0.1 ps/nm^2, times l_z/(2 pi)
    assert res.sh_max == pytest.approx(0.1 * 8.0 / (2 * math.pi), rel=1e-12)
    assert round(res.sh_max, 6) == 0.127324
    # eta at which the coefficient is the quoted 0.2
    assert max_shear_rate(1.0, 1000.0, 0.0063662, 8.0).sh_max == pytest.approx(0.2, rel=1e-5)


def test_shear_rate_zero_amplitude_passes():
    res = max_shear_rate(0.0, 1000.0, 0.01, 8.0, tau_longest=6000.0)
    assert res.sh_max == 0.0 and res.verdict == "PASS"


def test_shear_rate_guard_for_slow_chain():
    res = max_shear_rate(0.0005, 1000.0, 0.0063662, 8.0, tau_longest=6000.0)
    assert res.verdict == "PASS"
    assert res.A_max == pytest.approx(1 / (6000 * 0.2), rel=1e-5)
    assert res.A_max < 0.001
    assert max_shear_rate(0.001, 1000.0, 0.0063662, 8.0, tau_longest=6000.0).verdict == "WARN"


@given(st.floats(0, 0.01), st.floats(0, 0.01))
def test_shear_verdict_monotone(a1, a2):
    lo, hi = sorted((a1, a2))
    v_lo = max_shear_rate(lo, 1000.0, 0.01, 8.0, tau_longest=6000.0).verdict
    v_hi = max_shear_rate(hi, 1000.0, 0.01, 8.0, tau_longest=6000.0).verdict
    assert not (v_lo == "WARN" and v_hi == "PASS")


# ---------------------------------------------------------------- end-to-end relaxation


def _rotor_traj(ff, u_frames, times):
    n = u_frames.shape[1]
    top = Topology(dict(ff.bead_types), [builtin_species("EGO2")], [n]).expand()
    base = np.zeros((n, 3)) + 1.0
    pos = np.empty((len(times), 2 * n, 3))
    pos[:, 0::2] = base
    pos[:, 1::2] = base + 0.5 * u_frames
    return _traj(top, pos, [[4.0] * 3] * len(times), times)


def test_relaxation_frozen_raises(ff, rng):
    u = rng.normal(size=(1, 30, 3))
    u = np.repeat(u / np.linalg.norm(u, axis=2, keepdims=True), 20, axis=0)
    traj = _rotor_traj(ff, u, np.arange(20.0))
    with pytest.raises(AnalysisError, match="0.5"):
        end_to_end_relaxation(traj, "EGO2")


def test_relaxation_rotational_diffusion(ff, rng):
    d_rot, h, every, frames, n = 0.005, 0.1, 10, 800, 200
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    out = [u.copy()]
    for _ in range(frames - 1):
        for _ in range(every):
            xi = rng.normal(0, math.sqrt(2 * d_rot * h), (n, 3))
            xi -= (xi * u).sum(axis=1, keepdims=True) * u
            u = u + xi
            u /= np.linalg.norm(u, axis=1, keepdims=True)
        out.append(u.copy())
    times = np.arange(frames) * h * every
    res = end_to_end_relaxation(_rotor_traj(ff, np.array(out), times), "EGO2", max_lag=400.0,
                                origin_stride=5)
    assert res.tau == pytest.approx(1 / (2 * d_rot), rel=0.10)


def test_relaxation_needs_two_beads(ff):
    top = _water(ff, 5)
    traj = _traj(top, np.zeros((3, 5, 3)), [[3.2] * 3] * 3, [0, 1, 2])
    with pytest.raises(AnalysisError, match="two beads"):
        end_to_end_relaxation(traj, "PW")


# ---------------------------------------------------------------- NMR correction


def test_nmr_literal_substitution():
    res = water_diffusion_from_nmr(3e-9, 1e-9, 2 / 3)
    assert res.D_w == pytest.approx(3e-9, rel=1e-12)
    assert res.valid and res.flag == ""


def test_nmr_literal_small_chi_invalid():
    res = water_diffusion_from_nmr(3e-9, 1e-9, 1e-12)
    assert res.D_w == pytest.approx(-1e-9, rel=1e-6)
    assert res.flag == "INVALID"


def test_nmr_average_fixed_point():
    res = water_diffusion_from_nmr(2.5e-9, 2.5e-9, 0.1, form="average")
    assert res.D_w == pytest.approx(2.5e-9, rel=1e-12)
    assert res.form == "average"


@given(st.floats(0.01, 0.99), st.floats(1e-10, 1e-8), st.floats(1e-10, 1e-8))
def test_nmr_average_inverts_exchange_mix(chi, d_ego, d_w):
    d_oh = chi * d_ego + (1 - chi) * d_w
    res = water_diffusion_from_nmr(d_oh, d_ego, chi, form="average")
    assert res.D_w == pytest.approx(d_w, rel=1e-9)


@pytest.mark.parametrize("chi", [0.0, 1.0, -0.1, 1.5])
def test_nmr_chi_out_of_range(chi):
    with pytest.raises(ConfigurationError):
        water_diffusion_from_nmr(1e-9, 1e-9, chi)


# ---------------------------------------------------------------- output


def test_csv_round_trip(tmp_path):
    p = tmp_path / "msd.csv"
    lags = np.array([0.0, 0.1, 0.2])
    vals = np.array([0.0, 1 / 3, 2 / 7])
    write_csv(p, {"trajectory": "abc", "window": "(0, 1)"}, {"lag_ps": lags, "msd_nm2": vals})
    meta, cols = read_csv(p)
    assert meta == {"trajectory": "abc", "window": "(0, 1)"}
    assert cols["lag_ps"] == lags.tolist()
    assert cols["msd_nm2"] == vals.tolist()
