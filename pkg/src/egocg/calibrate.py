"""Four-step nonbonded parameterization.

1. Water: epsilon_PW matched to the water density at fixed sigma_PW, then the
   time-mapping factor S from the CG water diffusion coefficient.
2. Chain ends: for each sigma_PA on a grid, epsilon_PA is matched to the pure
   EGO2 density; the grid point minimizing the log-diffusion RMSE of
   EGO2/water mixtures wins.
3/4. Chain interior: alternate a sigma_PB search (epsilon_PB re-matched to the
   EGO4 density, EGO3/water RMSE) with a gamma(PB-PW) search (EGO13/water
   RMSE) until the grid selection is stable.

The physics comes from an evaluator. ``MDEvaluator`` runs the engine;
``SurrogateEvaluator`` is a closed-form stand-in with a known optimum, used to
test the driver.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import bisect

from .analysis import (
    ScalingParams,
    compute_time_mapping,
    density as traj_density,
    diffusion_from_msd,
    msd,
    scale_diffusion,
)
from .core import ConfigurationError, Topology, builtin_species, build_system
from .formats import atomic_write, content_hash, emit_forcefield

MOLECULES_PER_BEAD = {"PW": 3}


class CalibrationError(RuntimeError):
    pass


# ---------------------------------------------------------------- targets and reports


@dataclass(frozen=True)
class SystemSpec:
    """A pure liquid (W = 1 for the oligomer, or ``species="PW"``) or an oligomer/water mixture."""

    species: str
    W: float = 1.0
    temperature: float = 293.0
    pressure: float = 1.01325

    def __post_init__(self):
        if not 0.0 <= self.W <= 1.0:
            raise ConfigurationError("weight fraction W must lie in [0, 1]")

    @property
    def components(self):
        if self.species == "PW":
            return ("PW",)
        if self.W >= 1.0:
            return (self.species,)
        return (self.species, "PW")


@dataclass(frozen=True)
class CalibrationTarget:
    kind: str  # density | diffusion
    system: SystemSpec
    value: float  # g/cm^3, or m^2/s for diffusion
    unit: str
    component: str = ""  # which species a diffusion value belongs to
    source: str = ""

    def __post_init__(self):
        if self.kind not in ("density", "diffusion"):
            raise ConfigurationError(f"target kind must be density or diffusion, got {self.kind!r}")
        if not self.value > 0:
            raise ConfigurationError("target value must be positive")


@dataclass
class CalibrationReport:
    step: str
    parameter: str
    grid: list = field(default_factory=list)
    objective: list = field(default_factory=list)  # nan for failed points
    selected: float = None
    details: list = field(default_factory=list)
    failed: list = field(default_factory=list)
    S: float = None
    flags: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    def argmin(self):
        obj = np.asarray(self.objective, dtype=float)
        if obj.size == 0 or not np.isfinite(obj).any():
            raise CalibrationError(f"step {self.step}: every grid point failed")
        return self.grid[int(np.nanargmin(obj))]

    def check(self):
        """Selected value must be the argmin of the recorded objective."""
        if self.objective and self.selected != self.argmin():
            raise CalibrationError(
                f"report {self.step}: selected {self.selected} is not the argmin {self.argmin()}")
        for sub in self.trace:
            if isinstance(sub, CalibrationReport):
                sub.check()
        return True

    def to_dict(self):
        d = asdict(self)
        d["trace"] = [t.to_dict() if isinstance(t, CalibrationReport) else t for t in self.trace]
        return d

    def csv_columns(self):
        return {self.parameter: self.grid, "objective": self.objective}


def rmse_log_diffusion(pairs):
    """sqrt(mean((log10 D_exp - log10 D_aa)^2))."""
    pairs = list(pairs)
    if not pairs:
        raise ConfigurationError("need at least one (D_exp, D_aa) pair")
    a = np.asarray(pairs, dtype=float)
    if np.any(a <= 0) or not np.all(np.isfinite(a)):
        raise ConfigurationError("diffusion coefficients must be positive and finite")
    d = np.log10(a[:, 0]) - np.log10(a[:, 1])
    return float(np.sqrt(np.mean(d * d)))


# ---------------------------------------------------------------- system construction


def blend_counts(species, W, n_beads=1000, ff=None):
    """Molecule counts (oligomer, water beads) giving oligomer mass fraction W."""
    if species == "PW":
        return {"PW": n_beads}
    ego = builtin_species(species)
    if W >= 1.0:
        return {species: max(1, round(n_beads / len(ego.beads)))}
    from .potentials import bundled_forcefield

    ff = ff or bundled_forcefield()
    m_ego = sum(ff.bead_types[b].mass for b in ego.beads)
    m_w = ff.bead_types["PW"].mass
    # n_e*len + n_w = n_beads ; n_e*m_ego / (n_e*m_ego + n_w*m_w) = W
    ratio = W / (1.0 - W) * m_w / m_ego  # n_e / n_w
    n_w = n_beads / (1.0 + ratio * len(ego.beads))
    n_e = max(1, round(ratio * n_w))
    return {species: n_e, "PW": max(1, round(n_w))}


def system_topology(spec, ff, n_beads=1000):
    counts = blend_counts(spec.species, spec.W, n_beads, ff)
    mols = [builtin_species(s) for s in counts]
    return Topology(dict(ff.bead_types), mols, list(counts.values()))


def mass_fraction(top, species):
    m = {tm.name: top.molecule_mass(tm) * c for tm, c in zip(top.molecules, top.counts)}
    return m.get(species, 0.0) / sum(m.values())


# ---------------------------------------------------------------- evaluators


@dataclass
class SurrogateEvaluator:
    """Closed-form pseudo-simulator with a known optimum.

    Density of any pure liquid rises as (epsilon/epsilon*(sigma))^0.3, where
    epsilon*(sigma) = epsilon_opt (sigma/sigma_opt)^2 is the density-matching
    curve. Log10 CG diffusion coefficients deviate linearly from the values
    consistent with the targets:

    * water, and all species: d(log10 D) = 2 (sigma_PW - sigma_PW*)
    * EGO2 mixtures: + s_q (sigma_PA - sigma_PA*)/0.01
    * EGO3 mixtures: + s_q [(sigma_PB - sigma_PB*)/0.01 + c1 (gamma - gamma*)/0.01]
    * EGO13 mixtures: + s_q [(gamma - gamma*)/0.01 + c2 (sigma_PB - sigma_PB*)/0.01]

    with per-target slopes s_q = 0.02 (1 + index). The CG water coefficient at
    the optimum equals S* D_exp / 3^(1/3), so STEP 1 recovers S*.
    """

    optimum: dict = field(default_factory=lambda: {
        "sigma_PW": 0.40, "epsilon_PW": 2.650, "sigma_PA": 0.45, "epsilon_PA": 4.356,
        "sigma_PB": 0.46, "epsilon_PB": 3.523, "gamma": 1.13})
    densities: dict = field(default_factory=lambda: {"PW": 0.998, "EGO2": 1.118, "EGO4": 1.125})
    targets: dict = field(default_factory=dict)  # (species, W, component) -> D_exp
    S: float = 6.19
    D_exp_water: float = 2.0e-9
    c1: float = 0.2
    c2: float = 0.3
    n_evaluations: int = 0

    bead_of = {"PW": "PW", "EGO2": "PA", "EGO4": "PB", "EGO3": "PB"}

    def config(self):
        return {"kind": "surrogate", "optimum": self.optimum, "S": self.S,
                "targets": sorted([list(k) + [v] for k, v in self.targets.items()]),
                "c1": self.c1, "c2": self.c2}

    def density(self, ff, spec):
        self.n_evaluations += 1
        bead = self.bead_of[spec.species]
        bt = ff.bead_types[bead]
        o = self.optimum
        eps_star = o[f"epsilon_{bead}"] * (bt.sigma / o[f"sigma_{bead}"]) ** 2
        if bead == "PW" and not 0.38 - 1e-9 <= bt.sigma <= 0.42 + 1e-9:
            # outside the stable liquid window the fluid simply vaporizes
            return 1e-3 * (bt.epsilon / eps_star)
        return self.densities[spec.species] * (bt.epsilon / eps_star) ** 0.3

    def _deviation(self, ff, spec, component, index):
        o = self.optimum
        pa, pb, pw = ff.bead_types["PA"], ff.bead_types["PB"], ff.bead_types["PW"]
        gamma = ff.mixing.gamma("PB", "PW")
        dev = 2.0 * (pw.sigma - o["sigma_PW"])
        s = 0.02 * (1 + index)
        if spec.species == "EGO2":
            dev += s * (pa.sigma - o["sigma_PA"]) / 0.01
        elif spec.species == "EGO3":
            dev += s * ((pb.sigma - o["sigma_PB"]) / 0.01 + self.c1 * (gamma - o["gamma"]) / 0.01)
        elif spec.species == "EGO13":
            dev += s * ((gamma - o["gamma"]) / 0.01 + self.c2 * (pb.sigma - o["sigma_PB"]) / 0.01)
        return dev

    def diffusion(self, ff, spec):
        """CG-time diffusion coefficients (m^2/s) of every component."""
        self.n_evaluations += 1
        out = {}
        for idx, comp in enumerate(spec.components):
            n = MOLECULES_PER_BEAD.get(comp, 1)
            if spec.species == "PW":
                d_exp = self.D_exp_water
            else:
                key = (spec.species, round(spec.W, 6), comp)
                if key not in self.targets:
                    raise CalibrationError(f"surrogate has no reference for {key}")
                d_exp = self.targets[key]
            d_cg_opt = d_exp * self.S / n ** (1.0 / 3.0)
            out[comp] = d_cg_opt * 10.0 ** self._deviation(ff, spec, comp, idx)
        return out


@dataclass
class RunLengths:
    npt_ps: float
    nvt_ps: float
    msd_fit_ps: tuple
    n_beads: int
    sample_ps: float = 1.0


RUN_LENGTHS = {
    # desk: short runs at ~1000 beads; paper: full protocol lengths
    "desk": RunLengths(npt_ps=300.0, nvt_ps=1000.0, msd_fit_ps=(20.0, 200.0), n_beads=1000),
    "paper": RunLengths(npt_ps=2000.0, nvt_ps=3000.0, msd_fit_ps=(1000.0, None),
                        n_beads=8000, sample_ps=10.0),
}


@dataclass
class MDEvaluator:
    """Runs the engine: NpT for densities, NpT then NVT for diffusion."""

    mode: str = "desk"
    seed: int = 1
    dt: float = 0.010
    n_evaluations: int = 0

    def __post_init__(self):
        if self.mode not in RUN_LENGTHS:
            raise ConfigurationError(f"run-length mode must be one of {list(RUN_LENGTHS)}")
        self.lengths = RUN_LENGTHS[self.mode]

    def config(self):
        return {"kind": "md", "mode": self.mode, "seed": self.seed, "dt": self.dt,
                "lengths": asdict(self.lengths)}

    def _equilibrate(self, ff, spec):
        from .engine import IntegratorConfig, Simulation, relax_overlaps, run

        top = system_topology(spec, ff, self.lengths.n_beads)
        guess = {"PW": 0.998, "EGO2": 1.118, "EGO4": 1.125}.get(spec.species, 1.05)
        state = build_system(top, guess, spec.temperature, self.seed, forcefield=ff)
        relax_overlaps(state, ff)
        cfg = IntegratorConfig(ensemble="NpT", dt=self.dt, temperature=spec.temperature,
                               pressure=spec.pressure, seed=self.seed)
        sim = Simulation(state, ff, cfg)
        traj = run(state, ff, cfg, self.lengths.npt_ps, self.lengths.sample_ps, sim=sim)
        return state, traj

    def density(self, ff, spec):
        self.n_evaluations += 1
        _, traj = self._equilibrate(ff, spec)
        t_end = traj.times[-1]
        return traj_density(traj, (0.5 * t_end, t_end))[0]

    def diffusion(self, ff, spec):
        from .engine import IntegratorConfig, run

        self.n_evaluations += 1
        state, _ = self._equilibrate(ff, spec)
        state.time = 0.0
        state.step = 0
        state.thermostat.p_eta = state.thermostat.eta = 0.0
        cfg = IntegratorConfig(ensemble="NVT", dt=self.dt, temperature=spec.temperature,
                               seed=self.seed)
        traj = run(state, ff, cfg, self.lengths.nvt_ps, self.lengths.sample_ps)
        out = {}
        lo, hi = self.lengths.msd_fit_ps
        for comp in spec.components:
            curve = msd(traj, comp, max_lag=hi)
            out[comp] = diffusion_from_msd(curve, (lo, hi)).D
        return out


class CachedEvaluator:
    """Memoizes evaluator calls on disk, keyed by a hash of (force field, system, config)."""

    def __init__(self, inner, cache_dir):
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    def _key(self, op, ff, spec):
        return content_hash({"op": op, "ff": emit_forcefield(ff), "system": asdict(spec),
                             "evaluator": self.inner.config()})

    def _call(self, op, ff, spec):
        key = self._key(op, ff, spec)
        path = self.cache_dir / f"{key}.json"
        if path.exists():
            self.hits += 1
            return json.loads(path.read_text())["value"]
        self.misses += 1
        value = getattr(self.inner, op)(ff, spec)
        atomic_write(path, json.dumps({"op": op, "value": value}, sort_keys=True))
        return value

    def density(self, ff, spec):
        return self._call("density", ff, spec)

    def diffusion(self, ff, spec):
        return self._call("diffusion", ff, spec)

    def config(self):
        return self.inner.config()


# ---------------------------------------------------------------- density matching


class _Converged(Exception):
    def __init__(self, x):
        self.x = x


def match_density(evaluator, ff, bead, sigma, target, bracket, tol=0.005, max_iter=40):
    """epsilon such that the pure-liquid density meets ``target`` within ``tol`` (relative).

    Returns (epsilon, trace) with trace rows (epsilon, density).
    """
    lo, hi = bracket
    trace = []

    def rho(eps):
        f = ff.with_bead(bead, sigma=sigma, epsilon=eps)
        r = float(evaluator.density(f, target.system))
        trace.append((float(eps), r))
        return r

    r_lo, r_hi = rho(lo), rho(hi)
    if not r_lo < r_hi:
        raise CalibrationError(
            f"density not increasing in epsilon over [{lo}, {hi}] at sigma={sigma} "
            f"({r_lo:.4f} vs {r_hi:.4f} g/cm^3)")
    if not r_lo < target.value < r_hi:
        raise CalibrationError(
            f"bracket [{lo}, {hi}] kJ/mol does not straddle the target {target.value} g/cm^3 "
            f"at sigma_{bead} = {sigma} nm (densities {r_lo:.4f}, {r_hi:.4f}); "
            f"try another sigma")
    for eps, r in ((lo, r_lo), (hi, r_hi)):
        if abs(r - target.value) < tol * target.value:
            return eps, trace

    def f(eps):
        r = rho(eps)
        # midpoints must stay between the bracket densities
        if not r_lo <= r <= r_hi:
            raise CalibrationError(f"non-monotonic density at epsilon={eps}: {r:.4f} g/cm^3")
        if abs(r - target.value) < tol * target.value:
            raise _Converged(eps)
        return r - target.value

    try:
        eps = bisect(f, lo, hi, xtol=1e-12, maxiter=max_iter)
    except _Converged as c:
        return float(c.x), trace
    except RuntimeError as exc:
        raise CalibrationError(f"density matching did not converge: {exc}") from None
    return float(eps), trace


# ---------------------------------------------------------------- steps


def _d_pairs(evaluator, ff, S, diffusion_targets):
    """(D_exp, D_aa) pairs for a list of diffusion targets, grouping runs by system."""
    pairs, rows = [], []
    by_system = {}
    for t in diffusion_targets:
        by_system.setdefault(t.system, []).append(t)
    for spec, targets in by_system.items():
        d_cg = evaluator.diffusion(ff, spec)
        for t in targets:
            n = MOLECULES_PER_BEAD.get(t.component, 1)
            d_aa = scale_diffusion(d_cg[t.component], ScalingParams(S, n))
            pairs.append((t.value, d_aa))
            rows.append({"species": spec.species, "W": spec.W, "component": t.component,
                         "D_exp": t.value, "D_cg": d_cg[t.component], "D_aa": d_aa})
    return pairs, rows


def step1_water(evaluator, ff, sigma_pw, D_exp_water, target_density=0.998,
                bracket=(2.0, 3.4), tol=0.005):
    """epsilon_PW from the water density, then S from the water diffusion coefficient."""
    spec = SystemSpec("PW")
    target = CalibrationTarget("density", spec, target_density, "g/cm^3", source="water")
    eps, trace = match_density(evaluator, ff, "PW", sigma_pw, target, bracket, tol)
    ff1 = ff.with_bead("PW", sigma=sigma_pw, epsilon=eps)
    d_cg = evaluator.diffusion(ff1, spec)["PW"]
    S = compute_time_mapping(d_cg, D_exp_water)
    rep = CalibrationReport("1", "epsilon_PW", selected=eps, S=S,
                            details=[{"sigma_PW": sigma_pw, "D_cg_water": d_cg,
                                      "D_exp_water": D_exp_water}],
                            trace=[{"epsilon": e, "density": r} for e, r in trace])
    return eps, S, rep


def step2_pa(evaluator, ff, sigma_grid, S, density_target, diffusion_targets,
             bracket=(3.0, 6.0), tol=0.005):
    """Grid search over sigma_PA; epsilon_PA re-matched at every point."""
    rep = CalibrationReport("2", "sigma_PA", S=S)
    eps_of = {}
    for sigma in sigma_grid:
        rep.grid.append(float(sigma))
        try:
            eps, tr = match_density(evaluator, ff, "PA", sigma, density_target, bracket, tol)
            f = ff.with_bead("PA", sigma=sigma, epsilon=eps)
            pairs, rows = _d_pairs(evaluator, f, S, diffusion_targets)
            rmse = rmse_log_diffusion(pairs)
        except (CalibrationError, ConfigurationError, RuntimeError) as exc:
            rep.objective.append(float("nan"))
            rep.failed.append({"sigma_PA": float(sigma), "error": str(exc)})
            rep.details.append({})
            continue
        eps_of[float(sigma)] = eps
        rep.objective.append(rmse)
        rep.details.append({"epsilon_PA": eps, "rows": rows, "density_trace": tr})
    rep.selected = rep.argmin()
    return rep.selected, eps_of[rep.selected], rep


def _search_sigma_pb(evaluator, ff, grid, gamma, S, density_target, ego3_targets, bracket,
                     tol, eps_cache):
    rep = CalibrationReport("3", "sigma_PB", details=[], flags=[f"gamma={gamma}"])
    f_gamma = ff.with_gamma("PB", "PW", gamma)
    for sigma in grid:
        sigma = float(sigma)
        rep.grid.append(sigma)
        try:
            if sigma not in eps_cache:
                # pure EGO4 has no PB-PW contacts, so epsilon_PB does not depend on gamma
                eps_cache[sigma] = match_density(evaluator, ff, "PB", sigma, density_target,
                                                 bracket, tol)[0]
            f = f_gamma.with_bead("PB", sigma=sigma, epsilon=eps_cache[sigma])
            pairs, rows = _d_pairs(evaluator, f, S, ego3_targets)
            rep.objective.append(rmse_log_diffusion(pairs))
            rep.details.append({"epsilon_PB": eps_cache[sigma], "rows": rows})
        except (CalibrationError, ConfigurationError, RuntimeError) as exc:
            rep.objective.append(float("nan"))
            rep.failed.append({"sigma_PB": sigma, "error": str(exc)})
            rep.details.append({})
    rep.selected = rep.argmin()
    return rep


def _search_gamma(evaluator, ff, grid, sigma, eps, S, ego13_targets):
    rep = CalibrationReport("4", "gamma", details=[], flags=[f"sigma_PB={sigma}"])
    base = ff.with_bead("PB", sigma=sigma, epsilon=eps)
    for gamma in grid:
        gamma = float(gamma)
        rep.grid.append(gamma)
        try:
            pairs, rows = _d_pairs(evaluator, base.with_gamma("PB", "PW", gamma), S, ego13_targets)
            rep.objective.append(rmse_log_diffusion(pairs))
            rep.details.append({"rows": rows})
        except (CalibrationError, ConfigurationError, RuntimeError) as exc:
            rep.objective.append(float("nan"))
            rep.failed.append({"gamma": gamma, "error": str(exc)})
            rep.details.append({})
    rep.selected = rep.argmin()
    return rep


def step34_pb_gamma(evaluator, ff, sigma_grid, gamma_grid, S, density_target, ego3_targets,
                    ego13_targets, bracket=(2.5, 5.0), tol=0.005, gamma_start=1.0,
                    sigma_start=None, order="ab", max_cycles=5):
    """Alternate the sigma_PB and gamma searches until the selection is grid-stable.

    ``order="ab"`` starts with the sigma_PB search at ``gamma_start``;
    ``order="ba"`` starts with the gamma search at ``sigma_start``.
    Returns (sigma_PB, epsilon_PB, gamma, report); the report carries the flag
    NOT_CONVERGED when ``max_cycles`` pass without a fixed point.
    """
    sigma_grid = [float(s) for s in sigma_grid]
    gamma_grid = [float(g) for g in gamma_grid]
    gamma = min(gamma_grid, key=lambda g: abs(g - gamma_start))
    sigma = sigma_grid[len(sigma_grid) // 2] if sigma_start is None else \
        min(sigma_grid, key=lambda s: abs(s - sigma_start))
    eps_cache = {}
    top = CalibrationReport("3-4", "sigma_PB,gamma", S=S)
    history = []

    def run_a():
        nonlocal sigma
        r = _search_sigma_pb(evaluator, ff, sigma_grid, gamma, S, density_target, ego3_targets,
                             bracket, tol, eps_cache)
        top.trace.append(r)
        sigma = r.selected
        return r

    def run_b():
        nonlocal gamma
        if sigma not in eps_cache:
            eps_cache[sigma] = match_density(evaluator, ff, "PB", sigma, density_target,
                                             bracket, tol)[0]
        r = _search_gamma(evaluator, ff, gamma_grid, sigma, eps_cache[sigma], S, ego13_targets)
        top.trace.append(r)
        gamma = r.selected
        return r

    first, second = (run_a, run_b) if order == "ab" else (run_b, run_a)
    converged = False
    prev = None
    for cycle in range(max_cycles):
        first()
        second()
        history.append((sigma, gamma))
        if prev == (sigma, gamma):
            converged = True
            break
        prev = (sigma, gamma)
    top.details = [{"cycle": i + 1, "sigma_PB": s, "gamma": g} for i, (s, g) in enumerate(history)]
    if not converged:
        top.flags.append("NOT_CONVERGED")
    top.selected = (sigma, gamma)
    return sigma, eps_cache[sigma], gamma, top


# ---------------------------------------------------------------- manifest driver


def _grid(spec):
    if isinstance(spec, dict):
        start, stop, step = spec["start"], spec["stop"], spec["step"]
        n = int(round((stop - start) / step))
        return [round(start + i * step, 10) for i in range(n + 1)]
    return [float(x) for x in spec]


def _diffusion_targets(rows, source):
    out = []
    for row in rows or []:
        spec = SystemSpec(row["species"], float(row["W"]))
        for comp, val in row["D_exp_m2_s"].items():
            if val is None:
                raise ConfigurationError(
                    f"no experimental D for {comp} in {row['species']} at W={row['W']}; "
                    f"supply it in the manifest")
            out.append(CalibrationTarget("diffusion", spec, float(val), "m^2/s", comp, source))
    return out


def make_evaluator(manifest, cache_dir=None):
    mode = manifest.get("mode", "desk")
    if mode == "surrogate":
        sur = manifest.get("surrogate", {})
        targets = {}
        for key in ("step2", "step34"):
            for grp in ("diffusion", "diffusion_EGO3", "diffusion_EGO13"):
                for row in manifest.get(key, {}).get(grp, []) or []:
                    for comp, val in row["D_exp_m2_s"].items():
                        targets[(row["species"], round(float(row["W"]), 6), comp)] = float(val)
        ev = SurrogateEvaluator(targets=targets, **{k: v for k, v in sur.items()
                                                    if k in ("S", "c1", "c2", "optimum")})
        ev.D_exp_water = float(manifest["step1"]["D_exp_water_m2_s"])
    else:
        ev = MDEvaluator(mode=mode, seed=int(manifest.get("seed", 1)))
    if cache_dir is not None:
        ev = CachedEvaluator(ev, cache_dir)
    return ev


def run_manifest(manifest, ff, cache_dir=None, evaluator=None):
    """Run the requested steps; returns (final force field, list of reports)."""
    ev = evaluator or make_evaluator(manifest, cache_dir)
    steps = [str(s) for s in manifest.get("steps", [1, 2, 3, 4])]
    tol = float(manifest.get("tolerance", 0.005))
    reports = []
    s1 = manifest["step1"]
    S = float(s1.get("S", 0.0)) or None
    if "1" in steps:
        eps, S, rep = step1_water(ev, ff, float(s1.get("sigma_PW_nm", 0.40)),
                                  float(s1["D_exp_water_m2_s"]),
                                  float(s1.get("density_g_cm3", 0.998)),
                                  tuple(s1.get("epsilon_bracket_kJ_mol", (2.0, 3.4))), tol)
        ff = ff.with_bead("PW", sigma=float(s1.get("sigma_PW_nm", 0.40)), epsilon=eps)
        reports.append(rep)
    if S is None:
        raise ConfigurationError("S unknown: run step 1 or give step1.S")
    if "2" in steps:
        s2 = manifest["step2"]
        dt = CalibrationTarget("density", SystemSpec("EGO2"), float(s2["density_g_cm3"]),
                               "g/cm^3", source="EGO2")
        sigma, eps, rep = step2_pa(ev, ff, _grid(s2["sigma_grid_nm"]), S, dt,
                                   _diffusion_targets(s2.get("diffusion"), "EGO2/water"),
                                   tuple(s2.get("epsilon_bracket_kJ_mol", (3.0, 6.0))), tol)
        ff = ff.with_bead("PA", sigma=sigma, epsilon=eps)
        reports.append(rep)
    if "3" in steps or "4" in steps:
        s3 = manifest["step34"]
        dt = CalibrationTarget("density", SystemSpec("EGO4"), float(s3["density_g_cm3"]),
                               "g/cm^3", source="EGO4")
        sigma, eps, gamma, rep = step34_pb_gamma(
            ev, ff, _grid(s3["sigma_grid_nm"]), _grid(s3["gamma_grid"]), S, dt,
            _diffusion_targets(s3.get("diffusion_EGO3"), "EGO3/water"),
            _diffusion_targets(s3.get("diffusion_EGO13"), "EGO13/water"),
            tuple(s3.get("epsilon_bracket_kJ_mol", (2.5, 5.0))), tol,
            float(s3.get("gamma_start", 1.0)), s3.get("sigma_start"),
            s3.get("order", "ab"), int(s3.get("max_cycles", 5)))
        ff = ff.with_bead("PB", sigma=sigma, epsilon=eps).with_gamma("PB", "PW", gamma)
        reports.append(rep)
    for r in reports:
        r.check()
    return ff, reports, S
