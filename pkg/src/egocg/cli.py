"""Command-line entry point: ``egocg run|analyze|invert|calibrate|verify|export``.

Relative output paths are resolved against ``$EGOCG_OUTPUT_ROOT`` (default:
the working directory). Exit codes: 0 success, 1 user error, 2 numerical
failure, 3 partial replica failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    ATM_BAR,
    UNITS,
    ConfigurationError,
    Topology,
    TopologyError,
    build_system,
    builtin_species,
)
from .formats import (
    FormatError,
    atomic_write,
    bundled_path,
    canonical_json,
    content_hash,
    emit_forcefield,
    file_hash,
    load_forcefield,
    load_mapping,
    load_yaml,
    parse_forcefield,
    parse_topology,
    read_text,
)

log = logging.getLogger("egocg")

EXIT_OK, EXIT_USER, EXIT_NUMERIC, EXIT_PARTIAL = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "EGOCG_OUTPUT_ROOT"
MANIFEST_NAME = "manifest.json"

# run lengths (ps) and box size per mode; estimator settings are shared
MODE_PRESETS = {
    "desk": {"equilibration_ps": 200.0, "production_md_ps": 1000.0, "production_nemd_ps": 5000.0,
             "nemd_discard_ps": 500.0, "n_beads": 1000},
    "paper": {"equilibration_ps": 2000.0, "production_md_ps": 3000.0,
              "production_nemd_ps": 20000.0, "nemd_discard_ps": 5000.0, "n_beads": 8000},
}


class UserError(Exception):
    pass


class ReplicaFailure(Exception):
    pass


# ---------------------------------------------------------------- paths and config


def output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, os.getcwd()))


def resolve_output(path):
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


def resolve_input(path, base=None):
    """An existing file relative to ``base``, or a bundled data file of that name."""
    p = Path(path)
    if not p.is_absolute() and base is not None and (Path(base) / p).exists():
        return Path(base) / p
    if p.exists():
        return p
    for cand in (bundled_path(p.name), bundled_path(f"{p.name}.ff")):
        if cand.exists():
            return cand
    raise UserError(f"{path}: file not found")


def _forcefield_from(ref, base=None):
    path = resolve_input(ref, base)
    return parse_forcefield(read_text(path), path), path


def resolve_run_config(raw, base=None):
    """Fill mode defaults and validate; returns a plain dict (the hashed object)."""
    cfg = copy.deepcopy(raw)
    mode = cfg.setdefault("mode", "desk")
    if mode not in MODE_PRESETS:
        raise UserError(f"mode must be one of {sorted(MODE_PRESETS)}, got {mode!r}")
    preset = MODE_PRESETS[mode]
    if "forcefield" not in cfg:
        raise UserError("config needs a 'forcefield' entry")
    system = cfg.setdefault("system", {})
    if "species" not in system and "topology" not in system:
        system["species"] = {"PW": preset["n_beads"]}
    system.setdefault("box_aspect", [1.0, 1.0, 1.0])
    if "density_g_cm3" not in system:
        raise UserError("system.density_g_cm3 (initial density) is required")
    cfg.setdefault("temperature_K", 293.0)
    cfg.setdefault("pressure_bar", ATM_BAR)
    cfg.setdefault("dt_ps", 0.010)
    cfg.setdefault("thermostat_tau_ps", 1.0)
    cfg.setdefault("barostat_tau_ps", 5.0)
    cfg.setdefault("compressibility_per_bar", 4.5e-5)
    cfg.setdefault("replicas", 5)
    cfg.setdefault("seed", 1)
    cfg.setdefault("jobs", 1)
    cfg.setdefault("output", "egocg_run")
    cfg.setdefault("checkpoint_interval_ps", 100.0)
    eq = cfg.setdefault("equilibration", {})
    eq.setdefault("ensemble", "NpT")
    eq.setdefault("duration_ps", preset["equilibration_ps"])
    eq.setdefault("sample_interval_ps", 1.0)
    prod = cfg.setdefault("production", {})
    prod.setdefault("ensemble", "NVT")
    nemd = cfg.get("nemd")
    if nemd is not None:
        nemd.setdefault("amplitude_nm_ps2", 0.0005)
        nemd.setdefault("discard_ps", preset["nemd_discard_ps"])
    prod.setdefault("duration_ps", preset["production_nemd_ps" if nemd else "production_md_ps"])
    prod.setdefault("sample_interval_ps", 1.0)
    if int(cfg["replicas"]) < 1:
        raise UserError("replicas must be >= 1")
    for stage in (eq, prod):
        if stage["ensemble"] not in ("NVE", "NVT", "NpT"):
            raise UserError(f"unknown ensemble {stage['ensemble']!r}")
    # referenced files must exist and parse
    _forcefield_from(cfg["forcefield"], base)
    if "topology" in system:
        resolve_input(system["topology"], base)
    return cfg


def _system_topology(cfg, ff, base=None):
    system = cfg["system"]
    if "topology" in system:
        path = resolve_input(system["topology"], base)
        return parse_topology(read_text(path), dict(ff.bead_types), path)
    mols, counts = [], []
    for name, count in system["species"].items():
        try:
            mols.append(builtin_species(name))
        except KeyError as exc:
            raise UserError(str(exc)) from None
        counts.append(int(count))
    return Topology(dict(ff.bead_types), mols, counts)


def _integrator(cfg, stage, seed):
    from .engine import IntegratorConfig

    return IntegratorConfig(
        ensemble=stage["ensemble"], dt=float(cfg["dt_ps"]), temperature=float(cfg["temperature_K"]),
        pressure=float(cfg["pressure_bar"]), thermostat_tau=cfg["thermostat_tau_ps"],
        barostat_tau=cfg["barostat_tau_ps"], compressibility=float(cfg["compressibility_per_bar"]),
        seed=int(seed))


def replica_seeds(seed, n):
    ss = np.random.SeedSequence(int(seed))
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n)]


# ---------------------------------------------------------------- replica worker


def _stage_run(state, ff, icfg, duration, sample, forcing, ckpt_every, ckpt_path, metadata,
               resume_from=None):
    """Run one stage (possibly from a checkpoint); returns (simulation, trajectory)."""
    from .engine import Simulation, _steps_for, run
    from .trajio import load_checkpoint

    total = _steps_for(duration, icfg.dt, "duration")
    if resume_from is not None:
        sim, traj = load_checkpoint(resume_from, ff, forcing)
        remaining = (total - sim.state.step) * icfg.dt
        traj = run(sim.state, ff, icfg, max(0.0, remaining), sample, forcing,
                   ckpt_every, ckpt_path, sim=sim, trajectory=traj)
        return sim, traj
    sim = Simulation(state, ff, icfg, forcing=forcing)
    traj = run(state, ff, icfg, duration, sample, forcing, ckpt_every, ckpt_path, sim=sim,
               metadata=metadata)
    return sim, traj


def run_replica(cfg, cfg_hash, ff_text, index, seed, rdir, base=None):
    """Equilibration then production for one replica; returns a status dict."""
    from .engine import NemdForcing, SimulationError, relax_overlaps
    from .potentials import OverlapError
    from .trajio import load_checkpoint, save_checkpoint, write_trajectory

    rdir = Path(rdir)
    rdir.mkdir(parents=True, exist_ok=True)
    status = {"index": index, "seed": seed, "status": "running", "error": "", "stages": {}}
    ff = parse_forcefield(ff_text)
    meta = {"config_hash": cfg_hash, "replica": index, "replica_seed": seed}
    try:
        for name in ("equilibration", "production"):
            stage = cfg[name]
            out = rdir / f"{name}.egt"
            ckpt = rdir / f"{name}.ckpt.npz"
            if out.exists() and (rdir / f"{name}.final.npz").exists():
                status["stages"][name] = {"path": out.name, "sha256": file_hash(out)}
                continue
            icfg = _integrator(cfg, stage, seed)
            forcing = None
            if name == "production" and cfg.get("nemd"):
                forcing = NemdForcing(float(cfg["nemd"]["amplitude_nm_ps2"]))
            every = max(1, int(round(float(cfg["checkpoint_interval_ps"]) / icfg.dt)))
            if ckpt.exists():
                log.info("replica %d: resuming %s from checkpoint", index, name)
                sim, traj = _stage_run(None, ff, icfg, stage["duration_ps"],
                                       stage["sample_interval_ps"], forcing, every, ckpt, meta,
                                       resume_from=ckpt)
            else:
                if name == "equilibration":
                    top = _system_topology(cfg, ff, base)
                    state = build_system(top, float(cfg["system"]["density_g_cm3"]),
                                         float(cfg["temperature_K"]), seed, forcefield=ff,
                                         box_aspect=cfg["system"]["box_aspect"])
                    relax_overlaps(state, ff)
                else:
                    # production starts from the last equilibration record
                    sim0, _ = load_checkpoint(rdir / "equilibration.final.npz", ff)
                    state = sim0.state
                    state.time = 0.0
                    state.step = 0
                    state.thermostat.p_eta = state.thermostat.eta = 0.0
                    state.barostat.p_eps = state.barostat.p_eta = state.barostat.eta = 0.0
                log.info("replica %d: %s %s for %g ps", index, name, stage["ensemble"],
                         stage["duration_ps"])
                sim, traj = _stage_run(state, ff, icfg, stage["duration_ps"],
                                       stage["sample_interval_ps"], forcing, every, ckpt,
                                       dict(meta, stage=name))
            write_trajectory(out, traj)
            save_checkpoint(rdir / f"{name}.final.npz", sim)
            if ckpt.exists():
                ckpt.unlink()
            status["stages"][name] = {"path": out.name, "sha256": file_hash(out)}
        status["status"] = "ok"
    except (SimulationError, OverlapError, FloatingPointError) as exc:
        status["status"] = "failed"
        status["error"] = f"numerical failure: {exc}"
    except (ConfigurationError, TopologyError, FormatError) as exc:
        status["status"] = "failed"
        status["error"] = f"configuration error: {exc}"
    atomic_write(rdir / "status.json", json.dumps(status, indent=2, sort_keys=True))
    return status


def _replica_job(args):
    return run_replica(*args)


# ---------------------------------------------------------------- run


def cmd_run(config_path, resume=False, jobs=None, replicas=None):
    config_path = Path(config_path)
    if not config_path.exists():
        raise UserError(f"{config_path}: file not found")
    raw = load_yaml(config_path)
    if replicas is not None:
        raw["replicas"] = replicas
    cfg = resolve_run_config(raw, base=config_path.parent)
    ff, ff_path = _forcefield_from(cfg["forcefield"], config_path.parent)
    ff_text = emit_forcefield(ff)
    hashed = {"config": cfg, "forcefield": ff_text, "version": __version__}
    cfg_hash = content_hash(hashed)
    outdir = resolve_output(cfg["output"])
    manifest_path = outdir / MANIFEST_NAME
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if resume and old.get("config_hash") == cfg_hash:
            print(f"{outdir}: run already complete; nothing to resume")
            return old
        raise UserError(f"{outdir} already holds a completed run; choose another output")
    stamp = outdir / "config_hash"
    if outdir.exists() and any(outdir.iterdir()):
        if not resume:
            raise UserError(f"{outdir} exists; refusing to overwrite (rerun with --resume "
                            f"to continue the interrupted run)")
        if not stamp.exists() or stamp.read_text().strip() != cfg_hash:
            raise UserError(f"{outdir} was started from a different config; cannot resume")
    outdir.mkdir(parents=True, exist_ok=True)
    atomic_write(stamp, cfg_hash + "\n")
    atomic_write(outdir / "config.resolved.json", canonical_json(cfg) + "\n")
    atomic_write(outdir / "forcefield.ff", ff_text)

    n = int(cfg["replicas"])
    seeds = replica_seeds(cfg["seed"], n)
    tasks = [(cfg, cfg_hash, ff_text, k, seeds[k], str(outdir / f"replica_{k}"),
              str(config_path.parent)) for k in range(n)]
    n_jobs = int(jobs or cfg["jobs"])
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            statuses = list(pool.map(_replica_job, tasks))
    else:
        statuses = [_replica_job(t) for t in tasks]

    artifacts = [{"path": "forcefield.ff", "sha256": file_hash(outdir / "forcefield.ff")}]
    for st in statuses:
        for stage in st["stages"].values():
            artifacts.append({"path": f"replica_{st['index']}/{stage['path']}",
                              "sha256": stage["sha256"]})
    manifest = {
        "kind": "run",
        "toolkit_version": __version__,
        "units": UNITS.as_dict(),
        "config_hash": cfg_hash,
        "hashed": hashed,
        "replicas": statuses,
        "artifacts": artifacts,
    }
    atomic_write(manifest_path, json.dumps(manifest, indent=2, sort_keys=True))
    failed = [s for s in statuses if s["status"] != "ok"]
    for s in failed:
        print(f"replica {s['index']} failed: {s['error']}", file=sys.stderr)
    if failed:
        raise ReplicaFailure(f"{len(failed)} of {n} replicas failed")
    print(f"wrote {manifest_path}")
    return manifest


# ---------------------------------------------------------------- analyze


def _load_manifest(path):
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.exists():
        raise UserError(f"{p}: no manifest")
    return p.parent, json.loads(p.read_text())


def _replica_trajectories(outdir, manifest, stage):
    from .trajio import read_trajectory

    out = []
    for st in manifest["replicas"]:
        if st["status"] != "ok":
            raise UserError(f"replica {st['index']} did not complete; analysis needs all replicas")
        out.append((st["index"], read_trajectory(outdir / f"replica_{st['index']}" / f"{stage}.egt")))
    return out


def _load_scaling(path):
    data = load_yaml(path)
    if "S" not in data:
        raise UserError(f"{path}: scaling file needs an 'S' entry")
    return float(data["S"])


def _mean_stderr(values):
    v = np.asarray(values, dtype=float)
    if v.size == 1:
        return float(v[0]), None
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def cmd_analyze(manifest_path, what, species=None, scaling=None, stage=None, out=None,
                fit_start=None):
    from .analysis import (
        ScalingParams,
        density,
        diffusion_from_msd,
        end_to_end_relaxation,
        msd,
        scale_diffusion,
        scale_viscosity,
        viscosity_from_nemd,
        write_csv,
        write_summary,
    )
    from .engine import NemdForcing

    outdir, manifest = _load_manifest(manifest_path)
    cfg = manifest["hashed"]["config"]
    if stage is None:
        stage = "equilibration" if what == "density" and cfg["production"]["ensemble"] != "NpT" \
            else "production"
    S = _load_scaling(scaling) if scaling else None
    rows = {"replica": []}
    summary = {"analysis": what, "stage": stage, "config_hash": manifest["config_hash"]}
    trajs = _replica_trajectories(outdir, manifest, stage)
    if what == "density":
        vals = []
        for k, tr in trajs:
            t_end = tr.times[-1]
            vals.append(density(tr, (t_end * 0.5, t_end))[0])
            rows["replica"].append(k)
        rows["density_g_cm3"] = vals
        summary["density_g_cm3"] = _mean_stderr(vals)
    elif what == "msd":
        sp = species or "PW"
        n = 3 if sp == "PW" else 1
        cg, warn = [], []
        for k, tr in trajs:
            curve = msd(tr, sp)
            lo = fit_start if fit_start is not None else 0.2 * curve.lags[-1]
            res = diffusion_from_msd(curve, (lo, None))
            cg.append(res.D)
            warn.append(res.warning)
            rows["replica"].append(k)
        rows["D_cg_m2_s"] = cg
        summary["species"] = sp
        summary["D_cg_m2_s"] = _mean_stderr(cg)
        if S is not None:
            aa = [scale_diffusion(d, ScalingParams(S, n)) for d in cg]
            rows["D_aa_m2_s"] = aa
            summary["D_aa_m2_s"] = _mean_stderr(aa)
            summary["S"] = S
        summary["warnings"] = [w for w in warn if w]
    elif what == "viscosity":
        nemd = cfg.get("nemd")
        if not nemd or stage != "production":
            raise UserError("viscosity needs a run with an nemd block (forced production stage)")
        cg = []
        for k, tr in trajs:
            res = viscosity_from_nemd(tr, NemdForcing(float(nemd["amplitude_nm_ps2"])),
                                      discard=float(nemd["discard_ps"]))
            cg.append(res.eta)
            rows["replica"].append(k)
        rows["eta_cg_mPa_s"] = cg
        summary["eta_cg_mPa_s"] = _mean_stderr(cg)
        if S is not None:
            aa = [scale_viscosity(e, S) for e in cg]
            rows["eta_aa_mPa_s"] = aa
            summary["eta_aa_mPa_s"] = _mean_stderr(aa)
            summary["S"] = S
    elif what == "relaxation":
        if not species:
            raise UserError("relaxation needs --species (a chain species)")
        taus = []
        for k, tr in trajs:
            taus.append(end_to_end_relaxation(tr, species).tau)
            rows["replica"].append(k)
        rows["tau_cg_ps"] = taus
        summary["species"] = species
        summary["tau_cg_ps"] = _mean_stderr(taus)
        if S is not None:
            aa = [S * t for t in taus]
            rows["tau_aa_ps"] = aa
            summary["tau_aa_ps"] = _mean_stderr(aa)
    else:
        raise UserError(f"unknown analysis {what!r}")
    for key, val in list(summary.items()):
        if isinstance(val, tuple):
            summary[key] = {"mean": val[0], "stderr": val[1]}
    target = Path(out) if out else outdir / "analysis"
    meta = {"config_hash": manifest["config_hash"], "analysis": what, "stage": stage}
    write_csv(target / f"{what}.csv", meta, rows)
    write_summary(target / f"{what}.summary.yaml", summary)
    print(json.dumps(summary, indent=2, default=str))
    return summary


# ---------------------------------------------------------------- invert


def cmd_invert(traj_path, mapping_path, m=3, temperature=293.0, out=None, base_ff=None,
               bond_patterns=("PA-PA", "PA-PB", "PB-PB"),
               angle_patterns=("PA-PB-PA", "PA-PB-PB", "PB-PB-PB"), seed=0):
    """Bonded mixture parameters from an atomistic trajectory; returns the force field."""
    from .analysis import write_csv
    from .inversion import (
        bond_angles,
        bond_lengths,
        boltzmann_invert,
        fit_histogram,
        histogram_values,
        map_frame,
        renormalize,
    )
    from .trajio import read_xyz

    traj_path = resolve_input(traj_path)
    mapping = load_mapping(resolve_input(mapping_path))
    _, boxes, names, pos, _ = read_xyz(traj_path)
    if pos.shape[1] != mapping.n_atoms:
        raise UserError(f"{traj_path}: {pos.shape[1]} atoms per frame, mapping expects "
                        f"{mapping.n_atoms}")
    beads = map_frame(pos, mapping.masses_array(), mapping)
    box = boxes[0]
    ff, _ = _forcefield_from(base_ff or "ego_water_293K")
    hashed = {"trajectory_sha256": file_hash(traj_path),
              "mapping_sha256": file_hash(resolve_input(mapping_path)),
              "base_forcefield": emit_forcefield(ff), "m": m, "temperature_K": temperature,
              "seed": seed, "bond_patterns": list(bond_patterns),
              "angle_patterns": list(angle_patterns)}
    text_hash = content_hash(hashed)
    fits = {}
    outdir = resolve_output(out) if out else None
    for kind, instances in (("bond", mapping.bonds), ("angle", mapping.angles)):
        if not instances:
            continue
        vals = bond_lengths(beads, instances, box) if kind == "bond" else \
            bond_angles(beads, instances, box)
        h = renormalize(histogram_values(vals.ravel(), kind))
        fit = fit_histogram(h, m=m, temperature=temperature, seed=seed)
        fits[kind] = fit
        if outdir is not None:
            tab = boltzmann_invert(h, temperature)
            unit = "nm" if kind == "bond" else "deg"
            write_csv(outdir / f"{kind}_histogram.csv",
                      {"config_hash": text_hash, "kind": kind, "unit": unit,
                       "residual_norm": fit.residual_norm},
                      {"q": h.centers, "count": h.counts, "P": h.P, "U_kJ_mol": tab.U})
    bonds = dict(ff.bond_potentials)
    angles = dict(ff.angle_potentials)
    if "bond" in fits:
        for p in bond_patterns:
            bonds[tuple(p.split("-"))] = fits["bond"].params
    if "angle" in fits:
        for p in angle_patterns:
            angles[tuple(p.split("-"))] = fits["angle"].params
    new = dataclasses.replace(ff, bond_potentials=bonds, angle_potentials=angles)
    comments = [f"config_hash: {text_hash}",
                f"bonded mixtures fitted with m={m} at {temperature} K from {traj_path.name}"]
    text = emit_forcefield(new, comments)
    if outdir is not None:
        atomic_write(outdir / "inverted.ff", text)
        _write_artifact_manifest(outdir, "invert", text_hash, hashed,
                                 ["inverted.ff"] + [f"{k}_histogram.csv" for k in fits])
    else:
        sys.stdout.write(text)
    return new, fits


def _write_artifact_manifest(outdir, kind, cfg_hash, config, files):
    manifest = {"kind": kind, "toolkit_version": __version__, "units": UNITS.as_dict(),
                "config_hash": cfg_hash, "hashed": config,
                "artifacts": [{"path": f, "sha256": file_hash(outdir / f)} for f in files]}
    atomic_write(outdir / MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


# ---------------------------------------------------------------- calibrate


def cmd_calibrate(manifest_path, out, base_ff=None, mode=None):
    from .analysis import write_csv, write_summary
    from .calibrate import run_manifest

    manifest_path = resolve_input(manifest_path)
    cal = load_yaml(manifest_path)
    if mode:
        cal["mode"] = mode
    ff, _ = _forcefield_from(base_ff or "ego_water_293K")
    hashed = {"calibration": cal, "forcefield": emit_forcefield(ff), "version": __version__}
    cfg_hash = content_hash(hashed)
    outdir = resolve_output(out)
    stamp = outdir / "config_hash"
    if stamp.exists() and stamp.read_text().strip() != cfg_hash:
        raise UserError(f"{outdir} holds a calibration with a different manifest")
    outdir.mkdir(parents=True, exist_ok=True)
    atomic_write(stamp, cfg_hash + "\n")
    final, reports, S = run_manifest(cal, ff, cache_dir=outdir / "cache")
    files = []
    for rep in reports:
        name = f"step{rep.step}"
        meta = {"config_hash": cfg_hash, "step": rep.step, "parameter": rep.parameter,
                "selected": rep.selected}
        if rep.grid:
            write_csv(outdir / f"{name}.csv", meta, rep.csv_columns())
            files.append(f"{name}.csv")
        for j, sub in enumerate(rep.trace):
            if hasattr(sub, "grid"):
                write_csv(outdir / f"{name}_search{j + 1}.csv",
                          {"config_hash": cfg_hash, "step": sub.step, "parameter": sub.parameter,
                           "selected": sub.selected, "fixed": ",".join(sub.flags)},
                          sub.csv_columns())
                files.append(f"{name}_search{j + 1}.csv")
    summary = {"config_hash": cfg_hash, "S": S,
               "reports": [json.loads(json.dumps(r.to_dict(), default=float)) for r in reports]}
    write_summary(outdir / "calibration.summary.yaml", summary)
    files.append("calibration.summary.yaml")
    comments = [f"config_hash: {cfg_hash}", f"calibrated from {manifest_path.name}",
                f"time mapping S = {S!r}"]
    comments += [f"step {r.step}: {r.parameter} = {r.selected}"
                 + (f" [{', '.join(r.flags)}]" if "NOT_CONVERGED" in r.flags else "")
                 for r in reports]
    atomic_write(outdir / "calibrated.ff", emit_forcefield(final, comments))
    files.append("calibrated.ff")
    _write_artifact_manifest(outdir, "calibrate", cfg_hash, hashed, files)
    print(f"S = {S:.4f}")
    for b in final.bead_types.values():
        print(f"{b.name}: sigma = {b.sigma} nm, epsilon = {b.epsilon:.4f} kJ/mol")
    print(f"gamma(PB-PW) = {final.mixing.gamma('PB', 'PW')}")
    return final, reports, S


# ---------------------------------------------------------------- verify and export


def cmd_verify(path):
    """Re-hash the manifest config and every artifact; returns a list of problems."""
    from .trajio import read_header

    outdir, manifest = _load_manifest(path)
    problems = []
    if content_hash(manifest["hashed"]) != manifest["config_hash"]:
        problems.append("config hash does not match the recorded config")
    h = manifest["config_hash"]
    for art in manifest.get("artifacts", []):
        p = outdir / art["path"]
        if not p.exists():
            problems.append(f"{art['path']}: missing")
            continue
        if file_hash(p) != art["sha256"]:
            problems.append(f"{art['path']}: content hash mismatch")
            continue
        if p.suffix == ".egt":
            embedded = read_header(p)[0]["metadata"].get("config_hash")
        elif p.name == "forcefield.ff":
            embedded = h  # copy of the input; its text is part of the hashed config
            if emit_forcefield(load_forcefield(p)) != manifest["hashed"]["forcefield"]:
                problems.append(f"{art['path']}: differs from the hashed force field")
        else:
            embedded = h if h in p.read_text() else None
        if embedded != h:
            problems.append(f"{art['path']}: embedded config hash missing or different")
    for p in sorted((outdir / "analysis").glob("*")) if (outdir / "analysis").exists() else []:
        if h not in p.read_text():
            problems.append(f"analysis/{p.name}: embedded config hash missing or different")
    for msg in problems:
        print(msg, file=sys.stderr)
    if not problems:
        print(f"{outdir}: OK ({len(manifest.get('artifacts', []))} artifacts, config {h[:12]})")
    return problems


def cmd_export(traj, out, replica=0, stage="production", wrapped=False):
    from .trajio import export_xyz, read_trajectory

    p = Path(traj)
    if p.is_dir() or p.name == MANIFEST_NAME:
        outdir, _ = _load_manifest(p)
        p = outdir / f"replica_{replica}" / f"{stage}.egt"
    if not p.exists():
        raise UserError(f"{p}: file not found")
    tr = read_trajectory(p)
    export_xyz(tr, resolve_output(out), unwrapped=not wrapped)
    print(f"wrote {len(tr)} frames to {resolve_output(out)}")


# ---------------------------------------------------------------- argparse


def build_parser():
    ap = argparse.ArgumentParser(prog="egocg", description="EGO/water coarse-grained MD toolkit")
    ap.add_argument("--version", action="version", version=f"egocg {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="replica MD/NEMD runs from a YAML config")
    p.add_argument("config")
    p.add_argument("--resume", action="store_true", help="continue an interrupted run")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("--replicas", type=int)

    p = sub.add_parser("analyze", help="replica-averaged observables from a run manifest")
    p.add_argument("manifest")
    p.add_argument("what", choices=["density", "msd", "viscosity", "relaxation"])
    p.add_argument("--species")
    p.add_argument("--scaling", help="YAML file with the time-mapping factor S")
    p.add_argument("--stage", choices=["equilibration", "production"])
    p.add_argument("--fit-start", type=float, help="MSD fit window start (ps)")
    p.add_argument("--out")

    p = sub.add_parser("invert", help="bonded mixture potentials from an atomistic trajectory")
    p.add_argument("trajectory", help="XYZ file (or 'tegde.xyz' for the bundled fixture)")
    p.add_argument("mapping", help="mapping file (or 'tegde.map')")
    p.add_argument("-m", type=int, default=3, help="Gaussian components")
    p.add_argument("--temperature", type=float, default=293.0, help="K")
    p.add_argument("--forcefield", help="force field whose bonded blocks are replaced")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (default: print to stdout)")

    p = sub.add_parser("calibrate", help="density/diffusion parameterization from a manifest")
    p.add_argument("manifest", help="YAML manifest (bundled: paper_targets.yaml, "
                                    "surrogate_targets.yaml)")
    p.add_argument("--out", required=True)
    p.add_argument("--forcefield")
    p.add_argument("--mode", choices=["desk", "paper", "surrogate"])

    p = sub.add_parser("verify", help="re-hash a run/calibration/inversion output directory")
    p.add_argument("path")

    p = sub.add_parser("export", help="trajectory to extended XYZ text")
    p.add_argument("trajectory", help=".egt file or run directory")
    p.add_argument("out")
    p.add_argument("--replica", type=int, default=0)
    p.add_argument("--stage", default="production", choices=["equilibration", "production"])
    p.add_argument("--wrapped", action="store_true")
    return ap


def main(argv=None):
    from .calibrate import CalibrationError
    from .engine import SimulationError
    from .inversion import FitError, InversionError
    from .analysis import AnalysisError
    from .potentials import OverlapError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cmd_run(args.config, args.resume, args.jobs, args.replicas)
        elif args.command == "analyze":
            cmd_analyze(args.manifest, args.what, args.species, args.scaling, args.stage,
                        args.out, args.fit_start)
        elif args.command == "invert":
            cmd_invert(args.trajectory, args.mapping, args.m, args.temperature, args.out,
                       args.forcefield, seed=args.seed)
        elif args.command == "calibrate":
            cmd_calibrate(args.manifest, args.out, args.forcefield, args.mode)
        elif args.command == "verify":
            return EXIT_USER if cmd_verify(args.path) else EXIT_OK
        elif args.command == "export":
            cmd_export(args.trajectory, args.out, args.replica, args.stage, args.wrapped)
    except ReplicaFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except (SimulationError, OverlapError, FitError, CalibrationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, ConfigurationError, TopologyError, FormatError, InversionError,
            AnalysisError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
