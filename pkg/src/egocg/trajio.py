"""Trajectory and checkpoint files.

Binary trajectory layout (little-endian)::

    magic  b"EGOCGTRJ"
    uint32 format version
    uint64 header length, then UTF-8 JSON header
    frames: time, box[3], unwrapped[N, 3], velocities[N, 3], observables[K]  (float64)

The header carries the unit system, bead count, frame count, sample interval,
topology and run metadata, so a file can be read without any other input.
Text export uses extended XYZ: one comment line per frame with ``Time``
and ``Lattice`` keys, then ``name x y z vx vy vz`` rows in nm and nm/ps.
"""

from __future__ import annotations

import io
import json
import shlex
import struct
from pathlib import Path

import numpy as np

from .core import UNITS, BeadType, MoleculeTemplate, Topology
from .formats import FormatError, atomic_write

MAGIC = b"EGOCGTRJ"
TRAJ_VERSION = 1
CHECKPOINT_VERSION = 1


def topology_to_dict(top):
    return {
        "bead_types": [[b.name, b.mass, b.sigma, b.epsilon] for b in top.bead_types.values()],
        "molecules": [
            {"name": m.name, "beads": list(m.beads), "bonds": [list(b) for b in m.bonds],
             "angles": [list(a) for a in m.angles], "n_per_bead": m.molecules_per_bead}
            for m in top.molecules
        ],
        "counts": list(top.counts),
    }


def topology_from_dict(d):
    types = {row[0]: BeadType(*row) for row in d["bead_types"]}
    mols = [MoleculeTemplate(m["name"], m["beads"], [tuple(b) for b in m["bonds"]],
                             [tuple(a) for a in m["angles"]], m["n_per_bead"])
            for m in d["molecules"]]
    return Topology(types, mols, list(d["counts"]))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


def write_trajectory(path, traj):
    n = traj.n_beads
    obs_names = sorted(traj.observables)
    header = {
        "units": UNITS.as_dict(),
        "n_beads": n,
        "n_frames": len(traj),
        "sample_interval_ps": traj.sample_interval,
        "observables": obs_names,
        "topology": topology_to_dict(traj.topology.topology),
        "metadata": traj.metadata,
    }
    hbytes = json.dumps(header, default=_json_default, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", TRAJ_VERSION, len(hbytes)))
    buf.write(hbytes)
    obs = np.column_stack([traj.observable(k) for k in obs_names]) if obs_names else None
    for i in range(len(traj)):
        row = [np.array([traj.times[i]]), np.asarray(traj.boxes[i]).ravel(),
               np.asarray(traj.unwrapped[i]).ravel(), np.asarray(traj.velocities[i]).ravel()]
        if obs is not None:
            row.append(obs[i])
        buf.write(np.concatenate(row).astype("<f8").tobytes())
    atomic_write(path, buf.getvalue())


def read_header(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError("not an egocg trajectory (bad magic)", path)
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version > TRAJ_VERSION:
            raise FormatError(f"trajectory version {version} is newer than supported", path)
        header = json.loads(fh.read(hlen).decode())
        offset = fh.tell()
    return header, offset


def read_trajectory(path):
    from .engine import Trajectory

    header, offset = read_header(path)
    n = header["n_beads"]
    names = header["observables"]
    width = 1 + 3 + 6 * n + len(names)
    data = np.fromfile(path, dtype="<f8", offset=offset)
    if data.size != width * header["n_frames"]:
        raise FormatError(f"truncated trajectory: {data.size} values, expected "
                          f"{width * header['n_frames']}", path)
    data = data.reshape(header["n_frames"], width)
    exp = topology_from_dict(header["topology"]).expand()
    traj = Trajectory(exp, sample_interval=header["sample_interval_ps"],
                      metadata=header["metadata"])
    traj.times = data[:, 0].tolist()
    traj.boxes = list(data[:, 1:4].copy())
    traj.unwrapped = list(data[:, 4:4 + 3 * n].reshape(-1, n, 3).copy())
    traj.velocities = list(data[:, 4 + 3 * n:4 + 6 * n].reshape(-1, n, 3).copy())
    for k, name in enumerate(names):
        traj.observables[name] = data[:, 4 + 6 * n + k].tolist()
    return traj


# ---------------------------------------------------------------- extended XYZ


def _xyz_comment(time, box, extra=None):
    parts = [f"Time={float(time)!r}"]
    if box is not None:
        lx, ly, lz = (float(x) for x in box)
        parts.append(f'Lattice="{lx!r} 0.0 0.0 0.0 {ly!r} 0.0 0.0 0.0 {lz!r}"')
    parts.append("Properties=species:S:1:pos:R:3:velo:R:3")
    parts.append("units=nm,ps")
    for k, v in (extra or {}).items():
        parts.append(f"{k}={v}")
    return " ".join(parts)


def write_xyz_frame(fh, names, positions, velocities=None, time=0.0, box=None, extra=None):
    n = len(positions)
    fh.write(f"{n}\n{_xyz_comment(time, box, extra)}\n")
    vel = np.zeros_like(positions) if velocities is None else velocities
    for name, r, v in zip(names, positions, vel):
        x, y, z = (float(c) for c in r)
        vx, vy, vz = (float(c) for c in v)
        fh.write(f"{name} {x!r} {y!r} {z!r} {vx!r} {vy!r} {vz!r}\n")


def export_xyz(traj, path, unwrapped=True):
    """Write every frame of a Trajectory as extended XYZ text."""
    exp = traj.topology
    names = [exp.type_names[t] for t in exp.types]
    buf = io.StringIO()
    for i in range(len(traj)):
        pos = traj.unwrapped[i] if unwrapped else traj.wrapped(i)
        write_xyz_frame(buf, names, pos, traj.velocities[i], traj.times[i], traj.boxes[i],
                        {"unwrapped": "T" if unwrapped else "F"})
    atomic_write(path, buf.getvalue())


def _parse_comment(line, path, lineno):
    try:
        items = shlex.split(line)
    except ValueError as exc:
        raise FormatError(f"bad XYZ comment line: {exc}", path, lineno) from None
    out = {}
    for item in items:
        key, sep, val = item.partition("=")
        if sep:
            out[key] = val
    return out


def iter_xyz(path):
    """Yield (time, box or None, names, positions, velocities or None) per frame."""
    path = Path(path)
    if not path.exists():
        raise FormatError("file not found", path)
    with open(path) as fh:
        lineno = 0
        frame = 0
        while True:
            line = fh.readline()
            lineno += 1
            if not line:
                return
            if not line.strip():
                continue
            try:
                n = int(line.strip())
            except ValueError:
                raise FormatError(f"expected atom count, got {line.strip()!r}", path, lineno) from None
            comment = fh.readline()
            lineno += 1
            meta = _parse_comment(comment, path, lineno)
            time = float(meta.get("Time", frame))
            box = None
            if "Lattice" in meta:
                lat = np.array(meta["Lattice"].split(), dtype=float).reshape(3, 3)
                if np.count_nonzero(lat - np.diag(np.diag(lat))):
                    raise FormatError("only orthorhombic lattices are supported", path, lineno)
                box = np.diag(lat).copy()
            names = []
            pos = np.empty((n, 3))
            vel = np.empty((n, 3))
            has_vel = True
            for a in range(n):
                row = fh.readline()
                lineno += 1
                tok = row.split()
                if len(tok) < 4:
                    raise FormatError(f"atom row needs name x y z, got {row.strip()!r}",
                                      path, lineno)
                names.append(tok[0])
                try:
                    pos[a] = [float(t) for t in tok[1:4]]
                    if len(tok) >= 7:
                        vel[a] = [float(t) for t in tok[4:7]]
                    else:
                        has_vel = False
                except ValueError:
                    raise FormatError(f"non-numeric coordinate in {row.strip()!r}",
                                      path, lineno) from None
            yield time, box, names, pos, (vel if has_vel else None)
            frame += 1


def read_xyz(path):
    """All frames of an XYZ file as (times, boxes, names, positions[F, N, 3], velocities)."""
    times, boxes, pos, vel = [], [], [], []
    names = None
    for t, box, nm, r, v in iter_xyz(path):
        if names is None:
            names = nm
        elif len(nm) != len(names):
            raise FormatError("atom count changes between frames", path)
        times.append(t)
        boxes.append(box)
        pos.append(r)
        vel.append(v)
    if names is None:
        raise FormatError("no frames", path)
    velocities = None if any(v is None for v in vel) else np.asarray(vel)
    return np.asarray(times), boxes, names, np.asarray(pos), velocities


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, sim, trajectory=None, extra=None):
    """Everything needed for a bit-exact resume of ``sim`` (and its trajectory)."""
    st = sim.state
    meta = {
        "version": CHECKPOINT_VERSION,
        "time": st.time,
        "step": st.step,
        "thermostat": [st.thermostat.p_eta, st.thermostat.eta],
        "barostat": [st.barostat.p_eps, st.barostat.p_eta, st.barostat.eta],
        "Q": sim.Q if np.isfinite(sim.Q) else None,
        "W": sim.W if np.isfinite(sim.W) else None,
        "forcing_l_z": None if sim.forcing is None else sim.forcing.l_z,
        "n_builds": sim.nlist.n_builds,
        "topology": topology_to_dict(st.topology.topology),
        "config": sim.cfg.as_dict(),
        "extra": extra or {},
    }
    arrays = {
        "positions": st.positions,
        "velocities": st.velocities,
        "images": st.images,
        "box": st.box,
        "pairs_i": sim.nlist.pairs[0],
        "pairs_j": sim.nlist.pairs[1],
        "ref_positions": sim.nlist.ref_positions,
        "ref_box": sim.nlist.ref_box,
        "forces": sim.forces,
    }
    if trajectory is not None and len(trajectory):
        meta["trajectory"] = {
            "sample_interval": trajectory.sample_interval,
            "metadata": trajectory.metadata,
            "observables": sorted(trajectory.observables),
        }
        arrays["traj_times"] = trajectory.time_array()
        arrays["traj_boxes"] = trajectory.box_array()
        arrays["traj_unwrapped"] = trajectory.unwrapped_array()
        arrays["traj_velocities"] = trajectory.velocity_array()
        for k in trajectory.observables:
            arrays[f"obs_{k}"] = trajectory.observable(k)
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta, default=_json_default).encode(),
                                     dtype=np.uint8), **arrays)
    atomic_write(path, buf.getvalue())


def load_checkpoint(path, ff, forcing=None, backend=None):
    """Rebuild (Simulation, Trajectory or None) from a checkpoint file."""
    from .core import BarostatState, SystemState, ThermostatState
    from .engine import IntegratorConfig, Simulation, Trajectory

    path = Path(path)
    if not path.exists():
        raise FormatError("checkpoint not found", path)
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        arr = {k: z[k] for k in z.files if k != "meta"}
    if meta["version"] > CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint version {meta['version']} unsupported", path)
    exp = topology_from_dict(meta["topology"]).expand()
    state = SystemState(arr["positions"], arr["velocities"], arr["box"], exp,
                        images=arr["images"].astype(np.int64),
                        thermostat=ThermostatState(*meta["thermostat"]),
                        barostat=BarostatState(*meta["barostat"]),
                        time=meta["time"], step=meta["step"])
    cfg = IntegratorConfig(**meta["config"])
    if forcing is not None and meta["forcing_l_z"] is not None:
        forcing.l_z = meta["forcing_l_z"]
    sim = Simulation.__new__(Simulation)
    sim._restore(state, ff, cfg, forcing, backend, meta, arr)
    traj = None
    if "trajectory" in meta:
        tm = meta["trajectory"]
        traj = Trajectory(exp, sample_interval=tm["sample_interval"], metadata=tm["metadata"])
        traj.times = arr["traj_times"].tolist()
        traj.boxes = list(arr["traj_boxes"])
        traj.unwrapped = list(arr["traj_unwrapped"])
        traj.velocities = list(arr["traj_velocities"])
        for k in tm["observables"]:
            traj.observables[k] = arr[f"obs_{k}"].tolist()
    return sim, traj
