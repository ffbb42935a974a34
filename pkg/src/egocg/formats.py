"""Readers and writers for the sectioned text formats.

Force-field (``.ff``), topology (``.top``) and CG mapping (``.map``) files share
one layout: ``[ section args ]`` headers followed by whitespace-separated rows.
``;`` and ``#`` start comments. Every physical quantity carries its unit in the
key or in the documented column order. Writers emit ``repr`` floats so files
round-trip exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .core import BeadType, MixingRule, MoleculeTemplate, Topology, builtin_species

FORMAT_VERSION = 1


class FormatError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass
class Section:
    name: str
    args: list
    line: int
    rows: list = field(default_factory=list)  # (lineno, tokens)


def parse_sections(text, path=None):
    sections = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise FormatError("unterminated section header", path, lineno)
            tokens = line[1:-1].split()
            if not tokens:
                raise FormatError("empty section header", path, lineno)
            current = Section(tokens[0].lower(), tokens[1:], lineno)
            sections.append(current)
            continue
        if current is None:
            raise FormatError("data before first section header", path, lineno)
        current.rows.append((lineno, line.split()))
    return sections


def _float(tok, path, line, what):
    try:
        return float(tok)
    except ValueError:
        raise FormatError(f"expected number for {what}, got {tok!r}", path, line) from None


def _int(tok, path, line, what):
    try:
        return int(tok)
    except ValueError:
        raise FormatError(f"expected integer for {what}, got {tok!r}", path, line) from None


def read_text(path):
    path = Path(path)
    if not path.exists():
        raise FormatError("file not found", path)
    return path.read_text()


def bundled_path(name):
    return Path(str(resources.files("egocg") / "data" / name))


# ---------------------------------------------------------------- force field


def parse_forcefield(text, path=None):
    from .potentials import ForceField, MixturePotentialParams

    name = Path(path).stem if path else "forcefield"
    r_cut = 1.4
    beads, mixing, bonds, angles = {}, MixingRule(), {}, {}
    for sec in parse_sections(text, path):
        if sec.name == "forcefield":
            if sec.args:
                name = sec.args[0]
            for ln, tok in sec.rows:
                if tok[0] == "r_cut_nm" and len(tok) == 2:
                    r_cut = _float(tok[1], path, ln, "r_cut_nm")
                else:
                    raise FormatError(f"unknown forcefield key {tok[0]!r}", path, ln)
        elif sec.name == "beadtypes":
            for ln, tok in sec.rows:
                if len(tok) != 4:
                    raise FormatError("beadtypes row needs: name mass_amu sigma_nm epsilon_kJmol",
                                      path, ln)
                try:
                    beads[tok[0]] = BeadType(tok[0], _float(tok[1], path, ln, "mass"),
                                             _float(tok[2], path, ln, "sigma"),
                                             _float(tok[3], path, ln, "epsilon"))
                except ValueError as exc:
                    if isinstance(exc, FormatError):
                        raise
                    raise FormatError(str(exc), path, ln) from None
        elif sec.name == "mixing":
            for ln, tok in sec.rows:
                if len(tok) != 3:
                    raise FormatError("mixing row needs: type_i type_j gamma", path, ln)
                mixing.set(tok[0], tok[1], _float(tok[2], path, ln, "gamma"))
        elif sec.name in ("bond", "angle"):
            if not sec.args:
                raise FormatError(f"{sec.name} section needs type patterns", path, sec.line)
            temperature = None
            rows = []
            for ln, tok in sec.rows:
                if tok[0] == "temperature_K":
                    temperature = _float(tok[1], path, ln, "temperature_K")
                elif len(tok) == 3:
                    rows.append([_float(t, path, ln, "A/mu/xi") for t in tok])
                else:
                    raise FormatError("mixture row needs: A mu xi", path, ln)
            if temperature is None:
                raise FormatError("mixture block lacks temperature_K", path, sec.line)
            if not rows:
                raise FormatError("mixture block has no components", path, sec.line)
            try:
                pot = MixturePotentialParams(sec.name, [r[0] for r in rows], [r[1] for r in rows],
                                             [r[2] for r in rows], temperature)
            except ValueError as exc:
                raise FormatError(str(exc), path, sec.line) from None
            target = bonds if sec.name == "bond" else angles
            want = 2 if sec.name == "bond" else 3
            for pattern in sec.args:
                names = tuple(pattern.split("-"))
                if len(names) != want:
                    raise FormatError(f"bad {sec.name} pattern {pattern!r}", path, sec.line)
                target[names] = pot
        else:
            raise FormatError(f"unknown section [{sec.name}]", path, sec.line)
    if not beads:
        raise FormatError("no [ beadtypes ] section", path)
    for key in mixing.overrides:
        for t in key:
            if t not in beads:
                raise FormatError(f"mixing override references unknown type {t!r}", path)
    return ForceField(name, beads, mixing, bonds, angles, r_cut)


def load_forcefield(path):
    path = Path(path)
    if not path.suffix and not path.exists():
        candidate = bundled_path(f"{path.name}.ff")
        if candidate.exists():
            path = candidate
    return parse_forcefield(read_text(path), path)


def emit_forcefield(ff, comments=()):
    lines = [f"; egocg force field, format version {FORMAT_VERSION}"]
    lines.extend(f"; {c}" for c in list(ff.comments) + list(comments))
    lines.append(f"[ forcefield {ff.name} ]")
    lines.append(f"r_cut_nm {ff.r_cut!r}")
    lines.append("")
    lines.append("[ beadtypes ]")
    lines.append("; name  mass_amu  sigma_nm  epsilon_kJmol")
    for b in ff.bead_types.values():
        lines.append(f"{b.name} {b.mass!r} {b.sigma!r} {b.epsilon!r}")
    if ff.mixing.overrides:
        lines.append("")
        lines.append("[ mixing ]")
        lines.append("; type_i type_j gamma")
        for a, b, g in ff.mixing.pairs():
            lines.append(f"{a} {b} {g!r}")
    for kind, pots, unit in (("bond", ff.bond_potentials, "nm"),
                             ("angle", ff.angle_potentials, "deg")):
        groups = {}
        for key, pot in pots.items():
            groups.setdefault(pot, []).append("-".join(key))
        for pot, patterns in groups.items():
            lines.append("")
            lines.append(f"[ {kind} {' '.join(sorted(patterns))} ]")
            lines.append(f"temperature_K {pot.temperature_ref!r}")
            lines.append(f"; A  mu_{unit}  xi_{unit}")
            for a, mu, xi in zip(pot.A, pot.mu, pot.xi):
                lines.append(f"{a!r} {mu!r} {xi!r}")
    return "\n".join(lines) + "\n"


def save_forcefield(ff, path, comments=()):
    atomic_write(path, emit_forcefield(ff, comments))


# ---------------------------------------------------------------- topology


def parse_topology(text, bead_types, path=None):
    templates = {}
    system = []
    for sec in parse_sections(text, path):
        if sec.name == "molecule":
            if len(sec.args) != 1:
                raise FormatError("molecule section needs a name", path, sec.line)
            name = sec.args[0]
            beads, bonds, angles, npb = [], [], [], 1
            for ln, tok in sec.rows:
                key, vals = tok[0], tok[1:]
                if key == "beads":
                    beads = vals
                elif key == "bonds":
                    bonds = [tuple(_int(x, path, ln, "bond index") for x in v.split("-"))
                             for v in vals]
                elif key == "angles":
                    angles = [tuple(_int(x, path, ln, "angle index") for x in v.split("-"))
                              for v in vals]
                elif key == "n_per_bead":
                    npb = _int(vals[0], path, ln, "n_per_bead")
                else:
                    raise FormatError(f"unknown molecule key {key!r}", path, ln)
            templates[name] = MoleculeTemplate(name, beads, bonds, angles, npb)
        elif sec.name == "system":
            for ln, tok in sec.rows:
                if len(tok) != 2:
                    raise FormatError("system row needs: species count", path, ln)
                system.append((tok[0], _int(tok[1], path, ln, "count"), ln))
        else:
            raise FormatError(f"unknown section [{sec.name}]", path, sec.line)
    molecules, counts = [], []
    for name, count, ln in system:
        if name in templates:
            tmpl = templates[name]
        else:
            try:
                tmpl = builtin_species(name)
            except KeyError:
                raise FormatError(f"unknown species {name!r}", path, ln) from None
        molecules.append(tmpl)
        counts.append(count)
    top = Topology(dict(bead_types), molecules, counts)
    try:
        top.validate()
    except ValueError as exc:
        raise FormatError(str(exc), path) from None
    return top


def emit_topology(top):
    lines = [f"; egocg topology, format version {FORMAT_VERSION}"]
    for m in top.molecules:
        lines.append(f"[ molecule {m.name} ]")
        lines.append(f"n_per_bead {m.molecules_per_bead}")
        lines.append("beads " + " ".join(m.beads))
        if m.bonds:
            lines.append("bonds " + " ".join(f"{i}-{j}" for i, j in m.bonds))
        if m.angles:
            lines.append("angles " + " ".join(f"{i}-{j}-{k}" for i, j, k in m.angles))
        lines.append("")
    lines.append("[ system ]")
    for m, c in zip(top.molecules, top.counts):
        lines.append(f"{m.name} {c}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- CG mapping


def parse_mapping(text, path=None):
    from .inversion import CgMapping

    masses = {}
    groups, names, bonds, angles = [], [], [], []
    for sec in parse_sections(text, path):
        if sec.name == "atoms":
            for ln, tok in sec.rows:
                if len(tok) != 3:
                    raise FormatError("atoms row needs: index name mass_amu", path, ln)
                masses[_int(tok[0], path, ln, "atom index")] = (
                    tok[1], _float(tok[2], path, ln, "mass"))
        elif sec.name == "beads":
            for ln, tok in sec.rows:
                if len(tok) < 2:
                    raise FormatError("beads row needs: name atom[:weight] ...", path, ln)
                members = []
                for item in tok[1:]:
                    idx, _, w = item.partition(":")
                    members.append((_int(idx, path, ln, "atom index"),
                                    _float(w, path, ln, "weight") if w else 1.0))
                names.append(tok[0])
                groups.append(members)
        elif sec.name == "bonds":
            for ln, tok in sec.rows:
                if len(tok) != 2:
                    raise FormatError("bonds row needs two bead indices", path, ln)
                bonds.append(tuple(_int(t, path, ln, "bead index") for t in tok))
        elif sec.name == "angles":
            for ln, tok in sec.rows:
                if len(tok) != 3:
                    raise FormatError("angles row needs three bead indices", path, ln)
                angles.append(tuple(_int(t, path, ln, "bead index") for t in tok))
        else:
            raise FormatError(f"unknown section [{sec.name}]", path, sec.line)
    if not groups:
        raise FormatError("no [ beads ] section", path)
    try:
        mapping = CgMapping(groups, names=names, bonds=bonds, angles=angles,
                            atom_masses={k: v[1] for k, v in masses.items()},
                            atom_names={k: v[0] for k, v in masses.items()})
    except ValueError as exc:
        raise FormatError(str(exc), path) from None
    return mapping


def load_mapping(path):
    return parse_mapping(read_text(path), path)


def emit_mapping(mapping):
    lines = [f"; egocg CG mapping, format version {FORMAT_VERSION}"]
    if mapping.atom_masses:
        lines.append("[ atoms ]")
        lines.append("; index name mass_amu")
        for k in sorted(mapping.atom_masses):
            lines.append(f"{k} {mapping.atom_names.get(k, 'X')} {mapping.atom_masses[k]!r}")
    lines.append("[ beads ]")
    for name, members in zip(mapping.names, mapping.groups):
        lines.append(name + " " + " ".join(f"{a}:{w!r}" for a, w in members))
    if mapping.bonds:
        lines.append("[ bonds ]")
        lines.extend(f"{i} {j}" for i, j in mapping.bonds)
    if mapping.angles:
        lines.append("[ angles ]")
        lines.extend(f"{i} {j} {k}" for i, j, k in mapping.angles)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- YAML / JSON


def load_yaml(path):
    path = Path(path)
    if not path.exists():
        raise FormatError("file not found", path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        line = getattr(getattr(exc, "problem_mark", None), "line", None)
        raise FormatError(f"invalid YAML: {exc}", path, None if line is None else line + 1) from None
    if not isinstance(data, dict):
        raise FormatError("top level must be a mapping", path)
    return data


def dump_yaml(data):
    return yaml.safe_dump(data, sort_keys=False)


def canonical_json(data):
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def content_hash(data):
    """SHA-256 of the canonical JSON form of ``data``."""
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write(path, data):
    """Write text or bytes via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
