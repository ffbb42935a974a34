"""Regenerate the bundled synthetic TEGDE trajectory and its mapping file."""

import argparse
from pathlib import Path

from egocg.formats import atomic_write, emit_mapping
from egocg.inversion import synthetic_tegde
from egocg.potentials import bundled_forcefield

DATA = Path(__file__).resolve().parents[1] / "src" / "egocg" / "data"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=20)
    ap.add_argument("--out", type=Path, default=DATA)
    args = ap.parse_args()

    ff = bundled_forcefield()
    atoms, _, mapping, _ = synthetic_tegde(args.frames, ff.bond_potential("PB", "PB"),
                                           ff.angle_potential("PB", "PB", "PB"), seed=args.seed)
    names = [mapping.atom_names[i] for i in range(mapping.n_atoms)]
    lines = []
    for f, frame in enumerate(atoms):
        # gas-phase frames: no lattice, positions only
        lines.append(f"{len(names)}")
        lines.append(f"Time={float(f):.1f} Properties=species:S:1:pos:R:3 units=nm,ps")
        lines.extend(f"{n} {x:.5f} {y:.5f} {z:.5f}" for n, (x, y, z) in zip(names, frame))
    atomic_write(args.out / "tegde.xyz", "\n".join(lines) + "\n")
    atomic_write(args.out / "tegde.map", emit_mapping(mapping))


if __name__ == "__main__":
    main()
