"""Compare the compiled and numpy kernel backends on water and EGO13/water systems.

Times one pair-list build and one force evaluation per backend and checks
that both backends return the same pairs and forces.

    python3 benchmarks/bench_kernels.py --sizes 1000 4000 --repeat 5
"""

import argparse
import statistics
import time

import numpy as np

from egocg.core import Topology, build_system, builtin_species, water_template
from egocg.engine import NeighborList, relax_overlaps
from egocg.potentials import ForceComputer, bundled_forcefield


def _system(ff, n_beads, mixture):
    if mixture:
        n_chain = max(1, n_beads // 130)
        top = Topology(dict(ff.bead_types), [builtin_species("EGO13"), water_template()],
                       [n_chain, n_beads - 13 * n_chain])
    else:
        top = Topology(dict(ff.bead_types), [water_template()], [n_beads])
    state = build_system(top, 0.998, 293.0, 1, forcefield=ff)
    relax_overlaps(state, ff)
    return state


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), statistics.median(times), out


def bench(n_beads, mixture, repeat):
    ff = bundled_forcefield()
    state = _system(ff, n_beads, mixture)
    exp = state.topology
    rows = {}
    for backend in ("python", "cython"):
        nl = NeighborList(exp, ff.r_cut, backend=backend)
        fc = ForceComputer(ff, exp, backend=backend)
        t_pairs, _, pairs = _best(lambda: nl.build(state.positions, state.box), repeat)
        t_force, _, (forces, _) = _best(lambda: fc.compute(state.positions, state.box, pairs),
                                        repeat)
        rows[backend] = (t_pairs, t_force, pairs, forces)
    py, cy = rows["python"], rows["cython"]
    same_pairs = all(np.array_equal(a, b) for a, b in zip(py[2], cy[2]))
    f_err = float(np.max(np.abs(py[3] - cy[3])) / max(np.max(np.abs(py[3])), 1e-300))
    label = "EGO13/water" if mixture else "water"
    print(f"{label:12s} N={n_beads:6d} pairs={len(py[2][0]):8d}  "
          f"build py {py[0] * 1e3:8.2f} ms  cy {cy[0] * 1e3:8.2f} ms  x{py[0] / cy[0]:5.1f}  "
          f"force py {py[1] * 1e3:8.2f} ms  cy {cy[1] * 1e3:8.2f} ms  x{py[1] / cy[1]:5.1f}  "
          f"pairs equal={same_pairs} max rel force diff={f_err:.1e}")
    return same_pairs and f_err < 1e-10


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[1000, 4000])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    try:
        from egocg import _ckernels  # noqa: F401
    except ImportError:
        ap.exit(1, "compiled kernels are not built; run pip install -e . --no-build-isolation\n")
    ok = True
    for n in args.sizes:
        for mixture in (False, True):
            ok &= bench(n, mixture, args.repeat)
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
