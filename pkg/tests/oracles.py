"""Independent reference implementations used by the tests.

Nothing here calls into the engine's pair search or force kernels.
"""

import itertools

import numpy as np

H = 1e-6  # nm, central-difference step


def min_image(d, box):
    return d - box * np.round(d / box)


def excluded_pairs(exp):
    out = {(min(i, j), max(i, j)) for i, j in exp.bonds.tolist()}
    out |= {(min(i, k), max(i, k)) for i, _, k in exp.angles.tolist()}
    return out


def brute_force_pairs(pos, box, cutoff, exp):
    """All i<j within cutoff (minimum image) minus bonded 1-2 and 1-3 partners."""
    excl = excluded_pairs(exp)
    d = pos[:, None, :] - pos[None, :, :]
    d = min_image(d, box)
    r2 = (d * d).sum(axis=2)
    i, j = np.nonzero(np.triu(r2 < cutoff * cutoff, k=1))
    return {(a, b) for a, b in zip(i.tolist(), j.tolist()) if (a, b) not in excl}


def lj_pair_energy(r, sigma, eps, r_cut):
    if r >= r_cut:
        return 0.0
    sr6 = (sigma / r) ** 6
    src6 = (sigma / r_cut) ** 6
    return 4 * eps * (sr6 * sr6 - sr6) - 4 * eps * (src6 * src6 - src6)


def _relative(f_an, f_fd):
    return float(np.max(np.abs(f_an - f_fd)) / max(np.max(np.abs(f_an)), 1e-300))


def _fd_grad(energy, pos):
    g = np.zeros_like(pos)
    for idx in itertools.product(range(pos.shape[0]), range(3)):
        p = pos.copy()
        p[idx] += H
        up = energy(p)
        p[idx] -= 2 * H
        g[idx] = (up - energy(p)) / (2 * H)
    return g


def fd_check_lj(ff, rng, n_configs):
    """Worst relative error of ForceComputer LJ forces against central differences."""
    from egocg.core import Topology, builtin_species, water_template
    from egocg.potentials import ForceComputer

    top = Topology(dict(ff.bead_types), [builtin_species("EGO2"), builtin_species("EGO4"),
                                         water_template()], [1, 1, 3]).expand()
    box = np.full(3, 3.4)
    names = [top.type_names[t] for t in top.types]
    comp = ForceComputer(ff, top)
    excl = excluded_pairs(top)
    n = top.n_beads
    pairs_all = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in excl]
    pi = np.array([p[0] for p in pairs_all], dtype=np.int32)
    pj = np.array([p[1] for p in pairs_all], dtype=np.int32)

    def energy_nb(pos):
        e = 0.0
        for i, j in pairs_all:
            p = ff.pair_params(names[i], names[j])
            r = float(np.linalg.norm(min_image(pos[i] - pos[j], box)))
            e += lj_pair_energy(r, p.sigma, p.epsilon, p.r_cut)
        return e

    worst = 0.0
    done = 0
    while done < n_configs:
        pos = rng.uniform(0, box[0], (n, 3))
        d = min_image(pos[pi] - pos[pj], box)
        r = np.sqrt((d * d).sum(axis=1))
        if r.min() < 0.38 or not np.any(r < ff.r_cut):
            continue
        forces, terms = comp.compute(pos, box, (pi, pj))
        f_nb = forces - _bonded_only(comp, pos, box)
        worst = max(worst, _relative(f_nb, -_fd_grad(energy_nb, pos)))
        assert abs(terms.nonbonded - energy_nb(pos)) < 1e-9 * max(1.0, abs(terms.nonbonded))
        done += 1
    return worst


def _bonded_only(comp, pos, box):
    empty = (np.empty(0, np.int32), np.empty(0, np.int32))
    return comp.compute(pos, box, empty)[0]


def fd_check_bonded(ff, rng, n_configs, kind):
    """Worst relative error of bond_force / angle_force against central differences
    of the mixture potential evaluated on the geometry directly."""
    from egocg.core import SystemState, Topology, builtin_species
    from egocg.potentials import angle_force, bond_force

    box = np.full(3, 5.0)
    worst = 0.0
    if kind == "bond":
        exp = Topology(dict(ff.bead_types), [builtin_species("EGO2")], [1]).expand()
        p = ff.bond_potential("PA", "PA")
        for _ in range(n_configs):
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            r0 = rng.uniform(0.24, 0.42)
            pos = np.array([[2.0, 2.0, 2.0], [2.0, 2.0, 2.0] + r0 * u])
            st = SystemState(pos, np.zeros((2, 3)), box, exp)

            def energy(x):
                return float(p.evaluate(np.linalg.norm(x[0] - x[1]))[0])

            fi, fj = bond_force(st, 0, 1, p)
            worst = max(worst, _relative(np.array([fi, fj]), -_fd_grad(energy, pos)))
        return worst
    exp = Topology(dict(ff.bead_types), [builtin_species("EGO3")], [1]).expand()
    p = ff.angle_potential("PA", "PB", "PA")
    for _ in range(n_configs):
        theta = np.radians(rng.uniform(40.0, 170.0))
        la, lb = rng.uniform(0.28, 0.36, 2)
        rot = np.linalg.qr(rng.normal(size=(3, 3)))[0]
        local = np.array([[la, 0, 0], [0, 0, 0], [lb * np.cos(theta), lb * np.sin(theta), 0]])
        pos = local @ rot.T + 2.5
        st = SystemState(pos, np.zeros((3, 3)), box, exp)

        def energy(x):
            a, b = x[0] - x[1], x[2] - x[1]
            c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
            return float(p.evaluate(np.degrees(np.arccos(np.clip(c, -1, 1))))[0])

        f = np.array(angle_force(st, 0, 1, 2, p))
        worst = max(worst, _relative(f, -_fd_grad(energy, pos)))
    return worst
