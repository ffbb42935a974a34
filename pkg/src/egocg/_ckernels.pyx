# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: pair search, 12-6 LJ, Gaussian-mixture bonds and angles.

Every routine mirrors a function of the same name in ``_kernels_py`` and
accumulates into caller-owned force buffers in a fixed order, so results are
deterministic for a given pair list.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, log, floor, ceil, acos, atan2, M_PI
from libcpp.vector cimport vector
from libcpp.algorithm cimport sort

cnp.import_array()

cdef inline double _wrap(double d, double L) nogil:
    # shift into (-L/2, L/2]; one branch covers wrapped inputs
    if d > 0.5 * L:
        d = d - L
    elif d <= -0.5 * L:
        d = d + L
    if d > 0.5 * L or d <= -0.5 * L:
        d = d - L * ceil(d / L - 0.5)
    return d


cdef inline bint _excluded(int i, int j, const int[::1] mol,
                           const int[::1] excl_ptr, const int[::1] excl_idx) nogil:
    cdef int k
    if mol[i] != mol[j]:
        return False
    for k in range(excl_ptr[i], excl_ptr[i + 1]):
        if excl_idx[k] == j:
            return True
    return False


def build_pairs(const double[:, ::1] pos, const double[::1] box, double cutoff,
                const int[::1] mol, const int[::1] excl_ptr, const int[::1] excl_idx):
    """Return (i, j) int32 arrays of all non-excluded pairs closer than cutoff."""
    cdef Py_ssize_t n = pos.shape[0]
    cdef double rc2 = cutoff * cutoff
    cdef double dx, dy, dz, r2
    cdef int i, j, a, b, c, ca, cb, cc, cell, ncell_tot, head_j
    cdef int nc[3]
    cdef double cw[3]
    cdef vector[int] out_i, out_j, row
    cdef int[:, ::1] cidx
    cdef int[::1] head, nxt
    cdef int oa, ob, oc, nb

    for a in range(3):
        nc[a] = <int> floor(box[a] / cutoff)
        if nc[a] < 1:
            nc[a] = 1
        cw[a] = box[a] / nc[a]

    if nc[0] < 3 or nc[1] < 3 or nc[2] < 3:
        for i in range(n - 1):
            for j in range(i + 1, n):
                dx = _wrap(pos[i, 0] - pos[j, 0], box[0])
                dy = _wrap(pos[i, 1] - pos[j, 1], box[1])
                dz = _wrap(pos[i, 2] - pos[j, 2], box[2])
                r2 = dx * dx + dy * dy + dz * dz
                if r2 < rc2 and not _excluded(i, j, mol, excl_ptr, excl_idx):
                    out_i.push_back(i)
                    out_j.push_back(j)
    else:
        ncell_tot = nc[0] * nc[1] * nc[2]
        head = np.full(ncell_tot, -1, dtype=np.int32)
        nxt = np.full(n, -1, dtype=np.int32)
        cidx = np.empty((n, 3), dtype=np.int32)
        for i in range(n):
            for a in range(3):
                c = <int> floor(pos[i, a] / cw[a])
                if c >= nc[a]:
                    c = nc[a] - 1
                elif c < 0:
                    c = 0
                cidx[i, a] = c
            cell = (cidx[i, 0] * nc[1] + cidx[i, 1]) * nc[2] + cidx[i, 2]
            nxt[i] = head[cell]
            head[cell] = i
        for i in range(n):
            ca = cidx[i, 0]
            cb = cidx[i, 1]
            cc = cidx[i, 2]
            row.clear()
            for oa in range(-1, 2):
                for ob in range(-1, 2):
                    for oc in range(-1, 2):
                        nb = ((((ca + oa) % nc[0] + nc[0]) % nc[0]) * nc[1]
                              + (((cb + ob) % nc[1] + nc[1]) % nc[1])) * nc[2] \
                             + (((cc + oc) % nc[2] + nc[2]) % nc[2])
                        j = head[nb]
                        while j >= 0:
                            if j > i:
                                dx = _wrap(pos[i, 0] - pos[j, 0], box[0])
                                dy = _wrap(pos[i, 1] - pos[j, 1], box[1])
                                dz = _wrap(pos[i, 2] - pos[j, 2], box[2])
                                r2 = dx * dx + dy * dy + dz * dz
                                if r2 < rc2 and not _excluded(i, j, mol, excl_ptr, excl_idx):
                                    row.push_back(j)
                            j = nxt[j]
            # canonical (i, j) order independent of cell traversal
            sort(row.begin(), row.end())
            for a in range(<int> row.size()):
                out_i.push_back(i)
                out_j.push_back(row[a])

    cdef Py_ssize_t k, npair = out_i.size()
    pi = np.empty(npair, dtype=np.int32)
    pj = np.empty(npair, dtype=np.int32)
    cdef int[::1] vi = pi
    cdef int[::1] vj = pj
    for k in range(npair):
        vi[k] = out_i[k]
        vj[k] = out_j[k]
    return pi, pj


def lj_forces(const double[:, ::1] pos, const double[::1] box,
              const int[::1] pi, const int[::1] pj, const int[::1] types,
              const double[:, ::1] c12, const double[:, ::1] c6,
              const double[:, ::1] shift, const double[:, ::1] rcap2,
              double rc2, double rfloor2, double[:, ::1] forces):
    """Accumulate LJ forces; return (energy, virial, index of first floor violation or -1)."""
    cdef Py_ssize_t k, npair = pi.shape[0]
    cdef int i, j, ti, tj, nt = c12.shape[0]
    cdef double dx, dy, dz, r2, ir2, ir6, fr, e = 0.0, w = 0.0, fcap, rcap, a12, a6
    cdef double lx = box[0], ly = box[1], lz = box[2]
    cdef int bad = -1
    # flat local copies so the loop does not reload through aliased views
    cdef double[::1] t12 = np.ascontiguousarray(c12).ravel()
    cdef double[::1] t6 = np.ascontiguousarray(c6).ravel()
    cdef double[::1] tsh = np.ascontiguousarray(shift).ravel()
    cdef double[::1] tcap = np.ascontiguousarray(rcap2).ravel()
    cdef const double *p = &pos[0, 0] if pos.shape[0] > 0 else NULL
    cdef double *f = &forces[0, 0] if forces.shape[0] > 0 else NULL
    for k in range(npair):
        i = pi[k]
        j = pj[k]
        dx = _wrap(p[3 * i] - p[3 * j], lx)
        dy = _wrap(p[3 * i + 1] - p[3 * j + 1], ly)
        dz = _wrap(p[3 * i + 2] - p[3 * j + 2], lz)
        r2 = dx * dx + dy * dy + dz * dz
        if r2 >= rc2:
            continue
        ti = types[i] * nt + types[j]
        a12 = t12[ti]
        a6 = t6[ti]
        if r2 < tcap[ti]:
            # linear continuation of the potential below the cap radius
            ir2 = 1.0 / tcap[ti]
            ir6 = ir2 * ir2 * ir2
            rcap = sqrt(tcap[ti])
            fcap = (12.0 * a12 * ir6 * ir6 - 6.0 * a6 * ir6) / rcap
            e += a12 * ir6 * ir6 - a6 * ir6 + tsh[ti] + fcap * (rcap - sqrt(r2))
            if r2 > 0.0:
                fr = fcap / sqrt(r2)
            else:
                fr = 0.0
        else:
            if r2 < rfloor2:
                if bad < 0:
                    bad = <int> k
                continue
            ir2 = 1.0 / r2
            ir6 = ir2 * ir2 * ir2
            e += a12 * ir6 * ir6 - a6 * ir6 + tsh[ti]
            fr = (12.0 * a12 * ir6 * ir6 - 6.0 * a6 * ir6) * ir2
        w += fr * r2
        f[3 * i] += fr * dx
        f[3 * i + 1] += fr * dy
        f[3 * i + 2] += fr * dz
        f[3 * j] -= fr * dx
        f[3 * j + 1] -= fr * dy
        f[3 * j + 2] -= fr * dz
    return e, w, bad


# mixture parameter layout (per potential type):
#   comp[t, l, 0..2] = log-prefactor, mu, 1/xi^2 ; ncomp[t] = m
#   scal[t, :] = kT, offset, lo, hi, U(lo), U'(lo), U''(lo), U(hi), U'(hi), U''(hi)

cdef inline void _mixture(double q, int t, const double[:, :, ::1] comp, const int[::1] ncomp,
                          const double[:, ::1] scal, double* u, double* du) nogil:
    cdef int l, m = ncomp[t]
    cdef double kT = scal[t, 0], mx, s, s1, z, wgt, d
    if q < scal[t, 2]:
        d = q - scal[t, 2]
        u[0] = scal[t, 4] + scal[t, 5] * d + 0.5 * scal[t, 6] * d * d
        du[0] = scal[t, 5] + scal[t, 6] * d
        return
    if q > scal[t, 3]:
        d = q - scal[t, 3]
        u[0] = scal[t, 7] + scal[t, 8] * d + 0.5 * scal[t, 9] * d * d
        du[0] = scal[t, 8] + scal[t, 9] * d
        return
    mx = -1e300
    for l in range(m):
        d = q - comp[t, l, 1]
        z = comp[t, l, 0] - 0.5 * d * d * comp[t, l, 2]
        if z > mx:
            mx = z
    s = 0.0
    s1 = 0.0
    for l in range(m):
        d = q - comp[t, l, 1]
        z = comp[t, l, 0] - 0.5 * d * d * comp[t, l, 2]
        wgt = exp(z - mx)
        s += wgt
        s1 += wgt * d * comp[t, l, 2]
    u[0] = -kT * (mx + log(s)) - scal[t, 1]
    du[0] = kT * s1 / s


def bond_forces(const double[:, ::1] pos, const double[::1] box,
                const int[::1] bi, const int[::1] bj, const int[::1] btype,
                const double[:, :, ::1] comp, const int[::1] ncomp, const double[:, ::1] scal,
                double lmin, double[:, ::1] forces):
    """Accumulate bond forces; return (energy, virial, index of first too-short bond or -1)."""
    cdef Py_ssize_t k, nb = bi.shape[0]
    cdef int i, j, bad = -1
    cdef double dx, dy, dz, r, u, du, fr, e = 0.0, w = 0.0
    for k in range(nb):
        i = bi[k]
        j = bj[k]
        dx = _wrap(pos[i, 0] - pos[j, 0], box[0])
        dy = _wrap(pos[i, 1] - pos[j, 1], box[1])
        dz = _wrap(pos[i, 2] - pos[j, 2], box[2])
        r = sqrt(dx * dx + dy * dy + dz * dz)
        if r < lmin:
            if bad < 0:
                bad = <int> k
            continue
        _mixture(r, btype[k], comp, ncomp, scal, &u, &du)
        e += u
        fr = -du / r
        w += fr * r * r
        forces[i, 0] += fr * dx
        forces[i, 1] += fr * dy
        forces[i, 2] += fr * dz
        forces[j, 0] -= fr * dx
        forces[j, 1] -= fr * dy
        forces[j, 2] -= fr * dz
    return e, w, bad


def angle_forces(const double[:, ::1] pos, const double[::1] box,
                 const int[::1] ai, const int[::1] aj, const int[::1] ak, const int[::1] atype,
                 const double[:, :, ::1] comp, const int[::1] ncomp, const double[:, ::1] scal,
                 double lmin, double sinfloor, double[:, ::1] forces):
    """Accumulate angle forces (potential in degrees); return (energy, virial, bad index)."""
    cdef Py_ssize_t k, na = ai.shape[0]
    cdef int i, j, m, bad = -1, c
    cdef double a[3]
    cdef double b[3]
    cdef double ua[3]
    cdef double ub[3]
    cdef double fi[3]
    cdef double fk[3]
    cdef double la, lb, cosv, cx, cy, cz, sinv, theta, u, du, g, e = 0.0, w = 0.0
    cdef double deg = 180.0 / M_PI
    for k in range(na):
        i = ai[k]
        j = aj[k]
        m = ak[k]
        for c in range(3):
            a[c] = _wrap(pos[i, c] - pos[j, c], box[c])
            b[c] = _wrap(pos[m, c] - pos[j, c], box[c])
        la = sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])
        lb = sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2])
        if la < lmin or lb < lmin:
            if bad < 0:
                bad = <int> k
            continue
        for c in range(3):
            ua[c] = a[c] / la
            ub[c] = b[c] / lb
        cosv = ua[0] * ub[0] + ua[1] * ub[1] + ua[2] * ub[2]
        cx = ua[1] * ub[2] - ua[2] * ub[1]
        cy = ua[2] * ub[0] - ua[0] * ub[2]
        cz = ua[0] * ub[1] - ua[1] * ub[0]
        sinv = sqrt(cx * cx + cy * cy + cz * cz)
        theta = atan2(sinv, cosv) * deg
        _mixture(theta, atype[k], comp, ncomp, scal, &u, &du)
        e += u
        if sinv < sinfloor:
            sinv = sinfloor
        # dU/dtheta in radians
        g = du * deg
        for c in range(3):
            fi[c] = -g * (cosv * ua[c] - ub[c]) / (la * sinv)
            fk[c] = -g * (cosv * ub[c] - ua[c]) / (lb * sinv)
            forces[i, c] += fi[c]
            forces[m, c] += fk[c]
            forces[j, c] -= fi[c] + fk[c]
        w += a[0] * fi[0] + a[1] * fi[1] + a[2] * fi[2] + b[0] * fk[0] + b[1] * fk[1] + b[2] * fk[2]
    return e, w, bad
