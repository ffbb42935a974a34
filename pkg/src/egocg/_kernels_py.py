"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``.

Same call signatures and return conventions; used when the extension is not
built or when ``EGOCG_PURE_PYTHON`` is set.
"""

import numpy as np

_CHUNK = 256


def _wrap(d, box):
    return d - box * np.ceil(d / box - 0.5)


def build_pairs(pos, box, cutoff, mol, excl_ptr, excl_idx):
    pos = np.asarray(pos, dtype=float)
    box = np.asarray(box, dtype=float)
    n = len(pos)
    rc2 = cutoff * cutoff
    out_i, out_j = [], []
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        d = pos[start:stop, None, :] - pos[None, :, :]
        d = _wrap(d, box)
        r2 = np.einsum("ijk,ijk->ij", d, d)
        ii, jj = np.nonzero(r2 < rc2)
        ii = ii + start
        keep = jj > ii
        out_i.append(ii[keep])
        out_j.append(jj[keep])
    pi = np.concatenate(out_i).astype(np.int32) if out_i else np.empty(0, np.int32)
    pj = np.concatenate(out_j).astype(np.int32) if out_j else np.empty(0, np.int32)
    if len(excl_idx):
        owner = np.repeat(np.arange(n), np.diff(excl_ptr))
        excl_keys = owner.astype(np.int64) * n + np.asarray(excl_idx, dtype=np.int64)
        keys = pi.astype(np.int64) * n + pj
        drop = np.isin(keys, excl_keys)
        pi, pj = pi[~drop], pj[~drop]
    order = np.lexsort((pj, pi))
    return pi[order], pj[order]


def lj_forces(pos, box, pi, pj, types, c12, c6, shift, rcap2, rc2, rfloor2, forces):
    pi = np.asarray(pi, dtype=np.intp)
    pj = np.asarray(pj, dtype=np.intp)
    d = _wrap(pos[pi] - pos[pj], box)
    r2 = np.einsum("ij,ij->i", d, d)
    inside = r2 < rc2
    pi, pj, d, r2 = pi[inside], pj[inside], d[inside], r2[inside]
    ti, tj = types[pi], types[pj]
    a12, a6, sh, cap2 = c12[ti, tj], c6[ti, tj], shift[ti, tj], rcap2[ti, tj]
    capped = r2 < cap2
    bad = -1
    floor_hit = (~capped) & (r2 < rfloor2)
    if floor_hit.any():
        bad = int(np.flatnonzero(inside)[np.argmax(floor_hit)])
    ok = ~floor_hit
    reff2 = np.where(capped, cap2, r2)
    reff2 = np.where(ok, reff2, 1.0)
    ir2 = 1.0 / reff2
    ir6 = ir2 * ir2 * ir2
    e_pair = a12 * ir6 * ir6 - a6 * ir6 + sh
    fmag = (12.0 * a12 * ir6 * ir6 - 6.0 * a6 * ir6)  # = F * r_eff
    r = np.sqrt(r2)
    reff = np.sqrt(reff2)
    fr = np.where(capped, np.divide(fmag / reff, r, out=np.zeros_like(r), where=r > 0), fmag * ir2)
    e_pair = np.where(capped, e_pair + fmag / reff * (reff - r), e_pair)
    fr = np.where(ok, fr, 0.0)
    e_pair = np.where(ok, e_pair, 0.0)
    fvec = fr[:, None] * d
    np.add.at(forces, pi, fvec)
    np.subtract.at(forces, pj, fvec)
    return float(e_pair.sum()), float((fr * r2).sum()), bad


def _mixture(q, t, comp, ncomp, scal):
    """Vectorized mixture energy and derivative for values q of potential types t."""
    q = np.asarray(q, dtype=float)
    u = np.empty_like(q)
    du = np.empty_like(q)
    for typ in np.unique(t):
        sel = t == typ
        qs = q[sel]
        m = ncomp[typ]
        kT, off, lo, hi, ulo, dulo, klo, uhi, duhi, khi = scal[typ]
        lp, mu, ix2 = comp[typ, :m, 0], comp[typ, :m, 1], comp[typ, :m, 2]
        dq = qs[:, None] - mu[None, :]
        z = lp[None, :] - 0.5 * dq * dq * ix2[None, :]
        mx = z.max(axis=1, keepdims=True)
        w = np.exp(z - mx)
        s = w.sum(axis=1)
        uu = -kT * (mx[:, 0] + np.log(s)) - off
        dd = kT * (w * dq * ix2[None, :]).sum(axis=1) / s
        below = qs < lo
        above = qs > hi
        dl = qs - lo
        dh = qs - hi
        uu = np.where(below, ulo + dulo * dl + 0.5 * klo * dl * dl, uu)
        dd = np.where(below, dulo + klo * dl, dd)
        uu = np.where(above, uhi + duhi * dh + 0.5 * khi * dh * dh, uu)
        dd = np.where(above, duhi + khi * dh, dd)
        u[sel] = uu
        du[sel] = dd
    return u, du


def bond_forces(pos, box, bi, bj, btype, comp, ncomp, scal, lmin, forces):
    if len(bi) == 0:
        return 0.0, 0.0, -1
    bi = np.asarray(bi, dtype=np.intp)
    bj = np.asarray(bj, dtype=np.intp)
    d = _wrap(pos[bi] - pos[bj], box)
    r = np.sqrt(np.einsum("ij,ij->i", d, d))
    short = r < lmin
    bad = int(np.argmax(short)) if short.any() else -1
    rs = np.where(short, 1.0, r)
    u, du = _mixture(rs, np.asarray(btype), comp, ncomp, scal)
    fr = np.where(short, 0.0, -du / rs)
    u = np.where(short, 0.0, u)
    fvec = fr[:, None] * d
    np.add.at(forces, bi, fvec)
    np.subtract.at(forces, bj, fvec)
    return float(u.sum()), float((fr * r * r).sum()), bad


def angle_forces(pos, box, ai, aj, ak, atype, comp, ncomp, scal, lmin, sinfloor, forces):
    if len(ai) == 0:
        return 0.0, 0.0, -1
    ai = np.asarray(ai, dtype=np.intp)
    aj = np.asarray(aj, dtype=np.intp)
    ak = np.asarray(ak, dtype=np.intp)
    a = _wrap(pos[ai] - pos[aj], box)
    b = _wrap(pos[ak] - pos[aj], box)
    la = np.sqrt(np.einsum("ij,ij->i", a, a))
    lb = np.sqrt(np.einsum("ij,ij->i", b, b))
    short = (la < lmin) | (lb < lmin)
    bad = int(np.argmax(short)) if short.any() else -1
    la = np.where(short, 1.0, la)
    lb = np.where(short, 1.0, lb)
    ua = a / la[:, None]
    ub = b / lb[:, None]
    cosv = np.einsum("ij,ij->i", ua, ub)
    sinv = np.linalg.norm(np.cross(ua, ub), axis=1)
    theta = np.degrees(np.arctan2(sinv, cosv))
    u, du = _mixture(theta, np.asarray(atype), comp, ncomp, scal)
    sinv = np.maximum(sinv, sinfloor)
    g = np.where(short, 0.0, du * (180.0 / np.pi))
    fi = -g[:, None] * (cosv[:, None] * ua - ub) / (la * sinv)[:, None]
    fk = -g[:, None] * (cosv[:, None] * ub - ua) / (lb * sinv)[:, None]
    np.add.at(forces, ai, fi)
    np.add.at(forces, ak, fk)
    np.subtract.at(forces, aj, fi + fk)
    u = np.where(short, 0.0, u)
    w = np.einsum("ij,ij->i", a, fi) + np.einsum("ij,ij->i", b, fk)
    return float(u.sum()), float(w.sum()), bad
