"""Compiled single-configuration kernel for the refinement inner loop.

The batched numpy routines in :mod:`kinpred.kinematics` are the reference;
for one configuration their cost is almost all per-call overhead on 3-vectors,
which a loop compiled with numba avoids. Same formulas, same outputs.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _kernel(order, parent, child, origin_xyz, origin_axis, O, OK, OK2, base, paths, path_len, links,
            base_pos, base_rot, s, sdot, base_lin, base_ang, jacobian):
    n = s.shape[0]
    n_links = path_len.shape[0]
    pos = np.empty((n_links, 3))
    rot = np.empty((n_links, 3, 3))
    axis = np.empty((n, 3))
    origin = np.empty((n, 3))
    pos[base] = base_pos
    rot[base] = base_rot
    for j in order:
        p, c = parent[j], child[j]
        sj, cj = np.sin(s[j]), 1.0 - np.cos(s[j])
        for a in range(3):
            acc_o = pos[p, a]
            acc_x = 0.0
            for b in range(3):
                acc_o += rot[p, a, b] * origin_xyz[j, b]
                acc_x += rot[p, a, b] * origin_axis[j, b]
            origin[j, a] = acc_o
            axis[j, a] = acc_x
            pos[c, a] = acc_o
            for b in range(3):
                acc = 0.0
                for k in range(3):
                    acc += rot[p, a, k] * (O[j, k, b] + sj * OK[j, k, b] + cj * OK2[j, k, b])
                rot[c, a, b] = acc
    L = links.shape[0]
    tw = np.empty((L, 6))
    dvs = np.zeros((L, 6, n))
    dvsd = np.zeros((L, 6, n))
    u = np.empty((n, 3))
    for i in range(L):
        link = links[i]
        P = pos[link]
        d0, d1, d2 = P[0] - base_pos[0], P[1] - base_pos[1], P[2] - base_pos[2]
        lin0 = base_lin[0] + base_ang[1] * d2 - base_ang[2] * d1
        lin1 = base_lin[1] + base_ang[2] * d0 - base_ang[0] * d2
        lin2 = base_lin[2] + base_ang[0] * d1 - base_ang[1] * d0
        ang0, ang1, ang2 = base_ang[0], base_ang[1], base_ang[2]
        m = path_len[link]
        for q in range(m):
            j = paths[link, q]
            r0, r1, r2 = P[0] - origin[j, 0], P[1] - origin[j, 1], P[2] - origin[j, 2]
            a0, a1, a2 = axis[j, 0], axis[j, 1], axis[j, 2]
            u[q, 0] = a1 * r2 - a2 * r1
            u[q, 1] = a2 * r0 - a0 * r2
            u[q, 2] = a0 * r1 - a1 * r0
            w = sdot[j]
            lin0 += w * u[q, 0]
            lin1 += w * u[q, 1]
            lin2 += w * u[q, 2]
            ang0 += w * a0
            ang1 += w * a1
            ang2 += w * a2
        tw[i, 0], tw[i, 1], tw[i, 2] = lin0, lin1, lin2
        tw[i, 3], tw[i, 4], tw[i, 5] = ang0, ang1, ang2
        if not jacobian:
            continue
        # suffix sums U_ge, A_ge start from the totals; w_lt grows from the base
        U0 =lin0 - (base_lin[0] + base_ang[1] * d2 - base_ang[2] * d1)
        U1 = lin1 - (base_lin[1] + base_ang[2] * d0 - base_ang[0] * d2)
        U2 = lin2 - (base_lin[2] + base_ang[0] * d1 - base_ang[1] * d0)
        A0, A1, A2 = ang0 - base_ang[0], ang1 - base_ang[1], ang2 - base_ang[2]
        W0, W1, W2 = base_ang[0], base_ang[1], base_ang[2]
        for q in range(m):
            j = paths[link, q]
            a0, a1, a2 = axis[j, 0], axis[j, 1], axis[j, 2]
            ux, uy, uz = u[q, 0], u[q, 1], u[q, 2]
            dvs[i, 0, j] = W1 * uz - W2 * uy + a1 * U2 - a2 * U1
            dvs[i, 1, j] = W2 * ux - W0 * uz + a2 * U0 - a0 * U2
            dvs[i, 2, j] = W0 * uy - W1 * ux + a0 * U1 - a1 * U0
            dvs[i, 3, j] = a1 * A2 - a2 * A1
            dvs[i, 4, j] = a2 * A0 - a0 * A2
            dvs[i, 5, j] = a0 * A1 - a1 * A0
            dvsd[i, 0, j], dvsd[i, 1, j], dvsd[i, 2, j] = ux, uy, uz
            dvsd[i, 3, j], dvsd[i, 4, j], dvsd[i, 5, j] = a0, a1, a2
            w = sdot[j]
            U0 -= w * ux
            U1 -= w * uy
            U2 -= w * uz
            A0 -= w * a0
            A1 -= w * a1
            A2 -= w * a2
            W0 += w * a0
            W1 += w * a1
            W2 += w * a2
    return tw, dvs, dvsd


def _tables(model):
    tables = getattr(model, "_fastkin_tables", None)
    if tables is None:
        n_links = len(model.links)
        longest = max((len(p) for p in model.link_paths), default=0)
        paths = np.zeros((n_links, max(longest, 1)), dtype=np.int64)
        for link, path in enumerate(model.link_paths):
            paths[link, : len(path)] = path
        O, OK, OK2 = model._origin_K
        tables = (
            np.array(model.joint_order, dtype=np.int64),
            np.array([jt.parent for jt in model.joints], dtype=np.int64),
            np.array([jt.child for jt in model.joints], dtype=np.int64),
            np.array([jt.origin_xyz for jt in model.joints], dtype=float).reshape(-1, 3),
            np.ascontiguousarray(model._origin_axis, dtype=float).reshape(-1, 3),
            np.ascontiguousarray(O, dtype=float),
            np.ascontiguousarray(OK, dtype=float),
            np.ascontiguousarray(OK2, dtype=float),
            int(model.base_link_index),
            paths,
            np.array([len(p) for p in model.link_paths], dtype=np.int64),
        )
        object.__setattr__(model, "_fastkin_tables", tables)
    return tables


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def link_twists_single(model, base_pos, base_rot, s, sdot, base_lin, base_ang, links, jacobian=True):
    """Twists (L, 6) and, with ``jacobian``, dv/ds and dv/dsdot (L, 6, n) for one configuration."""
    return _kernel(*_tables(model), np.asarray(links, dtype=np.int64), _f64(base_pos), _f64(base_rot),
                   _f64(s), _f64(sdot), _f64(base_lin), _f64(base_ang), jacobian)
