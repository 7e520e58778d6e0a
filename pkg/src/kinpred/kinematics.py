"""Forward/differential kinematics of a floating-base tree and their derivatives.

Twists use the mixed representation: linear velocity of the link origin and
angular velocity, both in the inertial frame. Everything below ``Frames`` is
batched over arbitrary leading dimensions so the training losses can push
``batch x horizon`` configurations through in one call.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Configuration, RigidBodyModel, SystemVelocity


@dataclass
class LinkPose:
    position: np.ndarray
    rotation: np.ndarray


@dataclass
class LinkTwist:
    linear: np.ndarray
    angular: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])


@dataclass
class Frames:
    """World-frame link poses plus joint axes/origins for one or many configurations."""

    link_pos: np.ndarray  # (..., L, 3)
    link_rot: np.ndarray  # (..., L, 3, 3)
    joint_axis: np.ndarray  # (..., n, 3)
    joint_origin: np.ndarray  # (..., n, 3)
    base_pos: np.ndarray  # (..., 3)


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_angle(axis: np.ndarray, angle) -> np.ndarray:
    """Rodrigues rotation about a fixed unit axis; ``angle`` may be an array."""
    angle = np.asarray(angle, dtype=float)
    K = skew(axis)
    K2 = K @ K
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * K2


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Exponential map of a rotation vector (batched)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    K = skew(w)
    K2 = K @ K
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    """Geodesic angle (rad) between rotations, batched.

    Uses ||Ra - Rb||_F = 2*sqrt(2)*sin(angle/2), exact at zero and well
    conditioned for small angles, unlike arccos of the trace.
    """
    chord = np.sqrt(np.sum((np.asarray(Ra) - np.asarray(Rb)) ** 2, axis=(-2, -1)))
    return 2.0 * np.arcsin(np.clip(chord / (2.0 * np.sqrt(2.0)), 0.0, 1.0))


def cross(a, b):
    """Component-wise cross product; much cheaper than np.cross for large batches."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def _rmul_const(R, C):
    """R @ C for a batch R (..., 3, 3) and a constant C (3, 3) as one GEMM."""
    return (R.reshape(-1, 3) @ C).reshape(R.shape)


def _rvec(R, v):
    """R @ v for a batch R (..., 3, 3) and a constant vector v (3,)."""
    return (R.reshape(-1, 3) @ v).reshape(R.shape[:-1])


def link_frames(model: RigidBodyModel, base_pos, base_rot, s) -> Frames:
    base_pos = np.asarray(base_pos, dtype=float)
    base_rot = np.asarray(base_rot, dtype=float)
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != model.n or base_pos.shape[-1] != 3 or base_rot.shape[-2:] != (3, 3):
        raise ValueError(
            f"configuration dimensions do not match model (n={model.n}): "
            f"s {s.shape}, base_pos {base_pos.shape}, base_rot {base_rot.shape}"
        )
    batch = np.broadcast_shapes(s.shape[:-1], base_pos.shape[:-1], base_rot.shape[:-2])
    if not batch:
        return _link_frames_single(model, base_pos, base_rot, s)
    n_links = len(model.links)
    base_pos = np.broadcast_to(base_pos, batch + (3,))
    pos: list = [None] * n_links
    rot: list = [None] * n_links
    axes: list = [None] * model.n
    origins: list = [None] * model.n
    b = model.base_link_index
    pos[b] = base_pos
    rot[b] = np.broadcast_to(base_rot, batch + (3, 3))
    sin, cos = np.sin(s), np.cos(s)
    for j in model.joint_order:
        joint = model.joints[j]
        Rp = rot[joint.parent]
        R0 = Rp if model._origin_identity[j] else _rmul_const(Rp, model._origin_rot[j])
        o = pos[joint.parent] + _rvec(Rp, joint.origin_xyz)
        K, K2 = model._axis_skew[j]
        # R0 @ (I + sin K + (1 - cos) K^2)
        rot[joint.child] = (
            R0 + sin[..., j, None, None] * _rmul_const(R0, K) + (1.0 - cos[..., j, None, None]) * _rmul_const(R0, K2)
        )
        origins[j] = o
        axes[j] = _rvec(R0, joint.axis)
        pos[joint.child] = o
    empty = np.zeros(batch + (0, 3))
    return Frames(
        np.stack(pos, axis=-2),
        np.stack(rot, axis=-3),
        np.stack(axes, axis=-2) if axes else empty,
        np.stack(origins, axis=-2) if origins else empty,
        base_pos,
    )


def _link_frames_single(model: RigidBodyModel, base_pos, base_rot, s) -> Frames:
    """Unbatched variant: plain 3x3 products, far less per-call overhead."""
    n_links = len(model.links)
    pos = np.empty((n_links, 3))
    rot = np.empty((n_links, 3, 3))
    axes = np.empty((model.n, 3))
    origins = np.empty((model.n, 3))
    b = model.base_link_index
    pos[b], rot[b] = base_pos, base_rot
    O, OK, OK2 = model._origin_K
    # origin rotation times the joint rotation, for every joint at once
    E = O + np.sin(s)[:, None, None] * OK + (1.0 - np.cos(s))[:, None, None] * OK2
    for j in model.joint_order:
        joint = model.joints[j]
        Rp = rot[joint.parent]
        origins[j] = pos[joint.parent] + Rp.dot(joint.origin_xyz)
        axes[j] = Rp.dot(model._origin_axis[j])
        rot[joint.child] = Rp.dot(E[j])
        pos[joint.child] = origins[j]
    return Frames(pos, rot, axes, origins, np.array(base_pos, dtype=float))


def _frames_of(model: RigidBodyModel, q: Configuration) -> Frames:
    return link_frames(model, q.base_position, q.base_rotation, q.joint_positions)


def _check_link(model: RigidBodyModel, link: int) -> None:
    if not isinstance(link, (int, np.integer)) or not 0 <= link < len(model.links):
        raise IndexError(f"link index {link!r} out of range for {len(model.links)} links")


def forward_kinematics(model: RigidBodyModel, q: Configuration) -> dict[int, LinkPose]:
    fr = _frames_of(model, q)
    return {i: LinkPose(fr.link_pos[i].copy(), fr.link_rot[i].copy()) for i in range(len(model.links))}


def jacobian_from_frames(model: RigidBodyModel, fr: Frames, link: int) -> np.ndarray:
    """Batched 6 x (6+n) link Jacobian; rows (linear; angular), columns (base lin; base ang; joints)."""
    batch = fr.link_pos.shape[:-2]
    J = np.zeros(batch + (6, 6 + model.n))
    p = fr.link_pos[..., link, :]
    J[..., 0:3, 0:3] = np.eye(3)
    J[..., 0:3, 3:6] = -skew(p - fr.base_pos)
    J[..., 3:6, 3:6] = np.eye(3)
    path = list(model.link_paths[link])
    if path:
        a = fr.joint_axis[..., path, :]
        r = p[..., None, :] - fr.joint_origin[..., path, :]
        J[..., 0:3, [6 + j for j in path]] = np.swapaxes(cross(a, r), -1, -2)
        J[..., 3:6, [6 + j for j in path]] = np.swapaxes(a, -1, -2)
    return J


def link_jacobian(model: RigidBodyModel, q: Configuration, link: int) -> np.ndarray:
    _check_link(model, link)
    return jacobian_from_frames(model, _frames_of(model, q), link)


def twists_from_frames(model, fr: Frames, links, base_lin, base_ang, sdot) -> np.ndarray:
    """Twists (..., len(links), 6) of the given links for velocities that broadcast with ``fr``."""
    base_lin = np.asarray(base_lin, dtype=float)
    base_ang = np.asarray(base_ang, dtype=float)
    sdot = np.asarray(sdot, dtype=float)
    out = []
    for link in links:
        p = fr.link_pos[..., link, :]
        lin = base_lin + cross(base_ang, p - fr.base_pos)
        ang = np.broadcast_to(base_ang, lin.shape).copy()
        path = list(model.link_paths[link])
        if path:
            a = fr.joint_axis[..., path, :]
            r = p[..., None, :] - fr.joint_origin[..., path, :]
            sd = sdot[..., path][..., None]
            lin = lin + np.sum(sd * cross(a, r), axis=-2)
            ang = ang + np.sum(sd * a, axis=-2)
        out.append(np.concatenate([lin, ang], axis=-1))
    return np.stack(out, axis=-2)


def differential_kinematics(model: RigidBodyModel, q: Configuration, nu: SystemVelocity, link: int) -> LinkTwist:
    _check_link(model, link)
    if np.shape(nu.joint_velocities)[-1] != model.n:
        raise ValueError("joint velocity dimension does not match model")
    fr = _frames_of(model, q)
    tw = twists_from_frames(model, fr, [link], nu.base_linear, nu.base_angular, nu.joint_velocities)[0]
    return LinkTwist(tw[:3], tw[3:])


def dk_partials(model, fr: Frames, link: int, base_ang, sdot) -> tuple[np.ndarray, np.ndarray]:
    """Partials of the link twist w.r.t. joint positions and joint velocities.

    Returns ``(dv_ds, dv_dsdot)``, each (..., 6, n). Joint k on the path moves
    every downstream axis rigidly, so with ``w_<k`` the angular velocity of
    the frame carrying joint k, ``U_>=k``/``A_>=k`` the downstream linear and
    angular contributions:

        dv_lin/ds_k = w_<k x (a_k x r_k) + a_k x U_>=k
        dv_ang/ds_k = a_k x A_>=k
    """
    batch = fr.link_pos.shape[:-2]
    dvs = np.zeros(batch + (6, model.n))
    dvsd = np.zeros(batch + (6, model.n))
    path = list(model.link_paths[link])
    if not path:
        return dvs, dvsd
    base_ang = np.asarray(base_ang, dtype=float)
    sdot = np.asarray(sdot, dtype=float)
    p = fr.link_pos[..., link, :]
    a = fr.joint_axis[..., path, :]
    r = p[..., None, :] - fr.joint_origin[..., path, :]
    u = cross(a, r)
    sd = sdot[..., path][..., None]
    su = sd * u
    sa = sd * a
    # suffix sums (j >= k) and exclusive prefix sums (j < k) along the path axis
    U_ge = np.flip(np.cumsum(np.flip(su, -2), -2), -2)
    A_ge = np.flip(np.cumsum(np.flip(sa, -2), -2), -2)
    w_lt = np.cumsum(sa, -2) - sa + np.asarray(base_ang)[..., None, :]
    d_lin = cross(w_lt, u) + cross(a, U_ge)
    d_ang = cross(a, A_ge)
    dvs[..., 0:3, path] = np.swapaxes(d_lin, -1, -2)
    dvs[..., 3:6, path] = np.swapaxes(d_ang, -1, -2)
    dvsd[..., 0:3, path] = np.swapaxes(u, -1, -2)
    dvsd[..., 3:6, path] = np.swapaxes(a, -1, -2)
    return dvs, dvsd


def link_twists(model, fr: Frames, links, base_lin, base_ang, sdot):
    """Same values as :func:`twists_from_frames`, vectorized over links with a path mask."""
    links = list(links)
    mask = model._path_mask_topo[links]
    topo = model._topo
    base_lin = np.asarray(base_lin, dtype=float)
    base_ang = np.asarray(base_ang, dtype=float)
    sdot = np.asarray(sdot, dtype=float)
    p = fr.link_pos[..., links, :]
    a = fr.joint_axis[..., None, topo, :]
    w = mask[..., None] * np.asarray(sdot)[..., None, topo, None]
    r = p[..., :, None, :] - fr.joint_origin[..., None, topo, :]
    lin = base_lin[..., None, :] + cross(base_ang[..., None, :], p - fr.base_pos[..., None, :])
    lin = lin + np.sum(w * cross(a, r), axis=-2)
    ang = base_ang[..., None, :] + np.sum(w * a, axis=-2)
    return np.concatenate([lin, ang], axis=-1)


def twist_jacobians(model, fr: Frames, links, base_lin, base_ang, sdot):
    """Twists and their (s, sdot) partials for several links at once.

    Returns ``(twists (..., L, 6), dv_ds (..., L, 6, n), dv_dsdot (..., L, 6, n))``
    using the formulas of :func:`dk_partials`, with path membership as a mask
    over joints in topological order.
    """
    links = list(links)
    topo = model._topo
    mask = model._path_mask_topo[links][..., None]  # (L, n, 1) in topo order
    base_lin = np.asarray(base_lin, dtype=float)
    base_ang = np.asarray(base_ang, dtype=float)
    sdot = np.asarray(sdot, dtype=float)
    p = fr.link_pos[..., links, :]  # (..., L, 3)
    r = p[..., :, None, :] - fr.joint_origin[..., None, topo, :]
    a = np.broadcast_to(fr.joint_axis[..., None, topo, :], r.shape)
    # per joint the columns (u, a) = (a x r, a), zero off the link's path
    ua = mask * np.concatenate([cross(a, r), a], axis=-1)  # (..., L, n, 6)
    s_ua = sdot[..., None, topo, None] * ua
    cs = np.cumsum(s_ua, axis=-2)
    ge = cs[..., -1:, :] - cs + s_ua  # suffix sums over j >= k
    w_lt = cs[..., 3:] - s_ua[..., 3:] + base_ang[..., None, None, :]
    lin = base_lin[..., None, :] + cross(base_ang[..., None, :], p - fr.base_pos[..., None, :]) + ge[..., 0, :3]
    ang = base_ang[..., None, :] + ge[..., 0, 3:]
    twists = np.concatenate([lin, ang], axis=-1)
    # a x U_ge and a x A_ge in one call
    aa = np.concatenate([a, a], axis=-1).reshape(r.shape[:-1] + (2, 3))
    d = cross(aa, ge.reshape(aa.shape)).reshape(ge.shape)
    d[..., :3] += cross(w_lt, ua[..., :3])
    d *= mask
    inv = model._topo_inv
    return twists, np.swapaxes(d, -1, -2)[..., inv], np.swapaxes(ua, -1, -2)[..., inv]


def dk_vjp_from_frames(model, fr: Frames, links, base_ang, sdot, cot) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum_i <cot_i, twist_i> w.r.t. (s, sdot) without forming the partial matrices.

    ``cot`` is (..., len(links), 6). Same formulas as :func:`dk_partials`.
    """
    batch = fr.link_pos.shape[:-2]
    g_s = np.zeros(batch + (model.n,))
    g_sd = np.zeros(batch + (model.n,))
    base_ang = np.asarray(base_ang, dtype=float)
    for d, link in enumerate(links):
        path = list(model.link_paths[link])
        if not path:
            continue
        c_lin = cot[..., d, None, :3]
        c_ang = cot[..., d, None, 3:]
        p = fr.link_pos[..., link, :]
        a = fr.joint_axis[..., path, :]
        u = cross(a, p[..., None, :] - fr.joint_origin[..., path, :])
        sd = sdot[..., path][..., None]
        su, sa = sd * u, sd * a
        U_ge = np.flip(np.cumsum(np.flip(su, -2), -2), -2)
        A_ge = np.flip(np.cumsum(np.flip(sa, -2), -2), -2)
        w_lt = np.cumsum(sa, -2) - sa + base_ang[..., None, :]
        d_lin = cross(w_lt, u) + cross(a, U_ge)
        d_ang = cross(a, A_ge)
        g_s[..., path] += np.sum(c_lin * d_lin + c_ang * d_ang, axis=-1)
        g_sd[..., path] += np.sum(c_lin * u + c_ang * a, axis=-1)
    return g_s, g_sd


def fk_vjp_from_frames(model, fr: Frames, links, cot_p, cot_R) -> np.ndarray:
    """Gradient w.r.t. s of sum_i <cot_p_i, p_i> + <cot_R_i, R_i> over ``links``.

    ``cot_p`` is (..., len(links), 3), ``cot_R`` is (..., len(links), 3, 3).
    Uses dR_i/ds_k = skew(a_k) R_i, so <C, skew(a) R> = a . vee(C R^T - R C^T).
    """
    batch = fr.link_pos.shape[:-2]
    grad = np.zeros(batch + (model.n,))
    for d, link in enumerate(links):
        path = list(model.link_paths[link])
        if not path:
            continue
        cp = cot_p[..., d, :]
        M = cot_R[..., d, :, :] @ np.swapaxes(fr.link_rot[..., link, :, :], -1, -2)
        w = np.stack(
            [M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0], M[..., 1, 0] - M[..., 0, 1]], axis=-1
        )
        r = fr.link_pos[..., link, None, :] - fr.joint_origin[..., path, :]
        lever = cross(r, cp[..., None, :]) + w[..., None, :]
        grad[..., path] += np.sum(fr.joint_axis[..., path, :] * lever, axis=-1)
    return grad


def vjp_fk(model: RigidBodyModel, q: Configuration, link: int, cot_position, cot_rotation) -> np.ndarray:
    _check_link(model, link)
    fr = _frames_of(model, q)
    cp = np.asarray(cot_position, dtype=float).reshape(1, 3)
    cR = np.asarray(cot_rotation, dtype=float).reshape(1, 3, 3)
    return fk_vjp_from_frames(model, fr, [link], cp, cR)


def vjp_dk(model: RigidBodyModel, q: Configuration, nu: SystemVelocity, link: int, cotangent):
    """Gradients of <cotangent, J_link(q) nu> w.r.t. (s, sdot)."""
    _check_link(model, link)
    c = np.asarray(cotangent, dtype=float)
    fr = _frames_of(model, q)
    dvs, dvsd = dk_partials(model, fr, link, nu.base_angular, nu.joint_velocities)
    return c @ dvs, c @ dvsd


def orientation_distance(Ra, Rb) -> float:
    """Squared Frobenius distance between two flattened 3x3 rotations."""
    diff = np.asarray(Ra, dtype=float).reshape(-1) - np.asarray(Rb, dtype=float).reshape(-1)
    return float(diff @ diff)
