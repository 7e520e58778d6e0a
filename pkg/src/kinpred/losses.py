"""Data-fit and kinematics-consistency losses with gradients w.r.t. predicted joint states.

Every function accepts an optional leading batch axis. Losses are averaged
over it and the gradients carry the matching 1/B factor, so summed parameter
gradients are batch means.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import dk_vjp_from_frames, fk_vjp_from_frames, link_frames, twists_from_frames
from .model import RigidBodyModel


class MissingReferenceError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    pos: float = 1.0
    vel: float = 1.0
    fk: float = 0.1
    dk: float = 0.1

    def __post_init__(self):
        if min(self.pos, self.vel, self.fk, self.dk) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")

    def as_tuple(self):
        return (self.pos, self.vel, self.fk, self.dk)


@dataclass
class LinkReferenceWindow:
    """Per-step reference poses/twists of the instrumented links and the true base motion."""

    links: tuple[int, ...]
    link_pos: np.ndarray  # (..., K, D, 3)
    link_rot: np.ndarray  # (..., K, D, 3, 3)
    link_twist: np.ndarray  # (..., K, D, 6)
    base_pos: np.ndarray  # (..., K, 3)
    base_rot: np.ndarray  # (..., K, 3, 3)
    base_twist: np.ndarray  # (..., K, 6)


@dataclass
class LossTerms:
    """Values and gradients (shaped like the prediction, (..., K, 2, n)) of the four losses."""

    values: np.ndarray  # (4,) pos, vel, fk, dk
    grads: np.ndarray  # (4, ..., K, 2, n)


def _count(shape, core: int) -> int:
    return int(np.prod(shape[: len(shape) - core])) if len(shape) > core else 1


def data_loss_terms(pred, target):
    """(L_pos, L_vel, grad_pos, grad_vel) of the MSE data-fit loss."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    K = pred.shape[-3]
    scale = 1.0 / (2.0 * K * _count(pred.shape, 3))
    diff = pred - target
    l_pos = scale * float(np.sum(diff[..., 0, :] ** 2))
    l_vel = scale * float(np.sum(diff[..., 1, :] ** 2))
    g_pos = np.zeros_like(diff)
    g_vel = np.zeros_like(diff)
    g_pos[..., 0, :] = 2.0 * scale * diff[..., 0, :]
    g_vel[..., 1, :] = 2.0 * scale * diff[..., 1, :]
    return l_pos, l_vel, g_pos, g_vel


def data_loss(pred, target):
    l_pos, l_vel, g_pos, g_vel = data_loss_terms(pred, target)
    return l_pos + l_vel, g_pos + g_vel


def _check_refs(model: RigidBodyModel, refs: LinkReferenceWindow):
    missing = set(model.instrumented_links) - set(refs.links)
    if missing:
        names = [model.links[i].name for i in sorted(missing)]
        raise MissingReferenceError(f"no reference data for instrumented links {names}")


def fk_loss(model: RigidBodyModel, pred_positions, refs: LinkReferenceWindow, frames=None):
    """Mean squared link position error plus Frobenius orientation distance over links and steps."""
    _check_refs(model, refs)
    s = np.asarray(pred_positions, dtype=float)
    K = s.shape[-2]
    D = len(refs.links)
    links = list(refs.links)
    fr = frames if frames is not None else link_frames(model, refs.base_pos, refs.base_rot, s)
    dp = fr.link_pos[..., links, :] - refs.link_pos
    dR = fr.link_rot[..., links, :, :] - refs.link_rot
    scale = 1.0 / (D * K * _count(s.shape, 2))
    value = scale * (float(np.sum(dp**2)) + float(np.sum(dR**2)))
    grad = fk_vjp_from_frames(model, fr, links, 2.0 * scale * dp, 2.0 * scale * dR)
    return value, grad


def dk_loss(model: RigidBodyModel, pred, refs: LinkReferenceWindow, frames=None):
    """Mean squared link twist error; returns (value, grad wrt positions, grad wrt velocities)."""
    _check_refs(model, refs)
    pred = np.asarray(pred, dtype=float)
    s, sd = pred[..., 0, :], pred[..., 1, :]
    K = s.shape[-2]
    D = len(refs.links)
    links = list(refs.links)
    base_lin, base_ang = refs.base_twist[..., :3], refs.base_twist[..., 3:]
    fr = frames if frames is not None else link_frames(model, refs.base_pos, refs.base_rot, s)
    tw = twists_from_frames(model, fr, links, base_lin, base_ang, sd)
    res = tw - refs.link_twist
    scale = 1.0 / (D * K * _count(s.shape, 2))
    value = scale * float(np.sum(res**2))
    g_s, g_sd = dk_vjp_from_frames(model, fr, links, base_ang, sd, 2.0 * scale * res)
    return value, g_s, g_sd


def loss_terms(model, pred, target, refs, need_fk: bool = True, need_dk: bool = True) -> LossTerms:
    pred = np.asarray(pred, dtype=float)
    l_pos, l_vel, g_pos, g_vel = data_loss_terms(pred, target)
    values = np.array([l_pos, l_vel, 0.0, 0.0])
    grads = np.zeros((4,) + pred.shape)
    grads[0], grads[1] = g_pos, g_vel
    fr = None
    if need_fk or need_dk:
        _check_refs(model, refs)
        fr = link_frames(model, refs.base_pos, refs.base_rot, pred[..., 0, :])
    if need_fk:
        values[2], g = fk_loss(model, pred[..., 0, :], refs, frames=fr)
        grads[2][..., 0, :] = g
    if need_dk:
        values[3], gs, gsd = dk_loss(model, pred, refs, frames=fr)
        grads[3][..., 0, :] = gs
        grads[3][..., 1, :] = gsd
    return LossTerms(values, grads)


def total_loss(weights: LossWeights, terms: LossTerms):
    lam = np.array(weights.as_tuple(), dtype=float)
    if np.any(lam < 0):
        raise ValueError("negative loss weight")
    value = float(lam @ terms.values)
    grad = np.tensordot(lam, terms.grads, axes=1)
    return value, grad
