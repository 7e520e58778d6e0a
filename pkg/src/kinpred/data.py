"""Synthetic humanoid motion, simulated IMUs, and the dataset file format."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from .container import read_container, write_container
from .kinematics import link_frames, so3_exp, twists_from_frames
from .model import RigidBodyModel

DATASET_MAGIC = b"KPDATA\0\0"
GRAVITY = 9.81
KINDS = ("forward_walk", "backward_walk", "side_step", "walk_lift_arms", "walk_wave_arms", "stand")


class SequenceTooShortError(ValueError):
    pass


class ModelHashMismatch(UserWarning):
    pass


class ModelHashError(ValueError):
    pass


@dataclass
class RecordedSequence:
    rate: float
    kind: str
    model_hash: str
    links: tuple[int, ...]
    base_pos: np.ndarray  # (T, 3)
    base_rot: np.ndarray  # (T, 3, 3)
    s: np.ndarray  # (T, n)
    base_lin: np.ndarray  # (T, 3)
    base_ang: np.ndarray  # (T, 3)
    sdot: np.ndarray  # (T, n)
    link_pos: np.ndarray  # (T, D, 3)
    link_rot: np.ndarray  # (T, D, 3, 3)
    link_twist: np.ndarray  # (T, D, 6)
    imu_acc: Optional[np.ndarray] = None  # (T, D, 3) sensor frame
    imu_ori: Optional[np.ndarray] = None  # (T, D, 9) row-major sensor-to-inertial

    ARRAYS = (
        "base_pos", "base_rot", "s", "base_lin", "base_ang", "sdot",
        "link_pos", "link_rot", "link_twist", "imu_acc", "imu_ori",
    )

    def __len__(self) -> int:
        return self.s.shape[0]

    @property
    def base_twist(self) -> np.ndarray:
        return np.concatenate([self.base_lin, self.base_ang], axis=-1)

    @property
    def imu_features(self) -> np.ndarray:
        """(T, D, 12): acceleration followed by flattened orientation."""
        if self.imu_acc is None:
            raise ValueError("sequence has no IMU readings; run simulate_imus first")
        return np.concatenate([self.imu_acc, self.imu_ori], axis=-1)

    def slice(self, start: int, stop: int) -> "RecordedSequence":
        kw = {name: (None if getattr(self, name) is None else getattr(self, name)[start:stop]) for name in self.ARRAYS}
        return replace(self, **kw)

    def equals(self, other: "RecordedSequence") -> bool:
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or a.shape != b.shape or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True


# -- activity envelope ---------------------------------------------------------


# quintic smootherstep: C2, so 60 Hz central differences of the ramped joints stay O(h^2)
def _smoothstep(x):
    return x**3 * (10.0 - 15.0 * x + 6.0 * x * x)


def _smoothstep_d(x):
    return 30.0 * x * x * (1.0 - x) ** 2


def _smoothstep_int(x):
    return x**4 * (2.5 - 3.0 * x + x * x)


class Envelope:
    """Piecewise activity level in [0, 1] with smooth (C2) ramps between knots.

    ``knots`` is a list of (time, level); the level ramps from one knot to the
    next with a smoothstep and is constant before the first / after the last.
    """

    def __init__(self, knots):
        self.t = np.array([k[0] for k in knots], dtype=float)
        self.v = np.array([k[1] for k in knots], dtype=float)
        seg_int = []
        for k in range(len(self.t) - 1):
            dt = self.t[k + 1] - self.t[k]
            seg_int.append(dt * (self.v[k] + (self.v[k + 1] - self.v[k]) * _smoothstep_int(1.0)))
        self.cum = np.concatenate([[0.0], np.cumsum(seg_int)])

    def _locate(self, t):
        k = np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, len(self.t) - 2)
        dt = self.t[k + 1] - self.t[k]
        x = np.clip((t - self.t[k]) / dt, 0.0, 1.0)
        return k, dt, x

    def value(self, t):
        k, _, x = self._locate(t)
        return self.v[k] + (self.v[k + 1] - self.v[k]) * _smoothstep(x)

    def derivative(self, t):
        k, dt, x = self._locate(t)
        inside = (t >= self.t[0]) & (t <= self.t[-1])
        return np.where(inside, (self.v[k + 1] - self.v[k]) * _smoothstep_d(x) / dt, 0.0)

    def integral(self, t):
        """Integral of the level from the first knot (t0 <= t assumed) to t."""
        k, dt, x = self._locate(t)
        part = dt * (self.v[k] * x + (self.v[k + 1] - self.v[k]) * _smoothstep_int(x))
        beyond = np.maximum(t - self.t[-1], 0.0) * self.v[-1]
        return self.cum[k] + part + beyond


def stand_walk_envelope(duration: float, stand: float = 2.0, walk: float = 4.0, ramp: float = 2.0) -> Envelope:
    knots = [(0.0, 0.0)]
    t = 0.0
    while t < duration:
        knots += [(t + stand, 0.0), (t + stand + ramp, 1.0), (t + stand + ramp + walk, 1.0),
                  (t + stand + 2 * ramp + walk, 0.0)]
        t += stand + 2 * ramp + walk
    return Envelope(knots)


# -- gait tables ---------------------------------------------------------------
# joint name -> (posture offset, walking bias, [(amplitude, harmonic, phase), ...])

_PI = np.pi


def _legs(hip_y=0.32, knee=0.3, hip_x=0.04, reverse=False, side=0.0):
    sgn = -1.0 if reverse else 1.0
    table = {}
    for lr, ph in (("l", 0.0), ("r", _PI)):
        abd = 1.0 if lr == "l" else -1.0
        table[f"{lr}_hip_y"] = (-0.05, -0.1, [(hip_y, sgn, ph)])
        table[f"{lr}_knee_y"] = (0.1, 0.3, [(knee, sgn, ph + 1.2)])
        table[f"{lr}_hip_x"] = (0.02 * abd, side * abd, [(hip_x + side, sgn, ph + 0.5 * _PI)])
        table[f"{lr}_hip_z"] = (0.0, 0.0, [(0.04, sgn, ph)])
    return table


def _arms(swing=0.25, reverse=False):
    sgn = -1.0 if reverse else 1.0
    table = {"lumbar_flex": (0.05, 0.0, [(0.03, 2.0, 0.0)]), "lumbar_rot": (0.0, 0.0, [(0.07, sgn, 0.0)])}
    for lr, ph in (("l", _PI), ("r", 0.0)):
        abd = 1.0 if lr == "l" else -1.0
        table[f"{lr}_shoulder_y"] = (0.0, 0.0, [(swing, sgn, ph)])
        table[f"{lr}_shoulder_x"] = (0.12 * abd, 0.0, [(0.03, 2.0, 0.0)])
        table[f"{lr}_shoulder_z"] = (0.0, 0.0, [(0.05, sgn, ph)])
        table[f"{lr}_elbow_y"] = (-0.3, -0.1, [(0.12, sgn, ph + 0.4)])
        table[f"{lr}_forearm_z"] = (0.0, 0.0, [(0.05, sgn, ph)])
    return table


# Stride frequencies are kept low (~0.5 Hz) and harmonics small so that the
# O(h^2) error of 60 Hz central differences stays below 1e-3 rad/s.
def _gait(kind: str):
    """(joint table, base direction in heading frame, speed m/s, stride frequency Hz)."""
    if kind in ("forward_walk", "stand"):
        return {**_legs(), **_arms()}, (1.0, 0.0), 0.7, 0.5
    if kind == "backward_walk":
        return {**_legs(hip_y=0.22, knee=0.25, reverse=True), **_arms(swing=0.15, reverse=True)}, (-1.0, 0.0), 0.4, 0.45
    if kind == "side_step":
        table = {**_legs(hip_y=0.08, knee=0.25, side=0.12), **_arms(swing=0.06)}
        return table, (0.0, 1.0), 0.3, 0.5
    if kind == "walk_lift_arms":
        table = {**_legs(), **_arms(swing=0.1)}
        table["l_shoulder_x"] = (0.12, 0.9, [(0.75, 0.25, 0.0)])
        table["r_shoulder_x"] = (-0.12, -0.9, [(0.75, 0.25, 0.0)])
        return table, (1.0, 0.0), 0.65, 0.5
    if kind == "walk_wave_arms":
        table = {**_legs(), **_arms(swing=0.1)}
        table["l_shoulder_x"] = (0.12, 1.3, [(0.1, 1.0, 0.0)])
        table["l_elbow_y"] = (-0.3, -0.6, [(0.3, 1.0, 0.0)])
        table["l_forearm_z"] = (0.0, 0.0, [(0.25, 1.0, 0.5)])
        table["r_shoulder_x"] = (-0.12, -1.3, [(0.1, 1.0, _PI)])
        table["r_elbow_y"] = (-0.3, -0.6, [(0.3, 1.0, _PI)])
        table["r_forearm_z"] = (0.0, 0.0, [(0.25, 1.0, _PI + 0.5)])
        return table, (1.0, 0.0), 0.65, 0.5
    raise ValueError(f"unknown motion kind {kind!r}; expected one of {KINDS}")


def _fit_limits(c, b, amps, lo, hi, margin=0.02):
    """Shrink the oscillation so c and c + b +/- sum|A| stay inside [lo+margin, hi-margin]."""
    lo_m, hi_m = lo + margin, hi - margin
    c = min(max(c, lo_m), hi_m)
    total = float(np.sum(np.abs(amps)))
    top = c + b + total
    bot = c + b - total
    scale = 1.0
    if top > hi_m:
        scale = min(scale, (hi_m - c) / max(b + total, 1e-12)) if b + total > 0 else 0.0
    if bot < lo_m:
        scale = min(scale, (c - lo_m) / max(total - b, 1e-12)) if total - b > 0 else 0.0
    scale = max(scale, 0.0)
    return c, b * scale, np.asarray(amps) * scale


def generate_motion(
    model: RigidBodyModel,
    kind: str,
    duration: float = 60.0,
    rate: float = 60.0,
    seed: int = 0,
    transitions: bool = False,
    M: int = 10,
    K: int = 60,
) -> RecordedSequence:
    """Phase-locked sinusoidal gait with analytic joint velocities and a consistent base path.

    ``transitions=True`` alternates standing and the chosen gait with C1
    ramps. IMU channels are left empty; see :func:`simulate_imus`.
    """
    T = int(round(duration * rate))
    if T < M + K:
        raise SequenceTooShortError(f"{T} frames < M+K = {M + K}")
    table, direction, speed, freq = _gait(kind)
    rng = np.random.default_rng(seed)
    t = np.arange(T) / rate
    if kind == "stand":
        env = Envelope([(0.0, 0.0), (duration, 0.0)])
    elif transitions:
        env = stand_walk_envelope(duration)
    else:
        env = Envelope([(0.0, 1.0), (duration, 1.0)])
    e, de, E = env.value(t), env.derivative(t), env.integral(t)

    freq *= rng.uniform(0.95, 1.05)
    omega = 2 * _PI * freq
    phase0 = rng.uniform(0, 2 * _PI)
    theta = omega * t + phase0

    n = model.n
    s = np.zeros((T, n))
    sdot = np.zeros((T, n))
    lo, hi = model.lower_limits, model.upper_limits
    for j, joint in enumerate(model.joints):
        c, b, terms = table.get(joint.name, (0.0, 0.0, []))
        c = c + rng.normal(0.0, 0.02)
        amps = np.array([a for a, _, _ in terms]) * rng.uniform(0.85, 1.15, size=len(terms))
        harm = np.array([h for _, h, _ in terms])
        ph = np.array([p for _, _, p in terms]) + rng.normal(0.0, 0.15, size=len(terms))
        c, b, amps = _fit_limits(c, b, amps, lo[j], hi[j])
        if len(terms):
            arg = harm[None, :] * theta[:, None] + ph[None, :]
            osc = b + np.sin(arg) @ amps
            dosc = (np.cos(arg) * harm[None, :] * omega) @ amps
        else:
            osc = np.full(T, b)
            dosc = np.zeros(T)
        s[:, j] = c + e * osc
        sdot[:, j] = de * osc + e * dosc

    # sensor-to-body calibration aligns the global frame with the initial facing
    # direction, so headings only jitter; fully random headings would put the
    # orientation features of every new recording out of distribution
    heading = rng.normal(0.0, np.radians(5.0))
    Rz = np.array([[np.cos(heading), -np.sin(heading), 0.0], [np.sin(heading), np.cos(heading), 0.0], [0, 0, 1.0]])
    speed *= rng.uniform(0.9, 1.1)
    d_world = Rz @ np.array([direction[0], direction[1], 0.0])
    p0 = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), 1.0])
    bob, sway = 0.02, 0.04
    base_pos = p0 + speed * E[:, None] * d_world
    base_pos[:, 2] += e * bob * np.sin(2 * theta)
    base_lin = speed * e[:, None] * d_world
    base_lin[:, 2] += bob * (de * np.sin(2 * theta) + e * 2 * omega * np.cos(2 * theta))
    roll = e * sway * np.sin(theta)
    droll = sway * (de * np.sin(theta) + e * omega * np.cos(theta))
    cr, sr = np.cos(roll), np.sin(roll)
    Rx = np.zeros((T, 3, 3))
    Rx[:, 0, 0] = 1.0
    Rx[:, 1, 1], Rx[:, 1, 2], Rx[:, 2, 1], Rx[:, 2, 2] = cr, -sr, sr, cr
    base_rot = Rz @ Rx
    base_ang = droll[:, None] * Rz[:, 0][None, :]

    seq = kinematic_sequence(model, rate, kind, base_pos, base_rot, s, base_lin, base_ang, sdot)
    return seq


def kinematic_sequence(model, rate, kind, base_pos, base_rot, s, base_lin, base_ang, sdot) -> RecordedSequence:
    """Fill instrumented link poses/twists from a joint-space trajectory."""
    links = tuple(model.instrumented_links)
    fr = link_frames(model, base_pos, base_rot, s)
    tw = twists_from_frames(model, fr, links, base_lin, base_ang, sdot)
    return RecordedSequence(
        rate=float(rate),
        kind=kind,
        model_hash=model.hash(),
        links=links,
        base_pos=np.asarray(base_pos, dtype=float),
        base_rot=np.asarray(base_rot, dtype=float),
        s=np.asarray(s, dtype=float),
        base_lin=np.asarray(base_lin, dtype=float),
        base_ang=np.asarray(base_ang, dtype=float),
        sdot=np.asarray(sdot, dtype=float),
        link_pos=fr.link_pos[:, list(links)],
        link_rot=fr.link_rot[:, list(links)],
        link_twist=tw,
    )


def simulate_imus(
    model: RigidBodyModel,
    seq: RecordedSequence,
    noise_acc: float = 0.0,
    noise_ori: float = 0.0,
    seed: int = 0,
    gravity: bool = True,
) -> RecordedSequence:
    """Accelerometer = R^T (a_world + g_up) from second differences of the link origin.

    ``gravity=False`` gives gravity-free (free) acceleration instead of proper
    acceleration. Orientation noise is a random small rotation applied in the
    sensor frame.
    """
    T = len(seq)
    if T < 3:
        raise SequenceTooShortError("IMU simulation needs at least 3 frames")
    dt = 1.0 / seq.rate
    p = seq.link_pos
    a = np.empty_like(p)
    a[1:-1] = (p[2:] - 2.0 * p[1:-1] + p[:-2]) / dt**2
    a[0], a[-1] = a[1], a[-2]
    if gravity:
        a = a + np.array([0.0, 0.0, GRAVITY])
    R = seq.link_rot
    acc = np.einsum("tdji,tdj->tdi", R, a)
    rng = np.random.default_rng(seed)
    if noise_acc > 0:
        acc = acc + rng.normal(0.0, noise_acc, size=acc.shape)
    if noise_ori > 0:
        R = R @ so3_exp(rng.normal(0.0, noise_ori, size=R.shape[:-1]))
    return replace(seq, imu_acc=acc, imu_ori=R.reshape(T, -1, 9).copy())


# -- dataset files ---------------------------------------------------------------


def write_dataset(seq: RecordedSequence, path) -> None:
    arrays = {name: getattr(seq, name) for name in seq.ARRAYS if getattr(seq, name) is not None}
    meta = {
        "kind": "dataset",
        "motion": seq.kind,
        "rate": seq.rate,
        "model_hash": seq.model_hash,
        "links": list(seq.links),
        "n_frames": len(seq),
        "columns": list(arrays),
    }
    write_container(path, DATASET_MAGIC, meta, arrays)


def read_dataset(path, expected_model_hash: str | None = None, strict: bool = False) -> RecordedSequence:
    meta, arrays = read_container(path, DATASET_MAGIC)
    if expected_model_hash is not None and meta["model_hash"] != expected_model_hash:
        msg = f"{path}: dataset written for model {meta['model_hash']}, current model is {expected_model_hash}"
        if strict:
            raise ModelHashError(msg)
        warnings.warn(msg, ModelHashMismatch, stacklevel=2)
    return RecordedSequence(
        rate=float(meta["rate"]),
        kind=meta["motion"],
        model_hash=meta["model_hash"],
        links=tuple(meta["links"]),
        **{name: arrays.get(name) for name in RecordedSequence.ARRAYS},
    )
