import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinpred.container import CorruptFileError
from kinpred.data import (
    GRAVITY,
    KINDS,
    ModelHashError,
    ModelHashMismatch,
    SequenceTooShortError,
    generate_motion,
    kinematic_sequence,
    read_dataset,
    simulate_imus,
    stand_walk_envelope,
    write_dataset,
)
from kinpred.kinematics import link_frames, twists_from_frames
from kinpred.model import parse_model, reference_model

REF = reference_model()

PENDULUM_TIP = """<robot name="pendulum">
  <link name="base"/>
  <link name="arm"/>
  <link name="tip"/>
  <joint name="swing" type="revolute">
    <parent link="base"/>
    <child link="arm"/>
    <origin xyz="0 0 0" rpy="0 0 0"/>
    <axis xyz="0 1 0"/>
    <limit lower="-3" upper="3"/>
  </joint>
  <joint name="fix" type="revolute">
    <parent link="arm"/>
    <child link="tip"/>
    <origin xyz="0 0 -0.8" rpy="0 0 0"/>
    <axis xyz="1 0 0"/>
    <limit lower="-1" upper="1"/>
  </joint>
  <kinpred base="base"><instrumented links="tip"/><upper joints="swing"/><lower joints="fix"/></kinpred>
</robot>
"""

PENDULUM = """<robot name="pendulum">
  <link name="base"/>
  <link name="arm"/>
  <joint name="swing" type="revolute">
    <parent link="base"/>
    <child link="arm"/>
    <origin xyz="0 0 0" rpy="0 0 0"/>
    <axis xyz="0 1 0"/>
    <limit lower="-3" upper="3"/>
  </joint>
  <kinpred base="base"><instrumented links="arm"/><upper joints="swing"/><lower joints=""/></kinpred>
</robot>
"""


@pytest.fixture(scope="module")
def walk():
    return generate_motion(REF, "forward_walk", duration=10.0, seed=4)


def test_stand_is_static():
    seq = generate_motion(REF, "stand", duration=3.0, seed=1)
    assert np.all(seq.sdot == 0.0)
    assert np.all(seq.base_lin == 0.0) and np.all(seq.base_ang == 0.0)
    assert np.all(seq.base_pos == seq.base_pos[0])


@pytest.mark.parametrize("kind", KINDS)
def test_velocity_matches_fd(kind):
    seq = generate_motion(REF, kind, duration=10.0, seed=2, transitions=kind != "stand")
    fd = (seq.s[2:] - seq.s[:-2]) * seq.rate / 2.0
    assert np.max(np.abs(fd - seq.sdot[1:-1])) < 1e-3


@pytest.mark.parametrize("kind", KINDS)
def test_limits_respected(kind):
    seq = generate_motion(REF, kind, duration=8.0, seed=6)
    assert np.all(seq.s >= REF.lower_limits) and np.all(seq.s <= REF.upper_limits)


def test_same_seed_same_sequence():
    a = generate_motion(REF, "side_step", duration=3.0, seed=9)
    b = generate_motion(REF, "side_step", duration=3.0, seed=9)
    c = generate_motion(REF, "side_step", duration=3.0, seed=10)
    assert a.equals(b)
    assert not a.equals(c)


def test_too_short():
    with pytest.raises(SequenceTooShortError):
        generate_motion(REF, "forward_walk", duration=1.0)


def test_self_consistency(walk):
    links = list(walk.links)
    fr = link_frames(REF, walk.base_pos, walk.base_rot, walk.s)
    np.testing.assert_allclose(fr.link_pos[:, links], walk.link_pos, atol=1e-9)
    np.testing.assert_allclose(fr.link_rot[:, links], walk.link_rot, atol=1e-9)
    tw = twists_from_frames(REF, fr, links, walk.base_lin, walk.base_ang, walk.sdot)
    np.testing.assert_allclose(tw, walk.link_twist, atol=1e-9)


def test_base_twist_consistent_with_path(walk):
    fd = (walk.base_pos[2:] - walk.base_pos[:-2]) * walk.rate / 2.0
    assert np.max(np.abs(fd - walk.base_lin[1:-1])) < 1e-3
    W = (walk.base_rot[2:] - walk.base_rot[:-2]) * walk.rate / 2.0 @ np.swapaxes(walk.base_rot[1:-1], -1, -2)
    w = np.stack([W[:, 2, 1], W[:, 0, 2], W[:, 1, 0]], axis=-1)
    assert np.max(np.abs(w - walk.base_ang[1:-1])) < 1e-3


def test_transition_envelope_is_c1():
    env = stand_walk_envelope(20.0)
    t = np.linspace(0, 20, 20001)
    e, de = env.value(t), env.derivative(t)
    assert e.min() >= 0.0 and e.max() <= 1.0
    assert e[0] == 0.0 and e.max() == 1.0
    fd = np.gradient(e, t)
    assert np.max(np.abs(fd - de)) < 1e-3
    assert np.max(np.abs(np.diff(de))) < 1e-2  # no jumps in the derivative


# -- IMU simulation --------------------------------------------------------------------


def test_stand_reads_gravity():
    seq = simulate_imus(REF, generate_motion(REF, "stand", duration=2.0, seed=0))
    np.testing.assert_allclose(np.linalg.norm(seq.imu_acc, axis=-1), GRAVITY, atol=1e-9)
    expected = np.einsum("tdji,j->tdi", seq.link_rot, [0.0, 0.0, GRAVITY])
    np.testing.assert_allclose(seq.imu_acc, expected, atol=1e-9)


def test_orientation_is_link_rotation(walk):
    seq = simulate_imus(REF, walk)
    np.testing.assert_array_equal(seq.imu_ori.reshape(walk.link_rot.shape), walk.link_rot)
    R = seq.imu_ori.reshape(-1, 3, 3)
    np.testing.assert_allclose(R @ np.swapaxes(R, -1, -2), np.broadcast_to(np.eye(3), R.shape), atol=1e-6)


def test_constant_velocity_base_reads_gravity():
    seq = generate_motion(REF, "stand", duration=2.0, seed=0)
    T = len(seq)
    v = np.array([0.7, -0.2, 0.1])
    moved = kinematic_sequence(
        REF, seq.rate, "stand", seq.base_pos + np.arange(T)[:, None] / seq.rate * v, seq.base_rot, seq.s,
        np.broadcast_to(v, (T, 3)), seq.base_ang, seq.sdot,
    )
    a = simulate_imus(REF, seq).imu_acc
    b = simulate_imus(REF, moved).imu_acc
    np.testing.assert_allclose(b, a, atol=1e-9)


def test_gravity_free_switch():
    seq = simulate_imus(REF, generate_motion(REF, "stand", duration=2.0, seed=0), gravity=False)
    np.testing.assert_allclose(seq.imu_acc, 0.0, atol=1e-9)


def test_single_joint_accelerometer_matches_analytic():
    model = parse_model(PENDULUM_TIP)
    rate, T = 60.0, 240
    t = np.arange(T) / rate
    A, w = 0.6, 2.0
    th, thd, thdd = A * np.sin(w * t), A * w * np.cos(w * t), -A * w * w * np.sin(w * t)
    s = np.stack([th, np.zeros(T)], axis=1)
    sd = np.stack([thd, np.zeros(T)], axis=1)
    eye = np.broadcast_to(np.eye(3), (T, 3, 3))
    zero = np.zeros((T, 3))
    seq = simulate_imus(model, kinematic_sequence(model, rate, "stand", zero, eye, s, zero, zero, sd))
    # tip at distance L below the pivot swinging about y: p = (-L sin th, 0, -L cos th)
    L = 0.8
    ax = -L * (thdd * np.cos(th) - thd**2 * np.sin(th))
    az = L * (thdd * np.sin(th) + thd**2 * np.cos(th))
    a_world = np.stack([ax, np.zeros(T), az + GRAVITY], axis=-1)
    expected = np.einsum("tji,tj->ti", seq.link_rot[:, 0], a_world)
    assert np.max(np.abs(seq.imu_acc[1:-1, 0] - expected[1:-1])) < 1e-2


def test_imu_noise_is_seeded(walk):
    a = simulate_imus(REF, walk, noise_acc=0.1, noise_ori=0.01, seed=3)
    b = simulate_imus(REF, walk, noise_acc=0.1, noise_ori=0.01, seed=3)
    np.testing.assert_array_equal(a.imu_acc, b.imu_acc)
    clean = simulate_imus(REF, walk)
    assert 0.05 < np.std(a.imu_acc - clean.imu_acc) < 0.2
    R = a.imu_ori.reshape(-1, 3, 3)
    np.testing.assert_allclose(R @ np.swapaxes(R, -1, -2), np.broadcast_to(np.eye(3), R.shape), atol=1e-6)


def test_imu_too_short(walk):
    with pytest.raises(SequenceTooShortError):
        simulate_imus(REF, walk.slice(0, 2))


# -- dataset files -----------------------------------------------------------------------


@settings(max_examples=6, deadline=None)
@given(st.sampled_from(KINDS), st.integers(0, 1000))
def test_dataset_round_trip(tmp_path_factory, kind, seed):
    seq = simulate_imus(REF, generate_motion(REF, kind, duration=1.5, seed=seed), noise_acc=0.1, seed=seed)
    path = tmp_path_factory.mktemp("ds") / "x.kpd"
    write_dataset(seq, path)
    assert read_dataset(path).equals(seq)


def test_truncated_dataset(tmp_path, walk):
    path = tmp_path / "x.kpd"
    write_dataset(walk, path)
    data = path.read_bytes()
    for cut in (5, 30, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(CorruptFileError):
            read_dataset(path)


def test_wrong_magic(tmp_path, walk):
    path = tmp_path / "x.kpd"
    write_dataset(walk, path)
    data = bytearray(path.read_bytes())
    data[:8] = b"NOTADATA"
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptFileError):
        read_dataset(path)


def test_model_hash_mismatch(tmp_path, walk):
    path = tmp_path / "x.kpd"
    write_dataset(walk, path)
    other = parse_model(PENDULUM).hash()
    with pytest.warns(ModelHashMismatch):
        read_dataset(path, expected_model_hash=other)
    with pytest.raises(ModelHashError):
        read_dataset(path, expected_model_hash=other, strict=True)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        read_dataset(path, expected_model_hash=REF.hash())
