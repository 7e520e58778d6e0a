from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinpred.data import generate_motion, simulate_imus
from kinpred.inference import (
    BufferError,
    JointStateBuffer,
    Predictor,
    RefinementProblem,
    init_buffer,
    refine_first_step,
    run_closed_loop,
    sequence_inputs,
    step,
)
from kinpred.kinematics import differential_kinematics
from kinpred.model import Configuration, SystemVelocity
from kinpred.network import init_params
from kinpred.training import TrainConfig

from conftest import feasible_refinement_problem, random_model


def marker(k, n=3):
    return np.full((2, n), float(k))


def constraint_residuals(model, problem, s, sd):
    """Squared twist errors recomputed link by link through the public DK operation."""
    q = Configuration(problem.base_pos, problem.base_rot, s)
    nu = SystemVelocity(problem.base_twist[:3], problem.base_twist[3:], sd)
    out = []
    for link, target in zip(problem.links, problem.link_twists):
        tw = differential_kinematics(model, q, nu, link)
        err = np.concatenate([tw.linear, tw.angular]) - target
        out.append(float(err @ err))
    return np.array(out)


# -- buffer ------------------------------------------------------------------------


def test_init_buffer():
    states = [marker(k) for k in range(9)]
    buf = init_buffer(states, 10)
    assert len(buf) == buf.capacity == 9
    np.testing.assert_array_equal(buf.snapshot(), np.stack(states))
    with pytest.raises(BufferError):
        init_buffer(states[:8], 10)
    with pytest.raises(BufferError):
        init_buffer([np.zeros(3)] * 9, 10)


def test_push_examples():
    buf = init_buffer([marker(k) for k in range(9)], 10)
    buf.push(marker(100))
    np.testing.assert_array_equal(buf.snapshot()[:, 0, 0], [1, 2, 3, 4, 5, 6, 7, 8, 100])
    for k in range(9):
        buf.push(marker(200 + k))
    np.testing.assert_array_equal(buf.snapshot()[:, 0, 0], np.arange(200, 209))
    with pytest.raises(BufferError):
        buf.push(np.zeros((2, 4)))


def test_push_copies():
    buf = init_buffer([marker(k) for k in range(3)], 4)
    x = marker(7)
    buf.push(x)
    x[:] = -1
    assert buf.snapshot()[-1, 0, 0] == 7
    snap = buf.snapshot()
    snap[:] = 0
    assert buf.snapshot()[-1, 0, 0] == 7


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.lists(st.floats(-1e6, 1e6), max_size=60))
def test_fifo_law(size, pushes):
    init = [marker(-k - 1.0) for k in range(size)]
    buf = JointStateBuffer(init)
    for v in pushes:
        buf.push(marker(v))
        assert len(buf) == size
    history = [m[0, 0] for m in init] + list(pushes)
    np.testing.assert_array_equal(buf.snapshot()[:, 0, 0], history[-size:])


# -- refinement ---------------------------------------------------------------------


def test_feasible_start_is_noop(ref_model, rng):
    problem, s, sd = feasible_refinement_problem(ref_model, rng)
    problem = replace(problem, s0=s.copy(), sd0=sd.copy())
    s_out, sd_out, rep = refine_first_step(ref_model, problem)
    np.testing.assert_array_equal(s_out, s)
    np.testing.assert_array_equal(sd_out, sd)
    assert rep.noop and rep.feasible and rep.objective == 0.0


def test_vacuous_constraint_is_noop(ref_model, rng):
    problem, _, _ = feasible_refinement_problem(ref_model, rng, sigma=0.5)
    problem = replace(problem, epsilon=1e6)
    s_out, sd_out, rep = refine_first_step(ref_model, problem)
    np.testing.assert_array_equal(s_out, problem.s0)
    np.testing.assert_array_equal(sd_out, problem.sd0)
    assert rep.noop


def test_perturbed_problems_become_feasible(ref_model):
    rng = np.random.default_rng(21)
    for _ in range(10):
        problem, s, sd = feasible_refinement_problem(ref_model, rng)
        s_out, sd_out, rep = refine_first_step(ref_model, problem)
        assert rep.feasible
        res = constraint_residuals(ref_model, problem, s_out, sd_out)
        assert np.all(res <= problem.epsilon)
        np.testing.assert_allclose(res, rep.residuals, atol=1e-12)
        assert np.all(s_out >= ref_model.lower_limits) and np.all(s_out <= ref_model.upper_limits)
        # the generating point is feasible, so a good solve is at least as close to the guess
        dist = np.sum((s_out - problem.s0) ** 2) + np.sum((sd_out - problem.sd0) ** 2)
        assert dist == pytest.approx(rep.objective, rel=1e-9)
        assert dist <= np.sum((s - problem.s0) ** 2) + np.sum((sd - problem.sd0) ** 2)


def test_random_models_become_feasible():
    rng = np.random.default_rng(5)
    for _ in range(10):
        model = random_model(rng, n=int(rng.integers(3, 8)), D=2, limit=3.0)
        problem, _, _ = feasible_refinement_problem(model, rng)
        s_out, sd_out, rep = refine_first_step(model, problem)
        assert rep.feasible
        assert np.all(constraint_residuals(model, problem, s_out, sd_out) <= problem.epsilon)


def test_nan_rejected(ref_model, rng):
    problem, _, _ = feasible_refinement_problem(ref_model, rng)
    s0 = problem.s0.copy()
    s0[2] = np.nan
    with pytest.raises(FloatingPointError):
        RefinementProblem(s0, problem.sd0, problem.base_pos, problem.base_rot, problem.base_twist,
                          problem.links, problem.link_twists)
    with pytest.raises(ValueError):
        replace(problem, epsilon=0.0)


def test_infeasible_flagged(ref_model, rng):
    problem, _, _ = feasible_refinement_problem(ref_model, rng)
    # a pelvis twist that disagrees with the given base twist cannot be matched by any joint state
    targets = problem.link_twists.copy()
    pelvis = list(problem.links).index(ref_model.base_link_index)
    targets[pelvis, 3:] += 1.0
    problem = replace(problem, link_twists=targets, outer_iters=3, inner_iters=5)
    s_out, sd_out, rep = refine_first_step(ref_model, problem)
    assert not rep.feasible
    assert np.max(rep.residuals) > problem.epsilon
    assert np.all(np.isfinite(s_out)) and np.all(np.isfinite(sd_out))


# -- closed loop --------------------------------------------------------------------


@pytest.fixture(scope="module")
def setup(ref_model):
    cfg = TrainConfig(K=4, inertial_hidden=8, buffer_hidden=8, shared_hidden=8, head_hidden=8)
    params = init_params(cfg.descriptor(ref_model), 0)
    seq = simulate_imus(ref_model, generate_motion(ref_model, "forward_walk", duration=5.5, seed=2, K=4), seed=1)
    return params, seq


def test_step_pushes_refined_state(ref_model, setup):
    params, seq = setup
    pred_ = Predictor(params, ref_model)
    M = pred_.M
    buf = init_buffer(np.stack([seq.s[: M - 1], seq.sdot[: M - 1]], axis=1), M)
    inp = next(sequence_inputs(seq, M))
    pred, rep = step(pred_, buf, inp)
    assert pred.shape == (4, 2, ref_model.n)
    np.testing.assert_array_equal(buf.snapshot()[-1], pred[0])
    assert rep.feasible


def test_closed_loop_buffer_trace(ref_model, setup):
    params, seq = setup
    predictor = Predictor(params, ref_model)
    M = predictor.M
    truth = np.stack([seq.s[: M - 1], seq.sdot[: M - 1]], axis=1)
    buf = init_buffer(truth, M)
    history = list(truth)
    for t, inp in enumerate(sequence_inputs(seq, M)):
        np.testing.assert_array_equal(buf.snapshot(), np.stack(history[-(M - 1):]))
        pred, _ = step(predictor, buf, inp)
        history.append(pred[0].copy())
    assert t + 1 == len(seq) - M + 1 >= 300


def test_closed_loop_deterministic(ref_model, setup):
    params, seq = setup
    seq = seq.slice(0, 80)
    a = run_closed_loop(Predictor(params, ref_model), seq)
    b = run_closed_loop(Predictor(params, ref_model), seq)
    np.testing.assert_array_equal(a.predictions, b.predictions)
    np.testing.assert_array_equal(a.anchors, np.arange(9, len(seq)))
    assert len(a.step_seconds) == len(a.anchors)


def test_without_refinement_only_buffer_matters(ref_model, setup):
    params, seq = setup
    predictor = Predictor(params, ref_model, refine=False)
    M = predictor.M
    inp = next(sequence_inputs(seq, M))
    truth = np.stack([seq.s[: M - 1], seq.sdot[: M - 1]], axis=1)
    b1, b2 = init_buffer(truth, M), init_buffer(truth, M)
    p1, r1 = step(predictor, b1, inp)
    p2, _ = step(predictor, b2, inp)
    assert r1 is None
    np.testing.assert_array_equal(p1, p2)
    # the same window again, now with an evolved buffer
    p3, _ = step(predictor, b1, inp)
    assert not np.array_equal(p1, p3)
    assert np.all(p1[0, 0] >= ref_model.lower_limits) and np.all(p1[0, 0] <= ref_model.upper_limits)


def test_single_precision_forward_close_to_double(ref_model, setup):
    params, seq = setup
    seq = seq.slice(0, 30)
    single = run_closed_loop(Predictor(params, ref_model, refine=False), seq)
    double = run_closed_loop(Predictor(params, ref_model, refine=False, dtype="float64"), seq)
    assert single.predictions.dtype == np.float64
    np.testing.assert_allclose(single.predictions, double.predictions, atol=1e-4)


def test_cast_follows_parameter_updates(ref_model, setup):
    params, _ = setup
    pred = Predictor(params.copy(), ref_model)
    first = pred.network_params()
    assert first is pred.network_params() and first.weights["inertial"].dtype == np.float32
    pred.params.weights["inertial"][0, 0] += 1.0
    pred.params.version += 1
    assert pred.network_params().weights["inertial"][0, 0] == np.float32(pred.params.weights["inertial"][0, 0])


def test_short_sequence_rejected(ref_model, setup):
    params, seq = setup
    with pytest.raises(ValueError):
        run_closed_loop(Predictor(params, ref_model), seq.slice(0, 5))
