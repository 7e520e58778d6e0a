"""Closed-loop inference: FIFO joint-state buffer, first-step refinement, stream runner.

The refinement solves

    min ||s - s0||^2 + ||sd - sd0||^2   s.t.   ||G_i(s, sd) - v_i||^2 <= eps  for every instrumented link

where G_i is the link twist under the given base pose and twist. An augmented
Lagrangian on the equalities G_i = v_i, minimized by projected Gauss-Newton,
lands on the constraint manifold; a short walk back toward the guess then uses
part of the eps slack. Joint positions stay within their limits throughout.
"""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ._fastkin import link_twists_single
from .data import RecordedSequence
from .model import RigidBodyModel, clamp_to_limits
from .network import PredictorParams, forward


class BufferError(ValueError):
    pass


class JointStateBuffer:
    """Ring of the last M-1 joint states (s, sdot), read oldest-first."""

    def __init__(self, states):
        states = [np.asarray(st, dtype=float) for st in states]
        if not states:
            raise BufferError("buffer needs at least one entry")
        self._shape = states[0].shape
        for st in states:
            if st.shape != self._shape or st.ndim != 2 or st.shape[0] != 2:
                raise BufferError(f"buffer entries must be (2, n) arrays, got {st.shape}")
        self._ring = deque((st.copy() for st in states), maxlen=len(states))

    def __len__(self) -> int:
        return len(self._ring)

    @property
    def capacity(self) -> int:
        return self._ring.maxlen

    def push(self, state) -> None:
        state = np.asarray(state, dtype=float)
        if state.shape != self._shape:
            raise BufferError(f"state shape {state.shape} != buffer entry shape {self._shape}")
        self._ring.append(state.copy())

    def snapshot(self) -> np.ndarray:
        """(M-1, 2, n) copy, oldest first."""
        return np.stack(self._ring)


def init_buffer(states, M: int) -> JointStateBuffer:
    states = list(states) if not isinstance(states, np.ndarray) else list(states)
    if len(states) != M - 1:
        raise BufferError(f"buffer needs exactly M-1 = {M - 1} states, got {len(states)}")
    return JointStateBuffer(states)


# -- refinement ------------------------------------------------------------------


@dataclass
class RefinementProblem:
    s0: np.ndarray  # (n,) initial guess
    sd0: np.ndarray  # (n,)
    base_pos: np.ndarray  # (3,)
    base_rot: np.ndarray  # (3, 3)
    base_twist: np.ndarray  # (6,) linear; angular
    links: tuple[int, ...]
    link_twists: np.ndarray  # (len(links), 6)
    epsilon: float = 1e-4
    outer_iters: int = 10
    inner_iters: int = 20

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        arrays = (self.s0, self.sd0, self.base_pos, self.base_rot, self.base_twist, self.link_twists)
        if not all(np.all(np.isfinite(np.asarray(a, dtype=float))) for a in arrays):
            raise FloatingPointError("refinement problem contains NaN or inf")


@dataclass
class RefinementReport:
    feasible: bool
    objective: float
    residuals: np.ndarray  # squared twist error per link
    outer: int = 0
    inner: int = 0
    noop: bool = False


class _Evaluator:
    """Twist residuals and their Jacobian for one refinement problem."""

    def __init__(self, model, problem: RefinementProblem):
        self.model, self.problem = model, problem
        self.links = np.asarray(problem.links, dtype=np.int64)
        self.base_lin, self.base_ang = problem.base_twist[:3], problem.base_twist[3:]

    def _eval(self, x, jacobian):
        n = self.model.n
        p = self.problem
        return link_twists_single(self.model, p.base_pos, p.base_rot, x[:n], x[n:], self.base_lin, self.base_ang,
                                  self.links, jacobian)

    def __call__(self, x):
        tw, dvs, dvsd = self._eval(x, True)
        return tw - self.problem.link_twists, np.concatenate([dvs, dvsd], axis=-1)

    def residual(self, x):
        return self._eval(x, False)[0] - self.problem.link_twists


def refine_first_step(
    model: RigidBodyModel,
    problem: RefinementProblem,
    tighten: float = 0.5,
    mu0: float = 1e4,
    rtol: float = 1e-12,
):
    """Move the initial guess into the twist-consistent set; returns (s*, sd*, report).

    A feasible start is returned untouched. Otherwise the twist residuals of
    the links below the base are driven to zero, after which the point is
    relaxed back toward the guess until the largest residual reaches
    ``tighten * epsilon``. The base link's twist does not depend on the joints,
    so it is only checked. Without convergence the last iterate is returned and
    flagged infeasible.
    """
    n = model.n
    s0 = np.asarray(problem.s0, dtype=float)
    sd0 = np.asarray(problem.sd0, dtype=float)
    x0 = np.concatenate([s0, sd0])
    eps = problem.epsilon
    ev = _Evaluator(model, problem)
    r, J = ev(x0)
    sq = np.sum(r * r, axis=-1)
    if np.all(sq <= eps):
        return s0.copy(), sd0.copy(), RefinementReport(True, 0.0, sq, noop=True)

    movable = np.array([len(model.link_paths[link]) > 0 for link in problem.links])
    lo, hi = model.lower_limits, model.upper_limits
    lam = np.zeros((int(movable.sum()), 6))
    mu = mu0
    x = x0.copy()
    x[:n] = np.clip(x[:n], lo, hi)
    if not np.array_equal(x, x0):
        r, J = ev(x)

    def merit(x, r):
        d, w = x - x0, r[movable] + lam / mu
        return 0.5 * (d @ d) + 0.5 * mu * np.sum(w * w)

    eye = np.eye(2 * n)
    inner_total = outer = 0
    for outer in range(1, problem.outer_iters + 1):
        f0 = merit(x, r)
        for _ in range(problem.inner_iters):
            inner_total += 1
            Jm = J[movable].reshape(-1, 2 * n)
            g = (x - x0) + Jm.T @ (mu * r[movable] + lam).reshape(-1)
            H = eye + mu * (Jm.T @ Jm)
            # variables pinned at a joint limit with the gradient pushing outward stay fixed
            free = np.ones(2 * n, dtype=bool)
            free[:n] = ~(((x[:n] <= lo) & (g[:n] > 0)) | ((x[:n] >= hi) & (g[:n] < 0)))
            step = np.zeros(2 * n)
            step[free] = -np.linalg.solve(H[np.ix_(free, free)], g[free])
            slope = min(float(g @ step), 0.0)
            alpha = 1.0
            while True:
                xt = x + alpha * step
                xt[:n] = np.clip(xt[:n], lo, hi)
                rt, Jt = ev(xt)
                ft = merit(xt, rt)
                if ft <= f0 + 1e-4 * alpha * slope or alpha < 1e-3:
                    break
                alpha *= 0.25
            if ft > f0:
                break
            decrease = f0 - ft
            x, r, J, f0 = xt, rt, Jt, ft
            if np.max(np.sum(r[movable] ** 2, axis=-1)) <= 0.1 * tighten * eps or decrease < rtol * (1.0 + f0):
                break
        sq = np.sum(r * r, axis=-1)
        if np.all(sq[movable] <= tighten * eps):
            break
        lam = lam + mu * r[movable]
        mu *= 10.0

    sq = np.sum(r * r, axis=-1)
    feasible = bool(np.all(sq <= eps))
    if feasible:
        # walk back toward the guess; the linearized residual growth sets the first trial
        d = np.concatenate([np.clip(s0, lo, hi), sd0]) - x
        growth = np.linalg.norm(J[movable] @ d, axis=-1)
        slack = np.sqrt(tighten * eps) - np.sqrt(sq[movable])
        alpha = float(min(1.0, np.min(slack / np.maximum(growth, 1e-300))))
        for _ in range(3):
            if alpha <= 0.0:
                break
            xt = x + alpha * d
            rt = ev.residual(xt)
            sqt = np.sum(rt * rt, axis=-1)
            if np.all(sqt <= tighten * eps):
                x, sq = xt, sqt
                break
            alpha *= 0.5
    report = RefinementReport(feasible, float(np.sum((x - x0) ** 2)), sq, outer, inner_total)
    return clamp_to_limits(model, x[:n]), x[n:].copy(), report


# -- closed loop -----------------------------------------------------------------


@dataclass
class StepInput:
    """One timestep of the sensor stream plus the base and link-twist channels."""

    window: np.ndarray  # (M, N, F) inertial window ending at this step
    base_pos: np.ndarray
    base_rot: np.ndarray
    base_twist: np.ndarray  # (6,)
    link_twists: np.ndarray  # (D, 6)


@dataclass
class Predictor:
    params: PredictorParams
    model: RigidBodyModel
    refine: bool = True
    epsilon: float = 1e-4
    outer_iters: int = 10
    inner_iters: int = 20
    # single precision halves the memory traffic of the per-step forward pass
    dtype: str = "float32"
    _cast: tuple | None = field(default=None, init=False, repr=False, compare=False)

    def network_params(self) -> PredictorParams:
        """The parameters cast to ``dtype``, rebuilt when they are replaced or updated."""
        key = (id(self.params), self.params.version, self.dtype)
        if self._cast is None or self._cast[0] != key:
            self._cast = (key, self.params.astype(self.dtype))
        return self._cast[1]

    @property
    def M(self) -> int:
        return self.params.descriptor.M

    @property
    def K(self) -> int:
        return self.params.descriptor.K


def step(predictor: Predictor, buffer: JointStateBuffer, inp: StepInput):
    """Predict K steps, refine step 0, push it into the buffer; returns (prediction, report)."""
    model = predictor.model
    pred, _ = forward(predictor.network_params(), inp.window, buffer.snapshot())
    pred = pred.astype(float)
    report = None
    if predictor.refine:
        problem = RefinementProblem(
            pred[0, 0],
            pred[0, 1],
            inp.base_pos,
            inp.base_rot,
            inp.base_twist,
            tuple(model.instrumented_links),
            inp.link_twists,
            predictor.epsilon,
            predictor.outer_iters,
            predictor.inner_iters,
        )
        s_star, sd_star, report = refine_first_step(model, problem)
        pred[0, 0], pred[0, 1] = s_star, sd_star
    else:
        pred[0, 0] = clamp_to_limits(model, pred[0, 0])
    buffer.push(pred[0])
    return pred, report


@dataclass
class ClosedLoopResult:
    anchors: np.ndarray  # (P,) frame index of each prediction's step 0
    predictions: np.ndarray  # (P, K, 2, n)
    reports: list = field(default_factory=list)
    step_seconds: np.ndarray = field(default_factory=lambda: np.zeros(0))


def sequence_inputs(seq: RecordedSequence, M: int, twist_noise: float = 0.0, seed: int = 0):
    """Yield StepInput for every frame m >= M-1 of a recorded sequence."""
    rng = np.random.default_rng(seed)
    imu = seq.imu_features
    base_twist = seq.base_twist
    for m in range(M - 1, len(seq)):
        tw = seq.link_twist[m]
        if twist_noise > 0:
            tw = tw + rng.normal(0.0, twist_noise, tw.shape)
        yield StepInput(imu[m - M + 1: m + 1], seq.base_pos[m], seq.base_rot[m], base_twist[m], tw)


def run_closed_loop(predictor: Predictor, seq: RecordedSequence, twist_noise: float = 0.0, seed: int = 0):
    """Seed the buffer with the first M-1 true states and predict at every later frame."""
    M = predictor.M
    if len(seq) < M:
        raise ValueError(f"sequence of {len(seq)} frames is shorter than M = {M}")
    truth = np.stack([seq.s[: M - 1], seq.sdot[: M - 1]], axis=1)
    buffer = init_buffer(truth, M)
    preds, reports, times = [], [], []
    for inp in sequence_inputs(seq, M, twist_noise, seed):
        t0 = time.perf_counter()
        pred, rep = step(predictor, buffer, inp)
        times.append(time.perf_counter() - t0)
        preds.append(pred)
        reports.append(rep)
    anchors = np.arange(M - 1, len(seq))
    out = np.stack(preds) if preds else np.zeros((0, predictor.K, 2, predictor.model.n))
    return ClosedLoopResult(anchors, out, reports, np.asarray(times))
